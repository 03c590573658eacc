//! im2col convolution and average pooling kernels on NCHW buffers.

use crate::tensor::{gemm, Element, Trans};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a strided window sweep, `None` if the window does not fit.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col<T: Element>(g: &ConvGeom, image: &[T], col: &mut [T]) {
    let l = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::ZERO
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeom, col: &[T], image: &mut [T]) {
    let l = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * l..(row + 1) * l];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight (O x CKK) * im2col(x[n])`.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let (ckk, l) = (g.patch_len(), g.out_pixels());
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * l;
    let mut out = vec![T::ZERO; g.batch * out_sz];
    let mut col = vec![T::ZERO; ckk * l];
    for n in 0..g.batch {
        im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut col);
        gemm(
            g.out_channels,
            ckk,
            l,
            T::ONE,
            w,
            Trans::No,
            &col,
            Trans::No,
            T::ZERO,
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    out
}

/// Returns `(dx, dw)` for the given upstream gradient. Either side can be
/// skipped when its input does not need a gradient.
pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ckk, l) = (g.patch_len(), g.out_pixels());
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * l;
    let mut dx = want_dx.then(|| vec![T::ZERO; g.batch * in_sz]);
    let mut dw = want_dw.then(|| vec![T::ZERO; g.out_channels * ckk]);
    let mut col = vec![T::ZERO; ckk * l];
    for n in 0..g.batch {
        let dout_n = &dout[n * out_sz..(n + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[n * in_sz..(n + 1) * in_sz], &mut col);
            gemm(
                g.out_channels,
                l,
                ckk,
                T::ONE,
                dout_n,
                Trans::No,
                &col,
                Trans::Yes,
                T::ONE,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                ckk,
                g.out_channels,
                l,
                T::ONE,
                w,
                Trans::Yes,
                dout_n,
                Trans::No,
                T::ZERO,
                &mut col,
            );
            col2im_add(g, &col, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    (dx, dw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub fn avg_pool_forward<T: Element>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let scale = T::ONE / T::from_usize(g.kernel_h * g.kernel_w);
    let planes = g.batch * g.channels;
    let mut out = vec![T::ZERO; planes * g.out_h * g.out_w];
    for p in 0..planes {
        let src = &x[p * g.in_h * g.in_w..(p + 1) * g.in_h * g.in_w];
        let dst = &mut out[p * g.out_h * g.out_w..(p + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = T::ZERO;
                for ky in 0..g.kernel_h {
                    let row = (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel_w {
                        acc += src[row + kx];
                    }
                }
                dst[oy * g.out_w + ox] = acc * scale;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(g: &PoolGeom, dout: &[T]) -> Vec<T> {
    let scale = T::ONE / T::from_usize(g.kernel_h * g.kernel_w);
    let planes = g.batch * g.channels;
    let mut dx = vec![T::ZERO; planes * g.in_h * g.in_w];
    for p in 0..planes {
        let src = &dout[p * g.out_h * g.out_w..(p + 1) * g.out_h * g.out_w];
        let dst = &mut dx[p * g.in_h * g.in_w..(p + 1) * g.in_h * g.in_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let v = src[oy * g.out_w + ox] * scale;
                for ky in 0..g.kernel_h {
                    let row = (oy * g.stride + ky) * g.in_w + ox * g.stride;
                    for kx in 0..g.kernel_w {
                        dst[row + kx] += v;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_channels * g.out_pixels()];
        for n in 0..g.batch {
            for o in 0..g.out_channels {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for c in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xi = ((n * g.in_channels + c) * g.in_h + iy as usize) * g.in_w
                                        + ix as usize;
                                    let wi = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * g.out_channels + o) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loop() {
        let (h, w, k, s, p) = (5, 6, 3, 2, 1);
        let oh = window_extent(h, k, s, p).unwrap();
        let ow = window_extent(w, k, s, p).unwrap();
        let g = ConvGeom {
            batch: 2,
            in_channels: 3,
            in_h: h,
            in_w: w,
            out_channels: 4,
            kernel_h: k,
            kernel_w: k,
            stride: s,
            padding: p,
            out_h: oh,
            out_w: ow,
        };
        let x: Vec<f64> = (0..2 * 3 * h * w).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let wt: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 31) % 5) as f64 - 2.0).collect();
        assert_eq!(conv2d_forward(&g, &x, &wt), naive_conv(&g, &x, &wt));
    }

    #[test]
    fn window_extent_rejects_oversized_kernels() {
        assert_eq!(window_extent(4, 2, 2, 0), Some(2));
        assert_eq!(window_extent(2, 3, 1, 0), None);
        assert_eq!(window_extent(2, 3, 1, 1), Some(2));
        assert_eq!(window_extent(4, 2, 0, 0), None);
    }
}
