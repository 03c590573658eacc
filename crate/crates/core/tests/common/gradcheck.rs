//! Finite-difference oracle for tape gradients.
//!
//! Every case draws small random tensors (values exactly representable in
//! f32), evaluates a loss through the tape, and compares value and gradients
//! against a naive f64 re-implementation of the same loss differentiated by
//! central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ticketlab::{Element, Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    MatMul,
    Add,
    AddBias,
    Mul,
    Relu,
    Sum,
    Flatten,
    Conv2d,
    AvgPool,
    GlobalAvgPool,
    BatchNormTrain,
    BatchNormEval,
    SoftmaxCrossEntropy,
}

pub const FAMILIES: [Family; 13] = [
    Family::MatMul,
    Family::Add,
    Family::AddBias,
    Family::Mul,
    Family::Relu,
    Family::Sum,
    Family::Flatten,
    Family::Conv2d,
    Family::AvgPool,
    Family::GlobalAvgPool,
    Family::BatchNormTrain,
    Family::BatchNormEval,
    Family::SoftmaxCrossEntropy,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::MatMul => "matmul",
            Family::Add => "add",
            Family::AddBias => "add_bias",
            Family::Mul => "mul",
            Family::Relu => "relu",
            Family::Sum => "sum",
            Family::Flatten => "reshape/flatten",
            Family::Conv2d => "conv2d",
            Family::AvgPool => "avg_pool2d",
            Family::GlobalAvgPool => "global_avg_pool",
            Family::BatchNormTrain => "batch_norm (batch stats)",
            Family::BatchNormEval => "batch_norm (running stats)",
            Family::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Case {
    pub family: Family,
    pub shapes: Vec<Vec<usize>>,
    pub inputs: Vec<Vec<f64>>,
    /// Upstream weights `r` in `loss = sum(op(..) * r)`.
    pub weight: Vec<f64>,
    pub weight_shape: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub kernel: usize,
    pub labels: Vec<usize>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect()
}

fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05f32..1.0) as f64;
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn pick(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn numel(s: &[usize]) -> usize {
    s.iter().product()
}

pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

pub fn gen_case(family: Family, rng: &mut ChaCha8Rng) -> Case {
    let mut case = Case {
        family,
        shapes: Vec::new(),
        inputs: Vec::new(),
        weight: Vec::new(),
        weight_shape: Vec::new(),
        stride: 1,
        padding: 0,
        kernel: 1,
        labels: Vec::new(),
        running_mean: Vec::new(),
        running_var: Vec::new(),
    };
    let out_shape: Vec<usize>;
    match family {
        Family::MatMul => {
            let (m, k, n) = (pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 5));
            case.shapes = vec![vec![m, k], vec![k, n]];
            out_shape = vec![m, n];
        }
        Family::Add | Family::Mul => {
            let rank = pick(rng, 1, 3);
            let s: Vec<usize> = (0..rank).map(|_| pick(rng, 1, 4)).collect();
            case.shapes = vec![s.clone(), s.clone()];
            out_shape = s;
        }
        Family::AddBias => {
            let (b, n) = (pick(rng, 1, 4), pick(rng, 1, 5));
            case.shapes = vec![vec![b, n], vec![n]];
            out_shape = vec![b, n];
        }
        Family::Relu | Family::Sum => {
            let s = vec![pick(rng, 1, 4), pick(rng, 1, 5)];
            case.shapes = vec![s.clone()];
            out_shape = if family == Family::Sum { vec![1] } else { s };
        }
        Family::Flatten => {
            let s = vec![pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)];
            out_shape = vec![s[0], s[1] * s[2] * s[3]];
            case.shapes = vec![s];
        }
        Family::Conv2d => {
            let (n, c, o) = (pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3));
            let k = pick(rng, 1, 3);
            let (stride, padding) = (pick(rng, 1, 2), pick(rng, 0, 1));
            let h = pick(rng, k.max(2), 6);
            let w = pick(rng, k.max(2), 6);
            case.stride = stride;
            case.padding = padding;
            case.kernel = k;
            case.shapes = vec![vec![n, c, h, w], vec![o, c, k, k]];
            out_shape = vec![n, o, out_extent(h, k, stride, padding), out_extent(w, k, stride, padding)];
        }
        Family::AvgPool => {
            let (n, c, k, stride) = (pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 2));
            let (h, w) = (pick(rng, k, 6), pick(rng, k, 6));
            case.kernel = k;
            case.stride = stride;
            case.shapes = vec![vec![n, c, h, w]];
            out_shape = vec![n, c, out_extent(h, k, stride, 0), out_extent(w, k, stride, 0)];
        }
        Family::GlobalAvgPool => {
            let (n, c, h, w) = (pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 5), pick(rng, 1, 5));
            case.shapes = vec![vec![n, c, h, w]];
            out_shape = vec![n, c, 1, 1];
        }
        Family::BatchNormTrain | Family::BatchNormEval => {
            // With two samples per channel the normalized output is +-1 whatever
            // the inputs, so its gradient is pure rounding noise.
            let (n, c) = (pick(rng, 3, 5), pick(rng, 1, 3));
            let x = if rng.random_bool(0.5) { vec![n, c] } else { vec![n, c, pick(rng, 1, 3), pick(rng, 1, 3)] };
            out_shape = x.clone();
            case.shapes = vec![x, vec![c], vec![c]];
            if family == Family::BatchNormEval {
                case.running_mean = draw(rng, c);
                case.running_var = (0..c).map(|_| rng.random_range(0.2f32..2.0) as f64).collect();
            }
        }
        Family::SoftmaxCrossEntropy => {
            let (b, k) = (pick(rng, 1, 5), pick(rng, 2, 6));
            case.shapes = vec![vec![b, k]];
            case.labels = (0..b).map(|_| rng.random_range(0..k)).collect();
            out_shape = vec![1];
        }
    }
    case.inputs = case
        .shapes
        .iter()
        .map(|s| {
            if family == Family::Relu {
                away_from_zero(rng, numel(s))
            } else {
                draw(rng, numel(s))
            }
        })
        .collect();
    if family == Family::BatchNormTrain {
        // A per-channel spread keeps the batch variance well away from zero.
        let x = &mut case.inputs[0];
        for (i, v) in x.iter_mut().enumerate() {
            *v = (*v * 1.5 + if i % 2 == 0 { 0.5 } else { -0.5 }) as f32 as f64;
        }
    }
    case.weight = draw(rng, numel(&out_shape));
    case.weight_shape = out_shape;
    case
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

fn conv(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, k) = (ws[0], ws[2]);
    let (oh, ow) = (out_extent(h, k, stride, pad), out_extent(wd, k, stride, pad));
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w[((oc * c + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn pool(x: &[f64], xs: &[usize], kh: usize, kw: usize, stride: usize) -> Vec<f64> {
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for dy in 0..kh {
                    for dx in 0..kw {
                        acc += x[plane * h * w + (y * stride + dy) * w + xo * stride + dx];
                    }
                }
                out.push(acc / (kh * kw) as f64);
            }
        }
    }
    out
}

fn batch_norm(x: &[f64], xs: &[usize], gamma: &[f64], beta: &[f64], stats: Option<(&[f64], &[f64])>) -> Vec<f64> {
    let (n, c) = (xs[0], xs[1]);
    let hw: usize = xs[2..].iter().product();
    let at = |b: usize, ch: usize, i: usize| (b * c + ch) * hw + i;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let (mean, var) = match stats {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let vals: Vec<f64> = (0..n).flat_map(|b| (0..hw).map(move |i| (b, i))).map(|(b, i)| x[at(b, ch, i)]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            }
        };
        let inv = 1.0 / (var + BN_EPS).sqrt();
        for b in 0..n {
            for i in 0..hw {
                let j = at(b, ch, i);
                out[j] = gamma[ch] * (x[j] - mean) * inv + beta[ch];
            }
        }
    }
    out
}

/// Naive f64 evaluation of the case's loss at `inputs`.
pub fn reference_loss(case: &Case, inputs: &[Vec<f64>]) -> f64 {
    let s = &case.shapes;
    let weighted = |y: Vec<f64>| y.iter().zip(&case.weight).map(|(a, b)| a * b).sum::<f64>();
    match case.family {
        Family::MatMul => weighted(matmul(&inputs[0], &inputs[1], s[0][0], s[0][1], s[1][1])),
        Family::Add => weighted(inputs[0].iter().zip(&inputs[1]).map(|(a, b)| a + b).collect()),
        Family::Mul => weighted(inputs[0].iter().zip(&inputs[1]).map(|(a, b)| a * b).collect()),
        Family::AddBias => {
            let n = s[1][0];
            weighted(inputs[0].iter().enumerate().map(|(i, v)| v + inputs[1][i % n]).collect())
        }
        Family::Relu => weighted(inputs[0].iter().map(|v| v.max(0.0)).collect()),
        Family::Sum => inputs[0].iter().sum::<f64>() * case.weight[0],
        Family::Flatten => weighted(inputs[0].clone()),
        Family::Conv2d => weighted(conv(&inputs[0], &s[0], &inputs[1], &s[1], case.stride, case.padding)),
        Family::AvgPool => weighted(pool(&inputs[0], &s[0], case.kernel, case.kernel, case.stride)),
        Family::GlobalAvgPool => weighted(pool(&inputs[0], &s[0], s[0][2], s[0][3], 1)),
        Family::BatchNormTrain => weighted(batch_norm(&inputs[0], &s[0], &inputs[1], &inputs[2], None)),
        Family::BatchNormEval => weighted(batch_norm(
            &inputs[0],
            &s[0],
            &inputs[1],
            &inputs[2],
            Some((&case.running_mean, &case.running_var)),
        )),
        Family::SoftmaxCrossEntropy => {
            let k = s[0][1];
            let rows = inputs[0].chunks(k);
            let total: f64 = rows
                .zip(&case.labels)
                .map(|(row, &y)| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - row[y]
                })
                .sum();
            total / case.labels.len() as f64
        }
    }
}

/// Five-point central differences of [`reference_loss`] with respect to
/// every input.
pub fn numeric_grads(case: &Case) -> Vec<Vec<f64>> {
    let mut inputs = case.inputs.clone();
    let mut grads = Vec::new();
    for t in 0..inputs.len() {
        let mut g = vec![0.0; inputs[t].len()];
        for i in 0..inputs[t].len() {
            let x0 = inputs[t][i];
            let h = 1e-3 * x0.abs().max(1.0);
            let mut at = |dx: f64| {
                inputs[t][i] = x0 + dx;
                reference_loss(case, &inputs)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            inputs[t][i] = x0;
            g[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Loss value and input gradients computed by the tape in precision `T`.
pub fn tape_grads<T: Element>(case: &Case) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<T>::new();
    let leaves: Vec<_> = case
        .shapes
        .iter()
        .zip(&case.inputs)
        .map(|(s, v)| tape.variable(Tensor::new(s.clone(), v.iter().map(|&x| T::from_f64(x)).collect()).unwrap()))
        .collect();
    let y = match case.family {
        Family::MatMul => tape.matmul(leaves[0], leaves[1]),
        Family::Add => tape.add(leaves[0], leaves[1]),
        Family::Mul => tape.mul(leaves[0], leaves[1]),
        Family::AddBias => tape.add_bias(leaves[0], leaves[1]),
        Family::Relu => tape.relu(leaves[0]),
        Family::Sum => tape.sum(leaves[0]),
        Family::Flatten => tape.flatten(leaves[0]),
        Family::Conv2d => tape.conv2d(leaves[0], leaves[1], case.stride, case.padding),
        Family::AvgPool => tape.avg_pool2d(leaves[0], case.kernel, case.stride),
        Family::GlobalAvgPool => tape.global_avg_pool(leaves[0]),
        Family::BatchNormTrain => tape
            .batch_norm_train(leaves[0], leaves[1], leaves[2], T::from_f64(BN_EPS))
            .map(|(v, _)| v),
        Family::BatchNormEval => {
            let cast = |v: &[f64]| v.iter().map(|&x| T::from_f64(x)).collect::<Vec<T>>();
            tape.batch_norm_eval(
                leaves[0],
                leaves[1],
                leaves[2],
                &cast(&case.running_mean),
                &cast(&case.running_var),
                T::from_f64(BN_EPS),
            )
        }
        Family::SoftmaxCrossEntropy => tape.softmax_cross_entropy(leaves[0], &case.labels),
    }
    .expect("op accepts generated shapes");
    let loss = if case.family == Family::SoftmaxCrossEntropy {
        y
    } else {
        let r = tape.constant(
            Tensor::new(case.weight_shape.clone(), case.weight.iter().map(|&x| T::from_f64(x)).collect()).unwrap(),
        );
        let yr = tape.mul(y, r).expect("weight has output shape");
        tape.sum(yr).unwrap()
    };
    let value = tape.value(loss).data()[0].to_f64();
    let grads = tape.backward(loss).unwrap();
    let g = leaves
        .iter()
        .map(|&l| grads.get(l).expect("every input reaches the loss").data().iter().map(|v| v.to_f64()).collect())
        .collect();
    (value, g)
}

/// `max|a - b| / max(max|b|, 1e-12)`.
pub fn normwise_rel(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyResult {
    pub family: Family,
    pub cases: usize,
    /// Worst relative error of the f32 tape, loss value and gradients.
    pub worst_f32: f64,
    pub worst_f64: f64,
}

pub fn check_family(family: Family, cases: usize, seed: u64) -> FamilyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (family as u64) << 32);
    let mut worst_f32: f64 = 0.0;
    let mut worst_f64: f64 = 0.0;
    for _ in 0..cases {
        let case = gen_case(family, &mut rng);
        let reference = reference_loss(&case, &case.inputs);
        let numeric = numeric_grads(&case);
        for (worst, (value, grads)) in [(&mut worst_f32, tape_grads::<f32>(&case)), (&mut worst_f64, tape_grads::<f64>(&case))] {
            *worst = worst.max(normwise_rel(&[value], &[reference]));
            for (a, n) in grads.iter().zip(&numeric) {
                *worst = worst.max(normwise_rel(a, n));
            }
        }
    }
    FamilyResult {
        family,
        cases,
        worst_f32,
        worst_f64,
    }
}
