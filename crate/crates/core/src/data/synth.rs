//! Procedural stand-in datasets.
//!
//! `NaturalProxy` draws a coloured shape over a dark background, optionally
//! with a smaller distractor; the class fixes the shape and hue family.
//! `TextureProxy` draws low-saturation oriented gratings; the class fixes
//! orientation and spatial frequency. The two differ strongly in channel
//! statistics, which is the point of pairing them.

use std::f32::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, DatasetSplit, Part};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthKind {
    NaturalProxy,
    TextureProxy,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::NaturalProxy => "natural-proxy",
            SynthKind::TextureProxy => "texture-proxy",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "natural-proxy" | "natural" => Ok(SynthKind::NaturalProxy),
            "texture-proxy" | "texture" => Ok(SynthKind::TextureProxy),
            other => Err(format!("unknown synthetic kind {other:?} (natural-proxy | texture-proxy)")),
        }
    }
}

const CHANNELS: usize = 3;
const SHAPES: usize = 5;

/// Generates `per_class` samples per class and splits each class 80/10/10
/// into train/validation/test. Identical arguments give identical bytes.
pub fn make_synthetic(
    kind: SynthKind,
    classes: usize,
    per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if classes < 2 {
        return Err(DataError::Invalid(format!("need at least 2 classes, got {classes}")));
    }
    if per_class < 3 {
        return Err(DataError::Invalid(format!(
            "need at least 3 samples per class to fill three splits, got {per_class}"
        )));
    }
    if image_size < 4 {
        return Err(DataError::Invalid(format!("image size must be at least 4, got {image_size}")));
    }
    let n_val = ((per_class as f64 * 0.1).round() as usize).max(1);
    let n_test = n_val;
    let n_train = per_class - n_val - n_test;
    if n_train == 0 {
        return Err(DataError::Invalid("no training samples left after split".into()));
    }

    let sample_len = CHANNELS * image_size * image_size;
    let mut parts = [Part::default(), Part::default(), Part::default()];
    let mut img = vec![0f32; sample_len];
    for class in 0..classes {
        for i in 0..per_class {
            let mut rng = seed::stream(seed, &format!("{kind}/{class}/{i}"));
            match kind {
                SynthKind::NaturalProxy => natural_sample(&mut rng, class, image_size, &mut img),
                SynthKind::TextureProxy => texture_sample(&mut rng, class, classes, image_size, &mut img),
            }
            let which = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[which].push(&img, class as u32);
        }
    }
    let [train, validation, test] = parts.map(|p| {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.shuffle(&mut seed::stream(seed, &format!("{kind}/order/{}", p.len())));
        p.select(&order, sample_len)
    });
    DatasetSplit::new(
        kind.name(),
        classes,
        vec![CHANNELS, image_size, image_size],
        train,
        validation,
        test,
    )
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Whether the offset `(dx, dy)`, in units of the shape radius, is inside shape `shape`.
fn inside(shape: usize, dx: f32, dy: f32) -> bool {
    let d = (dx * dx + dy * dy).sqrt();
    match shape {
        0 => d <= 1.0,
        1 => dx.abs().max(dy.abs()) <= 0.8,
        2 => (-1.0..=0.8).contains(&dy) && dx.abs() <= (dy + 1.0) * 0.5,
        3 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
        _ => (0.55..=1.0).contains(&d),
    }
}

fn stamp(img: &mut [f32], size: usize, shape: usize, cx: f32, cy: f32, r: f32, color: [f32; 3]) {
    let plane = size * size;
    // 2x2 supersampling for soft edges
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0;
            for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let dx = (x as f32 + sx - cx) / r;
                let dy = (y as f32 + sy - cy) / r;
                if inside(shape, dx, dy) {
                    cover += 0.25;
                }
            }
            if cover > 0.0 {
                for c in 0..CHANNELS {
                    let p = &mut img[c * plane + y * size + x];
                    *p = *p * (1.0 - cover) + color[c] * cover;
                }
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f32 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn natural_sample(rng: &mut ChaCha8Rng, class: usize, size: usize, img: &mut [f32]) {
    let plane = size * size;
    let s = size as f32;
    let base: [f32; 3] = [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
    let tilt: f32 = rng.random_range(-0.15..0.15);
    for c in 0..CHANNELS {
        for y in 0..size {
            let v = base[c] + tilt * (y as f32 / s - 0.5);
            img[c * plane + y * size..c * plane + (y + 1) * size].fill(v);
        }
    }

    let shape = class % SHAPES;
    let group = class / SHAPES;
    let hue = 0.03 + group as f32 * 0.618 + rng.random_range(-0.05..0.05);
    let color = hsv_to_rgb(hue, rng.random_range(0.55..1.0), rng.random_range(0.6..1.0));
    let r = s * rng.random_range(0.24..0.38);
    let cx = s * 0.5 + rng.random_range(-0.18..0.18) * s;
    let cy = s * 0.5 + rng.random_range(-0.18..0.18) * s;

    if rng.random_bool(0.5) {
        let dshape = rng.random_range(0..SHAPES);
        let dcolor = hsv_to_rgb(rng.random(), rng.random_range(0.3..1.0), rng.random_range(0.4..1.0));
        let dr = s * rng.random_range(0.10..0.18);
        let dx = rng.random_range(0.0..s);
        let dy = rng.random_range(0.0..s);
        stamp(img, size, dshape, dx, dy, dr, dcolor);
        stamp(img, size, shape, cx, cy, r, color);
    } else {
        stamp(img, size, shape, cx, cy, r, color);
    }

    for v in img.iter_mut() {
        *v = (*v + 0.08 * gaussian(rng)).clamp(0.0, 1.0);
    }
}

fn texture_sample(rng: &mut ChaCha8Rng, class: usize, classes: usize, size: usize, img: &mut [f32]) {
    let plane = size * size;
    let s = size as f32;
    let step = PI / classes as f32;
    let theta = class as f32 * step + rng.random_range(-0.35..0.35) * step;
    let cycles = 1.0 + 0.75 * (class % 3) as f32 + rng.random_range(-0.15..0.15);
    let freq = 2.0 * PI * cycles / s;
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let nuisance_theta: f32 = rng.random_range(0.0..PI);
    let nuisance_freq = 2.0 * PI * rng.random_range(0.5..3.0) / s;
    let nuisance_phase: f32 = rng.random_range(0.0..2.0 * PI);
    let amp = rng.random_range(0.12..0.25);
    let tint: [f32; 3] = [
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
        rng.random_range(0.9..1.1),
    ];
    let (ct, st) = (theta.cos(), theta.sin());
    let (cn, sn) = (nuisance_theta.cos(), nuisance_theta.sin());
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f32, y as f32);
            let g = (freq * (xf * ct + yf * st) + phase).sin();
            let n = (nuisance_freq * (xf * cn + yf * sn) + nuisance_phase).sin();
            let v = 0.5 + amp * g + 0.15 * n;
            for c in 0..CHANNELS {
                img[c * plane + y * size + x] = v * tint[c];
            }
        }
    }
    for v in img.iter_mut() {
        *v = (*v + 0.12 * gaussian(rng)).clamp(0.0, 1.0);
    }
}
