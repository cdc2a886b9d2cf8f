//! Procedural 28x28 grayscale digits.
//!
//! Each image renders one glyph of a 5x7 bitmap font through a random
//! affine map (scale, rotation, shear, offset) with random stroke weight and
//! contrast, then adds Gaussian pixel noise. Image `i` of a set depends only
//! on `(seed, i)`.

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

pub const SIDE: usize = 28;
pub const CLASSES: usize = 10;

const NOISE: f64 = 0.3;
const CLUTTER: usize = 2;

const FONT: [[&str; 7]; 10] = [
    ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Digits {
    /// `(count, 1, 28, 28)` intensities in `[0, 1]`.
    pub images: Array4<f32>,
    pub labels: Vec<u8>,
}

impl Digits {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `count` images.
    pub fn take(&self, count: usize) -> Digits {
        let count = count.min(self.len());
        Digits {
            images: self.images.slice_axis(Axis(0), (0..count).into()).to_owned(),
            labels: self.labels[..count].to_vec(),
        }
    }
}

fn cells(class: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for (row, line) in FONT[class].iter().enumerate() {
        for (col, c) in line.bytes().enumerate() {
            if c == b'1' {
                out.push((col as f64, row as f64));
            }
        }
    }
    out
}

fn render(class: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = rng.random_range(2.2..3.5);
    let aspect = rng.random_range(0.8..1.2);
    let theta: f64 = rng.random_range(-0.45..0.45);
    let shear = rng.random_range(-0.5..0.5);
    let (tx, ty) = (rng.random_range(-3.5..3.5), rng.random_range(-3.5..3.5));
    let thick = rng.random_range(-0.25..0.2);
    let contrast = rng.random_range(0.45..1.0);
    let noise = Normal::new(0.0, NOISE).expect("valid deviation");
    // Clutter: short random strokes, drawn as capsules in pixel space.
    let strokes: Vec<[f64; 5]> = (0..rng.random_range(0..=CLUTTER))
        .map(|_| {
            let (x0, y0) = (rng.random_range(0.0..SIDE as f64), rng.random_range(0.0..SIDE as f64));
            let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let len = rng.random_range(3.0..9.0);
            [
                x0,
                y0,
                x0 + len * ang.cos(),
                y0 + len * ang.sin(),
                rng.random_range(0.3..0.8),
            ]
        })
        .collect();

    // Forward map: glyph (u, v) -> pixel; invert a 2x2 matrix per image.
    let (sx, sy) = (scale, scale * aspect);
    let (c, s) = (theta.cos(), theta.sin());
    let a = [[c * sx, (c * shear - s) * sy], [s * sx, (s * shear + c) * sy]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let glyph = cells(class);
    let half = 0.5 + thick;

    let mut img = vec![0f32; SIDE * SIDE];
    for py in 0..SIDE {
        for px in 0..SIDE {
            let dx = px as f64 + 0.5 - SIDE as f64 / 2.0 - tx;
            let dy = py as f64 + 0.5 - SIDE as f64 / 2.0 - ty;
            let u = inv[0][0] * dx + inv[0][1] * dy + 2.5;
            let v = inv[1][0] * dx + inv[1][1] * dy + 3.5;
            let mut best = f64::INFINITY;
            for &(cu, cv) in &glyph {
                let du = ((u - cu - 0.5).abs() - half).max(0.0);
                let dv = ((v - cv - 0.5).abs() - half).max(0.0);
                best = best.min((du * du + dv * dv).sqrt());
            }
            // Soft edge about 1/3 glyph unit wide.
            let mut ink = (1.0 - best * 3.0).clamp(0.0, 1.0) * contrast;
            for &[x0, y0, x1, y1, level] in &strokes {
                let d = segment_distance(px as f64 + 0.5, py as f64 + 0.5, x0, y0, x1, y1);
                ink = ink.max((1.2 - d).clamp(0.0, 1.0) * level);
            }
            let x: f64 = ink + noise.sample(rng);
            img[py * SIDE + px] = x.clamp(0.0, 1.0) as f32;
        }
    }
    img
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let t = (((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (px - x0 - t * dx).hypot(py - y0 - t * dy)
}

/// `count` labeled images; classes are drawn uniformly.
pub fn generate(count: usize, seed: u64) -> Digits {
    let rendered: Vec<(u8, Vec<f32>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17));
            let class = rng.random_range(0..CLASSES);
            (class as u8, render(class, &mut rng))
        })
        .collect();
    let mut images = Array4::zeros((count, 1, SIDE, SIDE));
    let mut labels = Vec::with_capacity(count);
    for (i, (label, img)) in rendered.into_iter().enumerate() {
        labels.push(label);
        for (k, v) in img.into_iter().enumerate() {
            images[[i, 0, k / SIDE, k % SIDE]] = v;
        }
    }
    Digits { images, labels }
}

/// Seed of the held-out split derived from a user seed.
pub fn test_seed(seed: u64) -> u64 {
    seed ^ 0x7E57_7E57_7E57_7E57
}
