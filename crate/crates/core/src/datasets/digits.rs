//! Procedural handwritten-style digits, a seeded offline stand-in for MNIST.
//!
//! Each class is a fixed set of strokes in a unit box. Every sample jitters
//! the control points, applies a random affine map and stroke width, then
//! rasterizes the distance field with one pixel of antialiasing.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{invalid, Result};
use crate::patchwork::ImageTensor;

pub const DIGIT_SIZE: usize = 28;
const BOX: f32 = 20.0;
const MARGIN: f32 = 4.0;

type Stroke = Vec<(f32, f32)>;

fn ellipse(cx: f32, cy: f32, rx: f32, ry: f32, from: f32, to: f32, steps: usize) -> Stroke {
    (0..=steps)
        .map(|i| {
            let t = (from + (to - from) * i as f32 / steps as f32) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn strokes(digit: usize) -> Vec<Stroke> {
    let poly = |pts: &[(f32, f32)]| pts.to_vec();
    match digit {
        0 => vec![ellipse(0.5, 0.5, 0.28, 0.42, 0.0, 360.0, 24)],
        1 => vec![poly(&[(0.52, 0.08), (0.52, 0.92)]), poly(&[(0.34, 0.24), (0.52, 0.08)])],
        2 => vec![poly(&[
            (0.25, 0.3), (0.3, 0.15), (0.5, 0.08), (0.7, 0.15), (0.75, 0.3),
            (0.68, 0.47), (0.25, 0.92), (0.8, 0.92),
        ])],
        3 => vec![poly(&[
            (0.25, 0.13), (0.5, 0.08), (0.72, 0.18), (0.72, 0.35), (0.48, 0.48),
            (0.72, 0.6), (0.75, 0.78), (0.55, 0.92), (0.25, 0.87),
        ])],
        4 => vec![poly(&[(0.66, 0.92), (0.66, 0.08), (0.2, 0.64), (0.82, 0.64)])],
        5 => vec![poly(&[
            (0.76, 0.08), (0.32, 0.08), (0.28, 0.45), (0.5, 0.4), (0.72, 0.5),
            (0.75, 0.72), (0.6, 0.9), (0.25, 0.87),
        ])],
        6 => vec![poly(&[
            (0.7, 0.1), (0.45, 0.2), (0.3, 0.45), (0.28, 0.7), (0.4, 0.9), (0.6, 0.9),
            (0.72, 0.72), (0.62, 0.55), (0.42, 0.52), (0.29, 0.64),
        ])],
        7 => vec![poly(&[(0.22, 0.08), (0.8, 0.08), (0.45, 0.92)])],
        8 => vec![ellipse(0.5, 0.28, 0.2, 0.2, 0.0, 360.0, 18), ellipse(0.5, 0.7, 0.25, 0.22, 0.0, 360.0, 18)],
        _ => vec![ellipse(0.5, 0.32, 0.22, 0.22, 0.0, 360.0, 18), poly(&[(0.72, 0.32), (0.62, 0.92)])],
    }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (ex, ey) = (p.0 - a.0 - t * dx, p.1 - a.1 - t * dy);
    (ex * ex + ey * ey).sqrt()
}

/// Render one 28×28 single-channel sample of `digit` (0..10).
pub fn render_digit(digit: usize, rng: &mut impl Rng) -> Result<ImageTensor> {
    if digit > 9 {
        return invalid(format!("digit {} outside 0..10", digit));
    }
    let jitter = 0.03;
    let shapes: Vec<Stroke> = strokes(digit)
        .into_iter()
        .map(|s| s.into_iter().map(|(x, y)| (x + rng.gen_range(-jitter..jitter), y + rng.gen_range(-jitter..jitter))).collect())
        .collect();
    let angle = rng.gen_range(-15.0f32..15.0).to_radians();
    let scale = rng.gen_range(0.8f32..1.05);
    let shear = rng.gen_range(-0.2f32..0.2);
    let (tx, ty) = (rng.gen_range(-0.08f32..0.08), rng.gen_range(-0.08f32..0.08));
    let half_width = rng.gen_range(0.045f32..0.09);
    let peak = rng.gen_range(0.85f32..1.0);
    // Forward map: q = R·S·H·(p − c)·scale + c + t; invert it per pixel.
    let (cos, sin) = (angle.cos(), angle.sin());
    let fwd = [
        [scale * cos, scale * (cos * shear - sin)],
        [scale * sin, scale * (sin * shear + cos)],
    ];
    let det = fwd[0][0] * fwd[1][1] - fwd[0][1] * fwd[1][0];
    let inv = [[fwd[1][1] / det, -fwd[0][1] / det], [-fwd[1][0] / det, fwd[0][0] / det]];
    let aa = 1.0 / BOX;
    let mut data = vec![0.0f32; DIGIT_SIZE * DIGIT_SIZE];
    for py in 0..DIGIT_SIZE {
        for px in 0..DIGIT_SIZE {
            let qx = (px as f32 + 0.5 - MARGIN) / BOX - 0.5 - tx;
            let qy = (py as f32 + 0.5 - MARGIN) / BOX - 0.5 - ty;
            let p = (inv[0][0] * qx + inv[0][1] * qy + 0.5, inv[1][0] * qx + inv[1][1] * qy + 0.5);
            let d = shapes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f32::INFINITY, f32::min);
            // The distance is in glyph units; scale it back to image units.
            let v = 1.0 - ((d - half_width) * scale / aa).clamp(0.0, 1.0);
            data[py * DIGIT_SIZE + px] = v * peak;
        }
    }
    ImageTensor::new(1, DIGIT_SIZE, DIGIT_SIZE, data)
}

/// `count` digits with uniformly drawn labels, fully determined by `seed`.
pub fn synth_digits(count: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let y = rng.gen_range(0..10);
        images.push(render_digit(y, &mut rng)?);
        labels.push(y);
    }
    Dataset::new("digits", 0, images, labels, 10)
}
