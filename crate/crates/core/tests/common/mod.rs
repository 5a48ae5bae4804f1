#![allow(dead_code)]

use fnf_core::LinearImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(seed: u64, h: usize, w: usize, lo: f32, hi: f32) -> LinearImage {
    let mut r = rng(seed);
    LinearImage::from_fn(h, w, |_, _, _| r.random_range(lo..hi))
}

/// Sum of a few low-frequency sinusoids, values inside `[0.1, 0.9]`.
pub fn smooth_image(seed: u64, h: usize, w: usize) -> LinearImage {
    let mut r = rng(seed);
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| {
            [
                r.random_range(0.02..0.08),
                r.random_range(0.02..0.08),
                r.random_range(0.0..6.28),
                r.random_range(0.02..0.1),
            ]
        })
        .collect();
    LinearImage::from_fn(h, w, |c, y, x| {
        let mut v = 0.5;
        for [fy, fx, ph, amp] in &waves[c * 3..c * 3 + 3] {
            v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
        }
        v as f32
    })
}

pub fn max_abs_diff(a: &LinearImage, b: &LinearImage) -> f32 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max)
}
