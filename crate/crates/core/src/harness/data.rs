//! Procedural image generation and trigger-set construction.

use std::f64::consts::TAU;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::rng::stream;
use crate::watermark::{BitMessage, TriggerSample, TriggerSet};

/// Side length of a square image with `s` pixels.
pub fn image_side(s: usize) -> Result<usize> {
    let side = (s as f64).sqrt().round() as usize;
    if side == 0 || side * side != s {
        return Err(invalid(format!("image size {s} is not a perfect square")));
    }
    Ok(side)
}

fn render<R: Rng + ?Sized>(side: usize, rng: &mut R) -> Vec<f64> {
    let gratings: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.2..1.0),
            ]
        })
        .collect();
    let blobs: Vec<[f64; 4]> = (0..2)
        .map(|_| {
            [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..0.3),
                rng.random_range(-1.5..1.5),
            ]
        })
        .collect();
    let inv = 1.0 / side as f64;
    let mut img: Vec<f64> = (0..side * side)
        .map(|p| {
            let (u, v) = ((p % side) as f64 * inv, (p / side) as f64 * inv);
            let waves: f64 = gratings
                .iter()
                .map(|&[fx, fy, ph, a]| a * (TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            let spots: f64 = blobs
                .iter()
                .map(|&[cx, cy, w, a]| {
                    let r2 = (u - cx).powi(2) + (v - cy).powi(2);
                    a * (-r2 / (2.0 * w * w)).exp()
                })
                .sum();
            waves + spots + rng.random_range(-0.1..0.1)
        })
        .collect();
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    img.iter_mut().for_each(|v| *v = (*v - lo) / span);
    img
}

/// `count` procedural `sqrt(s) x sqrt(s)` textures with pixels in [0,1].
///
/// Image `i` depends only on `(seed, i)`, so prefixes of larger sets agree.
pub fn gen_synthetic_images(count: usize, s: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let side = image_side(s)?;
    Ok((0..count)
        .map(|i| render(side, &mut stream(seed, &[0x1A6E, i as u64])))
        .collect())
}

pub fn pixel_std(image: &[f64]) -> f64 {
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    (image.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Assigns each image a uniform random message and `sigma = sigma_scale * std(x)`.
pub fn build_trigger_set(
    images: Vec<Vec<f64>>,
    n: usize,
    sigma_scale: f64,
    seed: u64,
) -> Result<TriggerSet> {
    if !(sigma_scale > 0.0 && sigma_scale.is_finite()) {
        return Err(invalid(format!(
            "sigma scale must be positive, got {sigma_scale}"
        )));
    }
    let mut rng = stream(seed, &[0x7216]);
    let samples = images
        .into_iter()
        .map(|img| {
            let message = BitMessage::random(n, &mut rng)?;
            let sigma = sigma_scale * pixel_std(&img);
            TriggerSample::new(img, message, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    TriggerSet::new(samples, seed)
}
