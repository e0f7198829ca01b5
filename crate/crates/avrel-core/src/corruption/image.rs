//! Per-frame image corruption: separable Gaussian blur and additive
//! clamped Gaussian pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const KERNEL_SIZE: usize = 7;

fn gaussian_kernel(sigma: f64) -> [f64; KERNEL_SIZE] {
    let mut k = [0.0; KERNEL_SIZE];
    let c = (KERNEL_SIZE / 2) as isize;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as isize - c;
        *v = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // Symmetric reflection; frame extents always exceed the kernel radius.
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i as usize
}

/// Separable 7-tap Gaussian blur with reflected borders; the kernel is
/// normalized to sum 1, so constant images are preserved exactly.
pub fn gaussian_blur(frame: &[f64], h: usize, w: usize, sigma: f64) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
    }
    if frame.len() != h * w {
        return Err(Error::Sizing(format!("frame of {} values for {h}x{w}", frame.len())));
    }
    let k = gaussian_kernel(sigma);
    let c = (KERNEL_SIZE / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    // Horizontal pass
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in k.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - c, w);
                acc += kv * frame[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, kv) in k.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - c, h);
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    Ok(out)
}

/// The i.i.d. Gaussian noise field added by [`add_pixel_noise`], before
/// clamping. Deterministic per seed.
pub fn gaussian_noise_field(len: usize, variance: f64, seed: u64) -> Result<Vec<f64>> {
    if variance <= 0.0 {
        return Err(Error::Config(format!("noise variance must be positive, got {variance}")));
    }
    let sigma = variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect())
}

/// Additive i.i.d. Gaussian noise with the given variance, clamped to
/// [0, 1]. Deterministic per seed.
pub fn add_pixel_noise(frame: &[f64], variance: f64, seed: u64) -> Result<Vec<f64>> {
    let noise = gaussian_noise_field(frame.len(), variance, seed)?;
    Ok(frame
        .iter()
        .zip(&noise)
        .map(|(&p, &n)| (p + n).clamp(0.0, 1.0))
        .collect())
}
