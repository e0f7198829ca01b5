//! Procedurally generated occlusion patches and alpha blending.
//!
//! The bank stands in for a natural-object patch dataset: solid discs,
//! textured rectangles, and glyph-like bar shapes, each with an alpha mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct OcclusionPatch {
    pub patch_id: usize,
    /// h*w grayscale pixels in [0, 1].
    pub pixels: Vec<f64>,
    /// h*w alpha mask in [0, 1].
    pub alpha: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

/// Generate `n` patches with extents up to `max_h` x `max_w`, deterministic
/// per seed. Patches cycle through three families so the bank covers both
/// opaque and semi-transparent occluders.
pub fn gen_patch_bank(n: usize, max_h: usize, max_w: usize, seed: u64) -> Vec<OcclusionPatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let h = rng.gen_range((max_h / 2).max(2)..=max_h);
            let w = rng.gen_range((max_w / 2).max(2)..=max_w);
            let mut pixels = vec![0.0; h * w];
            let mut alpha = vec![0.0; h * w];
            match id % 3 {
                0 => {
                    // Solid disc, fully opaque.
                    let shade = rng.gen_range(0.0..1.0);
                    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
                    let r = cy.min(cx);
                    for y in 0..h {
                        for x in 0..w {
                            let d = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                            if d <= r {
                                pixels[y * w + x] = shade;
                                alpha[y * w + x] = 1.0;
                            }
                        }
                    }
                }
                1 => {
                    // Textured rectangle, fully opaque.
                    for v in pixels.iter_mut() {
                        *v = rng.gen_range(0.0..1.0);
                    }
                    alpha.iter_mut().for_each(|a| *a = 1.0);
                }
                _ => {
                    // Mouth-like cell pattern, opaque: bright/dim vertical
                    // cells resembling a speaking mouth, so occluded frames
                    // carry misleading rather than merely missing shape cues.
                    let cells = 3usize;
                    let pattern = rng.gen_range(1..8usize);
                    let cell_w = (w / cells).max(1);
                    for y in 0..h {
                        for x in 0..w {
                            let cell = (x / cell_w).min(cells - 1);
                            let on = (pattern >> cell) & 1 == 1;
                            pixels[y * w + x] = if on { 0.95 } else { 0.55 };
                            alpha[y * w + x] = 1.0;
                        }
                    }
                }
            }
            OcclusionPatch { patch_id: id, pixels, alpha, h, w }
        })
        .collect()
}

/// Alpha-blend `patch` onto `frame` centered at (cx, cy), clamping the
/// patch rectangle into the frame: out = alpha*patch + (1-alpha)*frame.
pub fn apply_occlusion(frame: &mut [f64], h: usize, w: usize, patch: &OcclusionPatch, cx: f64, cy: f64) -> Result<()> {
    if patch.h > h || patch.w > w {
        return Err(Error::Sizing(format!(
            "patch {}x{} larger than frame {h}x{w}",
            patch.h, patch.w
        )));
    }
    let x0 = ((cx - patch.w as f64 / 2.0).round() as isize).clamp(0, (w - patch.w) as isize) as usize;
    let y0 = ((cy - patch.h as f64 / 2.0).round() as isize).clamp(0, (h - patch.h) as isize) as usize;
    for py in 0..patch.h {
        for px in 0..patch.w {
            let a = patch.alpha[py * patch.w + px];
            let p = patch.pixels[py * patch.w + px];
            let f = &mut frame[(y0 + py) * w + (x0 + px)];
            *f = (a * p + (1.0 - a) * *f).clamp(0.0, 1.0);
        }
    }
    Ok(())
}
