//! Patch tokenization and sinusoidal timestep embeddings.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `[C, g, g]` latent → `(g/p)²` raster-ordered tokens of length `C·p·p`,
/// each token laid out as `(c, dy, dx)`.
pub fn patchify<F: Scalar>(
    latent: &[F],
    channels: usize,
    grid: usize,
    patch: usize,
) -> Result<Vec<F>> {
    if patch == 0 || grid % patch != 0 {
        return Err(Error::Shape(format!(
            "grid {grid} not divisible by patch {patch}"
        )));
    }
    if latent.len() != channels * grid * grid {
        return Err(Error::Shape(format!(
            "latent has {} values, expected {}",
            latent.len(),
            channels * grid * grid
        )));
    }
    let n = grid / patch;
    let mut out = Vec::with_capacity(latent.len());
    for py in 0..n {
        for px in 0..n {
            for c in 0..channels {
                for dy in 0..patch {
                    let row = c * grid * grid + (py * patch + dy) * grid + px * patch;
                    out.extend_from_slice(&latent[row..row + patch]);
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<F: Scalar>(
    tokens: &[F],
    channels: usize,
    grid: usize,
    patch: usize,
) -> Result<Vec<F>> {
    if patch == 0 || grid % patch != 0 {
        return Err(Error::Shape(format!(
            "grid {grid} not divisible by patch {patch}"
        )));
    }
    if tokens.len() != channels * grid * grid {
        return Err(Error::Shape(format!(
            "tokens hold {} values, expected {}",
            tokens.len(),
            channels * grid * grid
        )));
    }
    let n = grid / patch;
    let mut out = vec![F::zero(); tokens.len()];
    let mut it = tokens.chunks_exact(patch);
    for py in 0..n {
        for px in 0..n {
            for c in 0..channels {
                for dy in 0..patch {
                    let row = c * grid * grid + (py * patch + dy) * grid + px * patch;
                    out[row..row + patch].copy_from_slice(it.next().expect("length checked"));
                }
            }
        }
    }
    Ok(out)
}

/// Sinusoidal embedding `[sin(t f_0..f_{h−1}), cos(t f_0..f_{h−1})]` with
/// `h = d/2` frequencies spaced geometrically from 1 down to 1e-4. An odd
/// trailing slot is zero.
pub fn embed_timestep<F: Scalar>(t: usize, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    let t = t as f64;
    for i in 0..half {
        let frac = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = (frac * 1e-4f64.ln()).exp();
        out[i] = F::of((t * freq).sin());
        out[half + i] = F::of((t * freq).cos());
    }
    out
}
