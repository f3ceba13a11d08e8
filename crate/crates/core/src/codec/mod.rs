//! Per-band-group latent codecs.
//!
//! A learned codec is a small convolutional KL-autoencoder; the identity codec
//! block-averages on the way in and bilinearly upsamples on the way out.
//! Categorical maps pass through a [`ClassPalette`] before either codec.

mod palette;
mod set;
mod store;
mod vae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use palette::ClassPalette;
pub use set::{codec_input, load_codec, save_codec, CodecRecord, CodecSet, Decoded};
pub use store::{preencode_dataset, LatentManifest, LatentStats, LatentStore, LatentTileEntry};
pub use vae::{
    codec_loss_terms, reparameterize, train_codec, CodecLoss, CodecTrainOptions, ConvVae,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    /// Feature widths: one per resolution level, finest first.
    pub hidden: Vec<usize>,
    pub kl_weight: f64,
    pub seed: u64,
}

impl CodecConfig {
    pub fn toy() -> Self {
        CodecConfig {
            downsample_factor: 4,
            latent_channels: 8,
            hidden: vec![16, 32, 32],
            kl_weight: 1e-6,
            seed: 0,
        }
    }

    pub fn reference() -> Self {
        CodecConfig {
            downsample_factor: 8,
            latent_channels: 8,
            hidden: vec![64, 128, 256, 256],
            kl_weight: 1e-6,
            seed: 0,
        }
    }

    /// Number of 2× downsampling stages.
    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample factor {} is not a power of 2",
                self.downsample_factor
            )));
        }
        if self.latent_channels == 0 {
            return Err(Error::Config("latent_channels must be >= 1".into()));
        }
        if self.hidden.len() != self.stages() + 1 || self.hidden.contains(&0) {
            return Err(Error::Config(format!(
                "need {} positive hidden widths for factor {}, got {:?}",
                self.stages() + 1,
                self.downsample_factor,
                self.hidden
            )));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed, non-learned codec: `f×f` block means in, bilinear upsampling out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityCodec {
    pub factor: usize,
    pub channels: usize,
    pub grid: usize,
}

impl IdentityCodec {
    pub fn new(factor: usize, channels: usize, grid: usize) -> Result<Self> {
        if factor == 0 || grid % factor != 0 {
            return Err(Error::Config(format!(
                "grid {grid} not divisible by factor {factor}"
            )));
        }
        Ok(IdentityCodec {
            factor,
            channels,
            grid,
        })
    }

    pub fn latent_grid(&self) -> usize {
        self.grid / self.factor
    }

    pub fn encode<F: Scalar>(&self, image: &[F]) -> Result<Vec<F>> {
        let (g, f, lg) = (self.grid, self.factor, self.latent_grid());
        if image.len() != self.channels * g * g {
            return Err(Error::Shape(format!(
                "image has {} values, expected {}",
                image.len(),
                self.channels * g * g
            )));
        }
        let inv = F::one() / F::of_usize(f * f);
        let mut out = vec![F::zero(); self.channels * lg * lg];
        for c in 0..self.channels {
            for y in 0..g {
                for x in 0..g {
                    out[c * lg * lg + (y / f) * lg + x / f] += image[c * g * g + y * g + x] * inv;
                }
            }
        }
        Ok(out)
    }

    pub fn decode<F: Scalar>(&self, latent: &[F]) -> Result<Vec<F>> {
        let (g, lg) = (self.grid, self.latent_grid());
        if latent.len() != self.channels * lg * lg {
            return Err(Error::Shape(format!(
                "latent has {} values, expected {}",
                latent.len(),
                self.channels * lg * lg
            )));
        }
        let taps: Vec<(usize, usize, F)> =
            (0..g).map(|i| bilinear_tap(i, self.factor, lg)).collect();
        let mut out = Vec::with_capacity(self.channels * g * g);
        for plane in latent.chunks_exact(lg * lg) {
            for &(y0, y1, wy) in &taps {
                for &(x0, x1, wx) in &taps {
                    let top = plane[y0 * lg + x0] * (F::one() - wx) + plane[y0 * lg + x1] * wx;
                    let bot = plane[y1 * lg + x0] * (F::one() - wx) + plane[y1 * lg + x1] * wx;
                    out.push(top * (F::one() - wy) + bot * wy);
                }
            }
        }
        Ok(out)
    }
}

/// Half-pixel-centred source taps for output index `i`, edges clamped.
fn bilinear_tap<F: Scalar>(i: usize, factor: usize, n: usize) -> (usize, usize, F) {
    let s = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, F::of(s - i0 as f64))
}

/// Codec attached to one image unit.
#[derive(Debug, Clone, PartialEq)]
pub enum UnitCodec<F> {
    Identity(IdentityCodec),
    Learned(ConvVae<F>),
}

impl<F: Scalar> UnitCodec<F> {
    pub fn latent_channels(&self) -> usize {
        match self {
            UnitCodec::Identity(c) => c.channels,
            UnitCodec::Learned(v) => v.config.latent_channels,
        }
    }

    /// Deterministic encoding (the posterior mean for learned codecs).
    pub fn encode(&self, image: &[F]) -> Result<Vec<F>> {
        match self {
            UnitCodec::Identity(c) => c.encode(image),
            UnitCodec::Learned(v) => Ok(v.encode(image, 1)?.0),
        }
    }

    pub fn decode(&self, latent: &[F]) -> Result<Vec<F>> {
        match self {
            UnitCodec::Identity(c) => c.decode(latent),
            UnitCodec::Learned(v) => v.decode(latent, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rules() {
        CodecConfig::toy().validate().unwrap();
        CodecConfig::reference().validate().unwrap();
        let bad = CodecConfig {
            downsample_factor: 3,
            ..CodecConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = CodecConfig {
            latent_channels: 0,
            ..CodecConfig::toy()
        };
        assert!(bad.validate().is_err());
        let bad = CodecConfig {
            hidden: vec![8, 8],
            ..CodecConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identity_codec_shapes_and_constants() {
        let c = IdentityCodec::new(4, 2, 24).unwrap();
        let img: Vec<f64> = (0..2 * 24 * 24)
            .map(|i| if i < 576 { 0.25 } else { -1.0 })
            .collect();
        let z = c.encode(&img).unwrap();
        assert_eq!(z.len(), 2 * 36);
        assert!(z[..36].iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let back = c.decode(&z).unwrap();
        for (a, b) in back.iter().zip(&img) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(IdentityCodec::new(4, 1, 10).is_err());
    }

    #[test]
    fn identity_codec_reproduces_linear_ramps_inside() {
        // bilinear upsampling of block means is exact for an affine image away from edges
        let c = IdentityCodec::new(2, 1, 16).unwrap();
        let img: Vec<f64> = (0..256)
            .map(|i| (i / 16) as f64 * 0.5 + (i % 16) as f64 * 0.25)
            .collect();
        let back = c.decode(&c.encode(&img).unwrap()).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                assert!(
                    (back[y * 16 + x] - img[y * 16 + x]).abs() < 1e-12,
                    "({y},{x})"
                );
            }
        }
    }
}
