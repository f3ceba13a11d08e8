use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `K` fixed class vectors of length `channels`.
///
/// Rows are taken from a Sylvester Hadamard matrix (first column dropped,
/// sign flipped), so entries are ±1 and rows are pairwise distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPalette {
    pub classes: usize,
    pub channels: usize,
    pub rows: Vec<Vec<f64>>,
}

impl ClassPalette {
    pub fn hadamard(classes: usize, channels: usize) -> Result<Self> {
        if classes < 2 || channels == 0 {
            return Err(Error::Config(format!(
                "palette needs >= 2 classes and >= 1 channel, got {classes}×{channels}"
            )));
        }
        let entry = |i: usize, j: usize| {
            if (i & j).count_ones() % 2 == 0 {
                -1.0
            } else {
                1.0
            }
        };
        let rows: Vec<Vec<f64>> = (0..classes)
            .map(|i| (1..=channels).map(|j| entry(i, j)).collect())
            .collect();
        for i in 0..classes {
            for j in 0..i {
                if rows[i] == rows[j] {
                    return Err(Error::Config(format!(
                        "{channels} channels cannot separate {classes} classes (rows {j} and {i} coincide)"
                    )));
                }
            }
        }
        Ok(ClassPalette {
            classes,
            channels,
            rows,
        })
    }

    /// Smallest Euclidean distance between two rows.
    pub fn min_spacing(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.classes {
            for j in 0..i {
                let d: f64 = self.rows[i]
                    .iter()
                    .zip(&self.rows[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    /// Class map `[g·g]` → image `[channels, g, g]`.
    pub fn class_to_continuous<F: Scalar>(&self, map: &[u8]) -> Result<Vec<F>> {
        let n = map.len();
        let mut out = vec![F::zero(); self.channels * n];
        for (p, &k) in map.iter().enumerate() {
            let row = self.rows.get(k as usize).ok_or(Error::ClassOutOfRange {
                modality: "palette".into(),
                value: k as usize,
                classes: self.classes,
            })?;
            for (c, &v) in row.iter().enumerate() {
                out[c * n + p] = F::of(v);
            }
        }
        Ok(out)
    }

    /// Per-class scores `[K, pixels]`: negative squared distance to each row.
    pub fn class_scores<F: Scalar>(&self, image: &[F]) -> Result<Vec<F>> {
        if self.channels == 0 || image.len() % self.channels != 0 {
            return Err(Error::Shape(format!(
                "{} values for {} channels",
                image.len(),
                self.channels
            )));
        }
        let n = image.len() / self.channels;
        let mut out = vec![F::zero(); self.classes * n];
        for (k, row) in self.rows.iter().enumerate() {
            for p in 0..n {
                let d: F = row
                    .iter()
                    .enumerate()
                    .map(|(c, &r)| (image[c * n + p] - F::of(r)).powi(2))
                    .sum();
                out[k * n + p] = -d;
            }
        }
        Ok(out)
    }

    /// Nearest row per pixel; ties go to the lower class index.
    pub fn continuous_to_class<F: Scalar>(&self, image: &[F]) -> Result<Vec<u8>> {
        let scores = self.class_scores(image)?;
        let n = image.len() / self.channels;
        Ok((0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.classes {
                    if scores[k * n + p] > scores[best * n + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect())
    }
}
