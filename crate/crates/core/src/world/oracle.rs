use serde::{Deserialize, Serialize};

use super::{optical_base, WorldConfig};
use crate::error::{Error, Result};
use crate::geo::DateStamp;

/// Closed-form optical distribution given elevation, land cover and date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStats {
    /// Per group `[bands, grid, grid]`.
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl OracleStats {
    /// Per band of `group`: square root of the pixel-averaged variance.
    pub fn band_std(&self, group: usize, bands: usize) -> Vec<f64> {
        let v = &self.var[group];
        let plane = v.len() / bands;
        v.chunks_exact(plane)
            .map(|c| (c.iter().sum::<f64>() / plane as f64).sqrt())
            .collect()
    }
}

/// `mean = base·E[s] + offset_g`, `var = base²·Var(s) + σ_a² + σ_pix²`.
///
/// Optical pixels do not depend on elevation once land cover is known;
/// `dem` is only shape-checked.
pub fn oracle_conditional_stats(
    world: &WorldConfig,
    dem: &[f32],
    lulc: &[u8],
    date: DateStamp,
) -> Result<OracleStats> {
    let g = world.grid;
    if dem.len() != g * g || lulc.len() != g * g {
        return Err(Error::Config(format!(
            "oracle expects {g}×{g} rasters, got dem {} and lulc {}",
            dem.len(),
            lulc.len()
        )));
    }
    if let Some(&c) = lulc.iter().find(|&&c| c as usize >= world.classes()) {
        return Err(Error::ClassOutOfRange {
            modality: super::LULC.into(),
            value: c as usize,
            classes: world.classes(),
        });
    }
    let (lo, hi) = world.illumination;
    let es = 0.5 * (lo + hi);
    let vs = (hi - lo).powi(2) / 12.0;
    let floor = world.offset_sigma.powi(2) + world.pixel_sigma.powi(2);
    let base = optical_base(world, lulc, date);
    let mean = base
        .iter()
        .zip(&world.optical_groups)
        .map(|(b, grp)| b.iter().map(|v| v * es + grp.offset).collect())
        .collect();
    let var = base
        .iter()
        .map(|b| b.iter().map(|v| v * v * vs + floor).collect())
        .collect();
    Ok(OracleStats { mean, var })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::world::{generate_tile, resample_nuisance, WATER};

    #[test]
    fn degenerate_nuisances_leave_pixel_noise() {
        let w = WorldConfig {
            offset_sigma: 0.0,
            illumination: (1.0, 1.0),
            ..WorldConfig::toy()
        };
        let t = generate_tile(&w, &mut seeded(1));
        let o = oracle_conditional_stats(&w, &t.dem, &t.lulc, t.date).unwrap();
        let want = w.pixel_sigma.powi(2);
        assert!(o.var.iter().flatten().all(|&v| (v - want).abs() < 1e-18));
    }

    #[test]
    fn water_mean_is_its_reflectance() {
        let w = WorldConfig::toy();
        let lulc = vec![WATER; 576];
        let o =
            oracle_conditional_stats(&w, &[0.0; 576], &lulc, DateStamp::new(2020, 100).unwrap())
                .unwrap();
        assert!(o.mean[0][..576].iter().all(|&m| (m - 0.05).abs() < 1e-15));
        assert!(
            oracle_conditional_stats(&w, &[0.0; 10], &lulc, DateStamp::new(2020, 1).unwrap())
                .is_err()
        );
    }

    #[test]
    fn variance_matches_regenerated_nuisances() {
        let w = WorldConfig::toy();
        let t = generate_tile(&w, &mut seeded(2));
        let o = oracle_conditional_stats(&w, &t.dem, &t.lulc, t.date).unwrap();
        let n = 10_000;
        let probes = [(0usize, 17usize), (0, 400), (1, 100), (2, 70)];
        let mut sum = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        let mut rng = seeded(3);
        for _ in 0..n {
            let u = resample_nuisance(&w, &t, &mut rng);
            for (k, &(g, p)) in probes.iter().enumerate() {
                let v = f64::from(u.optical[g][p]);
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for (k, &(g, p)) in probes.iter().enumerate() {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!(
                (var / o.var[g][p] - 1.0).abs() < 0.03,
                "probe {k}: {var} vs {}",
                o.var[g][p]
            );
            assert!((mean - o.mean[g][p]).abs() < 4.0 * (o.var[g][p] / n as f64).sqrt());
        }
    }
}
