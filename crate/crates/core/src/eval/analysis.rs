//! Ensemble-level statistics: peak capability, spread and distribution
//! comparisons, spectral profiles and location dispersion.

use serde::{Deserialize, Serialize};

use super::metrics::{geo_stats, geodesic_km, GeoStats};
use crate::error::{Error, Result};
use crate::geo::{decode_latlon, GeoVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Errors: best is the minimum.
    Lower,
    /// Scores: best is the maximum.
    Higher,
}

impl Direction {
    pub fn best(self, values: &[f64]) -> Option<f64> {
        let it = values.iter().copied();
        match self {
            Direction::Lower => it.reduce(f64::min),
            Direction::Higher => it.reduce(f64::max),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Empty("no values to summarize".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Summary {
        mean,
        std,
        n: values.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakReport {
    pub best: Vec<f64>,
    pub tile_mean: Vec<f64>,
    /// Mean over tiles of the per-tile best.
    pub best_mean: f64,
    /// Mean and spread over every tile and sample.
    pub overall: Summary,
}

/// Per-tile best sample, then the mean over tiles. `per_tile[i]` holds the
/// metric of every sample of tile `i`.
pub fn peak_capability(per_tile: &[Vec<f64>], direction: Direction) -> Result<PeakReport> {
    if per_tile.is_empty() || per_tile.iter().any(Vec::is_empty) {
        return Err(Error::Empty(
            "peak capability needs at least one sample per tile".into(),
        ));
    }
    let best: Vec<f64> = per_tile
        .iter()
        .map(|v| direction.best(v).unwrap())
        .collect();
    let tile_mean: Vec<f64> = per_tile
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let flat: Vec<f64> = per_tile.iter().flatten().copied().collect();
    Ok(PeakReport {
        best_mean: best.iter().sum::<f64>() / best.len() as f64,
        overall: summarize(&flat)?,
        best,
        tile_mean,
    })
}

/// 1-D Wasserstein-1 distance between two empirical distributions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty(
            "Wasserstein distance needs two non-empty samples".into(),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    // integrate |F_a − F_b| between consecutive breakpoints of the merged sample
    let (mut i, mut j) = (0, 0);
    let mut x = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&p), Some(&q)) => p.min(q),
            (Some(&p), None) => p,
            (None, Some(&q)) => q,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - x);
        x = next;
        while i < a.len() && a[i] == x {
            i += 1;
        }
        while j < b.len() && b[j] == x {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

/// Uniform bins over `[lo, hi]`; values outside are clamped into the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
    if bins == 0 || !(hi > lo) {
        return Err(Error::OutOfRange(format!(
            "histogram [{lo}, {hi}] with {bins} bins"
        )));
    }
    let mut counts = vec![0u64; bins];
    let w = (hi - lo) / bins as f64;
    for &v in values {
        let k = ((v - lo) / w).floor().clamp(0.0, (bins - 1) as f64) as usize;
        counts[k] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

/// Silverman's rule of thumb: `0.9 · min(σ, IQR / 1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let s = summarize(values)?;
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = p * (v.len() - 1) as f64;
        let (l, f) = (h.floor() as usize, h.fract());
        v[l] + f * (v[(l + 1).min(v.len() - 1)] - v[l])
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 {
        s.std.min(iqr / 1.34)
    } else {
        s.std
    };
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// Gaussian kernel density estimate evaluated at `at`.
pub fn kde(values: &[f64], bandwidth: f64, at: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() || !(bandwidth > 0.0) {
        return Err(Error::OutOfRange(format!(
            "KDE with {} values and bandwidth {bandwidth}",
            values.len()
        )));
    }
    let norm = 1.0 / (values.len() as f64 * bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    Ok(at
        .iter()
        .map(|&x| {
            values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / bandwidth).powi(2)).exp())
                .sum::<f64>()
                * norm
        })
        .collect())
}

/// Spread of one band over an ensemble compared with oracle draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSpread {
    pub band: usize,
    /// Std of the band's values pooled over pixels and samples.
    pub std: f64,
    pub oracle_std: f64,
    /// Root-mean-square over pixels of the across-sample std.
    pub pixel_std: f64,
    pub oracle_pixel_std: f64,
    /// Approximate standard error of `pixel_std`, `pixel_std / √(2(n − 1))`.
    pub pixel_std_se: f64,
    pub wasserstein: f64,
    pub histogram: Histogram,
    pub bandwidth: f64,
    pub kde_at: Vec<f64>,
    pub kde: Vec<f64>,
}

pub const NARROWING_BINS: usize = 64;

fn pixel_std(images: &[&[f64]], band: usize, pixels: usize) -> f64 {
    let n = images.len() as f64;
    let mut acc = 0.0;
    for p in 0..pixels {
        let vals = images.iter().map(|im| im[band * pixels + p]);
        let m = vals.clone().sum::<f64>() / n;
        acc += vals.map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    }
    (acc / pixels as f64).sqrt()
}

/// Per-band spread of `samples` against `oracle`; both are lists of images
/// `[channels, pixels]`. Histogram and KDE grid span the oracle's range.
pub fn band_spreads(
    samples: &[&[f64]],
    oracle: &[&[f64]],
    channels: usize,
) -> Result<Vec<BandSpread>> {
    if samples.len() < 2 || oracle.len() < 2 {
        return Err(Error::Empty(
            "band spreads need at least two samples and two oracle draws".into(),
        ));
    }
    let len = samples[0].len();
    if channels == 0
        || len % channels != 0
        || samples.iter().chain(oracle).any(|im| im.len() != len)
    {
        return Err(Error::Shape(format!(
            "images must all hold {channels} bands of equal size"
        )));
    }
    let pixels = len / channels;
    let pooled = |set: &[&[f64]], c: usize| -> Vec<f64> {
        set.iter()
            .flat_map(|im| im[c * pixels..(c + 1) * pixels].iter().copied())
            .collect()
    };
    (0..channels)
        .map(|band| {
            let (s, o) = (pooled(samples, band), pooled(oracle, band));
            let (lo, hi) = o
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            let (lo, hi) = if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            };
            let bw = silverman_bandwidth(&s)?;
            let bw = if bw > 0.0 {
                bw
            } else {
                (hi - lo) / NARROWING_BINS as f64
            };
            let kde_at: Vec<f64> = (0..NARROWING_BINS)
                .map(|k| lo + (k as f64 + 0.5) * (hi - lo) / NARROWING_BINS as f64)
                .collect();
            let px = pixel_std(samples, band, pixels);
            Ok(BandSpread {
                band,
                std: summarize(&s)?.std,
                oracle_std: summarize(&o)?.std,
                pixel_std: px,
                oracle_pixel_std: pixel_std(oracle, band, pixels),
                pixel_std_se: px / (2.0 * (samples.len() - 1) as f64).sqrt(),
                wasserstein: wasserstein_1d(&s, &o)?,
                histogram: histogram(&s, lo, hi, NARROWING_BINS)?,
                bandwidth: bw,
                kde: kde(&s, bw, &kde_at)?,
                kde_at,
            })
        })
        .collect()
}

/// Mean band vector of the listed pixels per class; `None` for classes with
/// no listed pixel. Images are `[channels, grid, grid]`, the class map is
/// `[lulc_grid, lulc_grid]` and pixel coordinates are in image space.
pub fn spectral_profile(
    images: &[&[f64]],
    channels: usize,
    grid: usize,
    lulc: &[u8],
    lulc_grid: usize,
    classes: usize,
    pixels: &[(usize, usize)],
) -> Result<Vec<Option<Vec<f64>>>> {
    if lulc.len() != lulc_grid * lulc_grid {
        return Err(Error::Shape(format!(
            "class map has {} values for grid {lulc_grid}",
            lulc.len()
        )));
    }
    let plane = grid * grid;
    let mut sums = vec![vec![0.0; channels]; classes];
    let mut counts = vec![0usize; classes];
    for img in images {
        if img.len() != channels * plane {
            return Err(Error::Shape(format!(
                "image has {} values for [{channels}, {grid}, {grid}]",
                img.len()
            )));
        }
        for &(y, x) in pixels {
            if y >= grid || x >= grid {
                return Err(Error::OutOfRange(format!(
                    "pixel ({y}, {x}) outside {grid}×{grid}"
                )));
            }
            let k = lulc[(y * lulc_grid / grid) * lulc_grid + x * lulc_grid / grid] as usize;
            if k >= classes {
                return Err(Error::ClassOutOfRange {
                    modality: "LULC".into(),
                    value: k,
                    classes,
                });
            }
            counts[k] += 1;
            for c in 0..channels {
                sums[k][c] += img[c * plane + y * grid + x];
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatLonReport {
    /// Decoded `(lat, lon)` per usable prediction.
    pub points: Vec<(f64, f64)>,
    pub errors_km: Vec<f64>,
    pub error_stats: GeoStats,
    /// Distances between every pair of decoded predictions.
    pub pairwise: Option<GeoStats>,
    pub max_pairwise_km: f64,
    /// Indices of predictions that could not be decoded (zero vectors).
    pub flagged: Vec<usize>,
}

pub fn latlon_dispersion(predictions: &[[f64; 3]], gt: (f64, f64)) -> Result<LatLonReport> {
    let mut points = Vec::new();
    let mut flagged = Vec::new();
    for (i, p) in predictions.iter().enumerate() {
        match decode_latlon(GeoVec {
            x: p[0],
            y: p[1],
            z: p[2],
        }) {
            Ok(ll) => points.push(ll),
            Err(_) => flagged.push(i),
        }
    }
    if points.is_empty() {
        return Err(Error::Empty("no decodable location predictions".into()));
    }
    let errors_km: Vec<f64> = points.iter().map(|&p| geodesic_km(p, gt)).collect();
    let mut pairs = Vec::new();
    for i in 0..points.len() {
        for j in 0..i {
            pairs.push(geodesic_km(points[i], points[j]));
        }
    }
    Ok(LatLonReport {
        error_stats: geo_stats(&errors_km)?,
        pairwise: (!pairs.is_empty()).then(|| geo_stats(&pairs)).transpose()?,
        max_pairwise_km: pairs.iter().copied().fold(0.0, f64::max),
        errors_km,
        points,
        flagged,
    })
}
