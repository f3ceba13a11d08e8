//! Pixel, categorical and geodesic metrics. Every kernel accumulates in f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::EARTH_RADIUS_KM;
use crate::scalar::Scalar;

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Empty("metric inputs".into()));
    }
    Ok(())
}

pub fn mse<F: Scalar>(a: &[F], b: &[F]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64)
}

pub fn mae<F: Scalar>(a: &[F], b: &[F]) -> Result<f64> {
    same_len(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x.f64() - y.f64()).abs())
        .sum::<f64>()
        / a.len() as f64)
}

pub fn rmse<F: Scalar>(a: &[F], b: &[F]) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Peak signal-to-noise ratio in dB; `+∞` when the inputs are identical.
pub fn psnr<F: Scalar>(a: &[F], b: &[F], data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::OutOfRange(format!("data range {data_range}")));
    }
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / m).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean SSIM over every window position fully inside the image, averaged
/// over channels. Images are `[channels, grid, grid]`.
pub fn ssim<F: Scalar>(
    a: &[F],
    b: &[F],
    channels: usize,
    grid: usize,
    data_range: f64,
) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != channels * grid * grid {
        return Err(Error::Shape(format!(
            "{} values for [{channels}, {grid}, {grid}]",
            a.len()
        )));
    }
    if grid < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {grid}×{grid} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )));
    }
    if !(data_range > 0.0) {
        return Err(Error::OutOfRange(format!("data range {data_range}")));
    }
    let w = gaussian_taps();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let out = grid - SSIM_WINDOW + 1;
    let plane = grid * grid;
    let mut total = 0.0;
    for c in 0..channels {
        let x: Vec<f64> = a[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| v.f64())
            .collect();
        let y: Vec<f64> = b[c * plane..(c + 1) * plane]
            .iter()
            .map(|v| v.f64())
            .collect();
        let prods = [
            x.clone(),
            y.clone(),
            x.iter().map(|v| v * v).collect(),
            y.iter().map(|v| v * v).collect(),
            x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<f64>>(),
        ];
        let f: Vec<Vec<f64>> = prods.iter().map(|p| filter_valid(p, grid, &w)).collect();
        let mut sum = 0.0;
        for i in 0..out * out {
            let (mx, my) = (f[0][i], f[1][i]);
            let vx = f[2][i] - mx * mx;
            let vy = f[3][i] - my * my;
            let cxy = f[4][i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / (out * out) as f64;
    }
    Ok(total / channels as f64)
}

/// Separable "valid" correlation of a `grid × grid` plane with `w ⊗ w`.
fn filter_valid(p: &[f64], grid: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out = grid - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; grid * out];
    for y in 0..grid {
        for x in 0..out {
            rows[y * out + x] = (0..SSIM_WINDOW).map(|k| w[k] * p[y * grid + x + k]).sum();
        }
    }
    let mut res = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            res[y * out + x] = (0..SSIM_WINDOW)
                .map(|k| w[k] * rows[(y + k) * out + x])
                .sum();
        }
    }
    res
}

/// `m[g][p]` counts pixels with ground truth `g` predicted as `p`.
pub fn confusion_matrix(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<Vec<u64>>> {
    same_len(pred, gt)?;
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= classes || g as usize >= classes {
            return Err(Error::ClassOutOfRange {
                modality: "metrics".into(),
                value: p.max(g) as usize,
                classes,
            });
        }
        m[g as usize][p as usize] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoricalMetrics {
    pub top1: f64,
    /// Present only when per-class scores were supplied.
    pub top3: Option<f64>,
    /// Mean IoU over classes present in ground truth or prediction.
    pub miou: f64,
    /// IoU weighted by ground-truth class frequency.
    pub fw_iou: f64,
    /// Mean F1 over the same classes as `miou`.
    pub mean_f1: f64,
}

/// `scores` is `[K, pixels]`, higher meaning more likely.
pub fn categorical_metrics<F: Scalar>(
    pred: &[u8],
    gt: &[u8],
    scores: Option<&[F]>,
    classes: usize,
) -> Result<CategoricalMetrics> {
    let m = confusion_matrix(pred, gt, classes)?;
    let n = gt.len() as f64;
    let mut correct = 0u64;
    let (mut iou_sum, mut f1_sum, mut fw, mut present) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..classes {
        let tp = m[c][c];
        let gt_c: u64 = m[c].iter().sum();
        let pred_c: u64 = (0..classes).map(|g| m[g][c]).sum();
        correct += tp;
        if gt_c + pred_c == 0 {
            continue;
        }
        present += 1;
        let (fp, fnn) = (pred_c - tp, gt_c - tp);
        let iou = tp as f64 / (tp + fp + fnn) as f64;
        iou_sum += iou;
        f1_sum += 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
        fw += gt_c as f64 / n * iou;
    }
    let top3 = match scores {
        None => None,
        Some(s) => {
            if s.len() != classes * gt.len() {
                return Err(Error::Shape(format!(
                    "{} scores for {classes}×{} pixels",
                    s.len(),
                    gt.len()
                )));
            }
            let px = gt.len();
            let hits = gt
                .iter()
                .enumerate()
                .filter(|&(p, &g)| {
                    let sg = s[g as usize * px + p];
                    // rank of g: classes scoring higher, or equal with a lower index
                    let ahead = (0..classes)
                        .filter(|&k| {
                            let sk = s[k * px + p];
                            sk > sg || (sk == sg && k < g as usize)
                        })
                        .count();
                    ahead < 3
                })
                .count();
            Some(hits as f64 / n)
        }
    };
    Ok(CategoricalMetrics {
        top1: correct as f64 / n,
        top3,
        miou: iou_sum / present as f64,
        fw_iou: fw,
        mean_f1: f1_sum / present as f64,
    })
}

/// Haversine distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn geodesic_km(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (la1, lo1) = (p.0.to_radians(), p.1.to_radians());
    let (la2, lo2) = (q.0.to_radians(), q.1.to_radians());
    let h = ((la2 - la1) / 2.0).sin().powi(2)
        + la1.cos() * la2.cos() * ((lo2 - lo1) / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoStats {
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub rmse: f64,
}

/// Summary of distances in km; `std` is the population deviation.
pub fn geo_stats(errors: &[f64]) -> Result<GeoStats> {
    if errors.is_empty() {
        return Err(Error::Empty("distance list".into()));
    }
    let n = errors.len() as f64;
    let mut s = errors.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    let median = if s.len() % 2 == 1 {
        s[mid]
    } else {
        (s[mid - 1] + s[mid]) / 2.0
    };
    let mean = s.iter().sum::<f64>() / n;
    let std = (s.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    let rmse = (s.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(GeoStats {
        median,
        mean,
        std,
        rmse,
    })
}
