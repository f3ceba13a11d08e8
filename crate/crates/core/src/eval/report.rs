//! CSV rows and JSON summaries. Every report carries the hash of the
//! ensemble manifest it was computed from, and the metric conventions used.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
use crate::error::Result;
use crate::io::{file_hash, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub protocol: String,
    pub ensemble_hash: String,
    pub conventions: BTreeMap<String, String>,
    pub body: T,
}

/// Metric definitions recorded in every report.
pub fn conventions() -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            "ssim".into(),
            format!("{SSIM_WINDOW}x{SSIM_WINDOW} gaussian sigma {SSIM_SIGMA}, k1 {SSIM_K1}, k2 {SSIM_K2}, valid windows"),
        ),
        ("data_range".into(), "ground-truth dynamic range per unit and tile, 1 if constant".into()),
        ("miou".into(), "mean over classes present in ground truth or prediction".into()),
        ("fw_iou".into(), "IoU weighted by ground-truth class frequency".into()),
        ("top3".into(), "class scores are negative squared palette distances".into()),
        ("geodesic".into(), "haversine, R = 6371.0 km".into()),
        ("kde".into(), "gaussian kernel, bandwidth 0.9 min(std, IQR/1.34) n^-1/5".into()),
        ("histogram".into(), "64 uniform bins over the oracle range".into()),
    ])
}

impl<T> Report<T> {
    pub fn new(protocol: &str, ensemble_hash: &str, body: T) -> Self {
        Report {
            protocol: protocol.into(),
            ensemble_hash: ensemble_hash.into(),
            conventions: conventions(),
            body,
        }
    }
}

/// Writes `rows` with a header line; returns the file hash.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_path(path).map_err(std::io::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::from)?;
    }
    w.flush()?;
    file_hash(path)
}

pub fn write_report<T: Serialize>(path: &Path, report: &Report<T>) -> Result<String> {
    write_json(path, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::MetricRow;

    #[test]
    fn csv_is_deterministic() {
        let rows = vec![
            MetricRow {
                tile: 1,
                sample: 0,
                seed: 5,
                unit: "DEM".into(),
                metric: "mae".into(),
                value: 0.1,
            },
            MetricRow {
                tile: 1,
                sample: 1,
                seed: 6,
                unit: "DEM".into(),
                metric: "psnr".into(),
                value: f64::INFINITY,
            },
        ];
        let d = tempfile::tempdir().unwrap();
        let a = write_csv(&d.path().join("a.csv"), &rows).unwrap();
        let b = write_csv(&d.path().join("b.csv"), &rows).unwrap();
        assert_eq!(a, b);
        let text = std::fs::read_to_string(d.path().join("a.csv")).unwrap();
        assert!(
            text.starts_with("tile,sample,seed,unit,metric,value\n1,0,5,DEM,mae,0.1\n"),
            "{text}"
        );
        let r = Report::new("tile-level", "abc", rows);
        write_report(&d.path().join("r.json"), &r).unwrap();
    }
}
