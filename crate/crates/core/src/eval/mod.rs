//! Metrics, peak-capability selection and the evaluation protocols.

pub mod analysis;
pub mod metrics;
pub mod protocols;
pub mod report;

pub use analysis::{
    band_spreads, histogram, kde, latlon_dispersion, peak_capability, silverman_bandwidth,
    spectral_profile, summarize, wasserstein_1d, BandSpread, Direction, Histogram, LatLonReport,
    PeakReport, Summary,
};
pub use metrics::{
    categorical_metrics, confusion_matrix, geo_stats, geodesic_km, mae, mse, psnr, rmse, ssim,
    CategoricalMetrics, GeoStats,
};
pub use protocols::{
    distribution_narrowing, eval_tiles, leave_one_out, oracle_draws, target_error, tile_level,
    unit_metrics, validate_ladder, EvalTile, Generator, LooRow, LooTable, MetricRow, MetricSummary,
    MetricValue, Rung, TileTruth,
};
pub use report::{conventions, write_csv, write_report, Report};
