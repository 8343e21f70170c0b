//! Forecast verification: latitude-weighted RMSE, critical success index,
//! Fréchet feature distance, wind speed and ensemble utilities.

pub mod frechet;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::grid::FieldGrid;

pub use frechet::{extract_features, frechet_distance, FeatureExtractor};

/// Per-row area weights proportional to cos(latitude), normalized to mean 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LatWeights {
    pub weights: Vec<f64>,
}

/// WeatherBench-convention latitude weights: L(j) = cos(phi_j) / mean(cos).
pub fn lat_weights(latitudes: &[f64]) -> Result<LatWeights> {
    if latitudes.is_empty() {
        return Err(Error::data("empty latitude axis"));
    }
    if latitudes.iter().any(|l| l.abs() > 90.0) {
        return Err(Error::data("latitude outside [-90, 90]"));
    }
    let cos: Vec<f64> = latitudes.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if mean <= 0.0 {
        return Err(Error::data("degenerate latitude set (all at the poles)"));
    }
    Ok(LatWeights { weights: cos.iter().map(|c| c / mean).collect() })
}

impl LatWeights {
    pub fn uniform(rows: usize) -> Self {
        LatWeights { weights: vec![1.0; rows] }
    }
}

/// Latitude-weighted RMSE over one [lat, lon] plane.
pub fn weighted_rmse_plane(
    pred: &ArrayView2<f64>,
    truth: &ArrayView2<f64>,
    weights: &LatWeights,
) -> Result<f64> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "pred {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let (h, w) = pred.dim();
    if weights.weights.len() != h {
        return Err(Error::shape("weight rows != grid rows"));
    }
    let mut acc = 0.0;
    for j in 0..h {
        let wj = weights.weights[j];
        for i in 0..w {
            let d = pred[[j, i]] - truth[[j, i]];
            acc += wj * d * d;
        }
    }
    Ok((acc / (h * w) as f64).sqrt())
}

/// Latitude-weighted RMSE of one channel of a prediction against truth, in
/// the channel's physical units.
pub fn weighted_rmse(
    pred: &FieldGrid,
    truth: &FieldGrid,
    weights: &LatWeights,
    channel: usize,
) -> Result<f64> {
    if pred.values.dim() != truth.values.dim() {
        return Err(Error::shape("pred/truth grids differ"));
    }
    weighted_rmse_plane(&pred.channel(channel), &truth.channel(channel), weights)
}

/// Threshold-exceedance contingency counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContingencyTable {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }
}

/// CSI outcome; `degenerate` marks an empty denominator (no events anywhere).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsiResult {
    pub table: ContingencyTable,
    pub csi: f64,
    pub degenerate: bool,
}

/// Critical success index for events `value >= threshold` (mm).
pub fn csi(
    pred_tp: &ArrayView2<f64>,
    truth_tp: &ArrayView2<f64>,
    threshold_mm: f64,
) -> Result<CsiResult> {
    if threshold_mm <= 0.0 {
        return Err(Error::config("CSI threshold must be positive"));
    }
    if pred_tp.dim() != truth_tp.dim() {
        return Err(Error::shape("pred/truth grids differ"));
    }
    let mut t = ContingencyTable::default();
    for (p, o) in pred_tp.iter().zip(truth_tp.iter()) {
        let pe = *p >= threshold_mm;
        let oe = *o >= threshold_mm;
        match (pe, oe) {
            (true, true) => t.hits += 1,
            (true, false) => t.false_alarms += 1,
            (false, true) => t.misses += 1,
            (false, false) => t.correct_negatives += 1,
        }
    }
    let denom = t.hits + t.misses + t.false_alarms;
    let (csi, degenerate) = if denom == 0 {
        (0.0, true)
    } else {
        (t.hits as f64 / denom as f64, false)
    };
    Ok(CsiResult { table: t, csi, degenerate })
}

/// Pointwise wind speed from the zonal and meridional components.
pub fn wind_speed(u10: &ArrayView2<f64>, v10: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if u10.dim() != v10.dim() {
        return Err(Error::shape("u10/v10 grids differ"));
    }
    let mut out = Array2::<f64>::zeros(u10.dim());
    for ((o, u), v) in out.iter_mut().zip(u10.iter()).zip(v10.iter()) {
        *o = (u * u + v * v).sqrt();
    }
    Ok(out)
}

/// Wind speed channel derived from a grid via catalog channel lookup.
pub fn wind_speed_grid(
    grid: &FieldGrid,
    catalog: &crate::grid::VariableCatalog,
) -> Result<Array2<f64>> {
    let u = catalog.index_of("u10")?;
    let v = catalog.index_of("v10")?;
    wind_speed(&grid.channel(u), &grid.channel(v))
}

/// Pointwise arithmetic mean of ensemble members.
pub fn ensemble_mean(members: &[FieldGrid]) -> Result<FieldGrid> {
    let first = members
        .first()
        .ok_or_else(|| Error::data("ensemble_mean of empty member set"))?;
    let mut acc = first.values.clone();
    for m in &members[1..] {
        if m.values.dim() != first.values.dim() {
            return Err(Error::shape("ensemble members differ in shape"));
        }
        acc += &m.values;
    }
    acc.mapv_inplace(|v| v / members.len() as f64);
    first.with_values(acc)
}

/// Plain (unweighted) MSE between two planes, for Jensen-style checks.
pub fn mse_plane(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += (x - y) * (x - y);
    }
    acc / a.len() as f64
}
