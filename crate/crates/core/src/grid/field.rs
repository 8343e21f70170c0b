//! A single multi-channel latitude-longitude snapshot.

use chrono::{DateTime, Utc};
use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};

/// One time step of stacked atmospheric variables on a regular lat-lon grid,
/// laid out [channel, lat, lon]. Longitude is periodic with uniform spacing
/// covering [0°, 360°); latitude is strictly monotonic.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub values: Array3<f64>,
    pub latitudes: Vec<f64>,
    pub longitudes: Vec<f64>,
    pub valid_time: DateTime<Utc>,
}

impl FieldGrid {
    pub fn new(
        values: Array3<f64>,
        latitudes: Vec<f64>,
        longitudes: Vec<f64>,
        valid_time: DateTime<Utc>,
    ) -> Result<Self> {
        let (_, h, w) = values.dim();
        if latitudes.len() != h {
            return Err(Error::shape(format!(
                "latitude axis length {} != grid rows {h}",
                latitudes.len()
            )));
        }
        if longitudes.len() != w {
            return Err(Error::shape(format!(
                "longitude axis length {} != grid cols {w}",
                longitudes.len()
            )));
        }
        check_latitudes(&latitudes)?;
        check_longitudes(&longitudes)?;
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::data("non-finite value in field grid"));
        }
        Ok(FieldGrid { values, latitudes, longitudes, valid_time })
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn lat_len(&self) -> usize {
        self.values.dim().1
    }

    pub fn lon_len(&self) -> usize {
        self.values.dim().2
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(ndarray::Axis(0), c)
    }

    /// Same grid geometry and time, different values.
    pub fn with_values(&self, values: Array3<f64>) -> Result<Self> {
        FieldGrid::new(
            values,
            self.latitudes.clone(),
            self.longitudes.clone(),
            self.valid_time,
        )
    }
}

fn check_latitudes(lats: &[f64]) -> Result<()> {
    if lats.is_empty() {
        return Err(Error::data("empty latitude axis"));
    }
    if lats.iter().any(|l| !(-90.0..=90.0).contains(l)) {
        return Err(Error::data("latitude outside [-90, 90]"));
    }
    let increasing = lats.windows(2).all(|p| p[1] > p[0]);
    let decreasing = lats.windows(2).all(|p| p[1] < p[0]);
    if !(increasing || decreasing) {
        return Err(Error::data("latitudes must be strictly monotonic"));
    }
    Ok(())
}

fn check_longitudes(lons: &[f64]) -> Result<()> {
    if lons.is_empty() {
        return Err(Error::data("empty longitude axis"));
    }
    let w = lons.len();
    let spacing = 360.0 / w as f64;
    for (i, l) in lons.iter().enumerate() {
        let expect = i as f64 * spacing + lons[0];
        if (l - expect).abs() > 1e-9 * 360.0 {
            return Err(Error::data("longitudes must be uniformly spaced"));
        }
    }
    if lons[0] < 0.0 || *lons.last().unwrap() >= 360.0 + lons[0] {
        return Err(Error::data("longitudes must cover [0, 360) once"));
    }
    Ok(())
}

/// Equiangular cell-center latitudes from north to south (decreasing).
pub fn cell_center_latitudes(h: usize) -> Vec<f64> {
    (0..h)
        .map(|j| 90.0 - (j as f64 + 0.5) * 180.0 / h as f64)
        .collect()
}

/// Uniform longitudes starting at 0°.
pub fn uniform_longitudes(w: usize) -> Vec<f64> {
    (0..w).map(|i| i as f64 * 360.0 / w as f64).collect()
}
