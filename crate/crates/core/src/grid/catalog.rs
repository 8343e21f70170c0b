//! The ordered channel layout and per-channel normalization statistics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::FieldGrid;

/// Vertical placement of a variable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    /// Pressure level in hPa.
    Pressure(u32),
    Surface,
    /// Time-invariant field (land-sea mask, orography); never predicted.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub level: Level,
    pub unit: String,
}

impl VariableSpec {
    fn new(name: &str, level: Level, unit: &str) -> Self {
        VariableSpec { name: name.to_string(), level, unit: unit.to_string() }
    }

    /// Channel key like "z500", "t2m", "lsm".
    pub fn key(&self) -> String {
        match self.level {
            Level::Pressure(p) => format!("{}{}", self.name, p),
            _ => self.name.clone(),
        }
    }
}

/// Per-channel z-score statistics in physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// The 13 pressure levels of the full layout, in hPa.
pub const PRESSURE_LEVELS: [u32; 13] =
    [50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000];

/// Ordered channel layout plus normalization and headline-channel indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableCatalog {
    pub profile: String,
    pub entries: Vec<VariableSpec>,
    pub normalization: Option<NormStats>,
}

impl VariableCatalog {
    /// Build a catalog from a named profile.
    ///
    /// "paper71": 5 pressure-level variables x 13 levels, 4 surface fields,
    /// 2 constants (71 channels). "desk": the 6 headline variables plus the
    /// 2 constants (8 channels).
    pub fn build(profile: &str) -> Result<Self> {
        let entries = match profile {
            "paper71" => {
                let mut e = Vec::with_capacity(71);
                for (name, unit) in [
                    ("z", "m2 s-2"),
                    ("t", "K"),
                    ("r", "%"),
                    ("u", "m s-1"),
                    ("v", "m s-1"),
                ] {
                    for p in PRESSURE_LEVELS {
                        e.push(VariableSpec::new(name, Level::Pressure(p), unit));
                    }
                }
                e.push(VariableSpec::new("t2m", Level::Surface, "K"));
                e.push(VariableSpec::new("u10", Level::Surface, "m s-1"));
                e.push(VariableSpec::new("v10", Level::Surface, "m s-1"));
                e.push(VariableSpec::new("tp", Level::Surface, "mm"));
                e.push(VariableSpec::new("lsm", Level::Constant, "1"));
                e.push(VariableSpec::new("orography", Level::Constant, "m"));
                e
            }
            "desk" => vec![
                VariableSpec::new("z", Level::Pressure(500), "m2 s-2"),
                VariableSpec::new("t", Level::Pressure(850), "K"),
                VariableSpec::new("t2m", Level::Surface, "K"),
                VariableSpec::new("tp", Level::Surface, "mm"),
                VariableSpec::new("u10", Level::Surface, "m s-1"),
                VariableSpec::new("v10", Level::Surface, "m s-1"),
                VariableSpec::new("lsm", Level::Constant, "1"),
                VariableSpec::new("orography", Level::Constant, "m"),
            ],
            other => {
                return Err(Error::config(format!("unknown catalog profile '{other}'")))
            }
        };
        let mut keys: Vec<String> = entries.iter().map(|e| e.key()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), entries.len(), "duplicate channel in catalog");
        let cat = VariableCatalog {
            profile: profile.to_string(),
            entries,
            normalization: None,
        };
        // headline channels must exist in every profile
        for key in ["z500", "t850", "t2m", "tp", "u10", "v10"] {
            cat.index_of(key)?;
        }
        Ok(cat)
    }

    pub fn channels(&self) -> usize {
        self.entries.len()
    }

    pub fn index_of(&self, key: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.key() == key)
            .ok_or_else(|| Error::config(format!("channel '{key}' not in catalog")))
    }

    pub fn is_constant(&self, ch: usize) -> bool {
        matches!(self.entries[ch].level, Level::Constant)
    }

    pub fn constant_channels(&self) -> Vec<usize> {
        (0..self.channels()).filter(|&c| self.is_constant(c)).collect()
    }

    /// Channels the forecaster predicts (everything non-constant).
    pub fn predicted_channels(&self) -> Vec<usize> {
        (0..self.channels()).filter(|&c| !self.is_constant(c)).collect()
    }

    /// The paper's headline channels, in catalog order of appearance.
    pub fn headline_keys(&self) -> [&'static str; 6] {
        ["z500", "t850", "t2m", "tp", "u10", "v10"]
    }

    pub fn set_normalization(&mut self, stats: NormStats) -> Result<()> {
        if stats.mean.len() != self.channels() || stats.std.len() != self.channels() {
            return Err(Error::shape("normalization stats length != channel count"));
        }
        if stats.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::data("normalization std must be positive"));
        }
        self.normalization = Some(stats);
        Ok(())
    }

    pub fn normalization(&self) -> Result<&NormStats> {
        self.normalization
            .as_ref()
            .ok_or_else(|| Error::config("catalog has no normalization stats"))
    }

    /// Stable content hash over the serialized catalog (layout + stats).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("catalog serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex_string(&hasher.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Floor applied to zero-variance channels.
pub const STD_EPS: f64 = 1e-6;

/// Per-channel mean/std over all time steps and grid points.
pub fn compute_normalization_stats(frames: &[FieldGrid]) -> Result<NormStats> {
    if frames.is_empty() {
        return Err(Error::data("cannot compute stats over an empty dataset"));
    }
    let c = frames[0].channels();
    let mut mean = vec![0.0f64; c];
    let mut count = vec![0u64; c];
    for f in frames {
        if f.channels() != c {
            return Err(Error::shape("inconsistent channel count across frames"));
        }
        for ch in 0..c {
            let plane = f.channel(ch);
            mean[ch] += plane.sum();
            count[ch] += plane.len() as u64;
        }
    }
    for ch in 0..c {
        mean[ch] /= count[ch] as f64;
    }
    let mut var = vec![0.0f64; c];
    for f in frames {
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += f.channel(ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let std = var
        .iter()
        .zip(&count)
        .map(|(v, n)| (v / *n as f64).sqrt().max(STD_EPS))
        .collect();
    Ok(NormStats { mean, std })
}

/// Per-channel z-score in physical units; constant channels pass through.
pub fn normalize(grid: &FieldGrid, catalog: &VariableCatalog) -> Result<FieldGrid> {
    let stats = catalog.normalization()?;
    if grid.channels() != catalog.channels() {
        return Err(Error::shape(format!(
            "grid has {} channels, catalog {}",
            grid.channels(),
            catalog.channels()
        )));
    }
    let mut values = grid.values.clone();
    for ch in 0..catalog.channels() {
        if catalog.is_constant(ch) {
            continue;
        }
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        values
            .index_axis_mut(ndarray::Axis(0), ch)
            .mapv_inplace(|v| (v - m) / s);
    }
    grid.with_values(values)
}

/// Inverse of [`normalize`]; precipitation is clamped to >= 0 in physical
/// space, constant channels pass through.
pub fn denormalize(grid: &FieldGrid, catalog: &VariableCatalog) -> Result<FieldGrid> {
    let stats = catalog.normalization()?;
    if grid.channels() != catalog.channels() {
        return Err(Error::shape(format!(
            "grid has {} channels, catalog {}",
            grid.channels(),
            catalog.channels()
        )));
    }
    let tp = catalog.index_of("tp")?;
    let mut values = grid.values.clone();
    for ch in 0..catalog.channels() {
        if catalog.is_constant(ch) {
            continue;
        }
        let (m, s) = (stats.mean[ch], stats.std[ch]);
        let mut plane = values.index_axis_mut(ndarray::Axis(0), ch);
        plane.mapv_inplace(|v| v * s + m);
        if ch == tp {
            plane.mapv_inplace(|v| v.max(0.0));
        }
    }
    grid.with_values(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::field::{cell_center_latitudes, uniform_longitudes};
    use chrono::Utc;
    use ndarray::Array3;

    fn grid_with(values: Array3<f64>) -> FieldGrid {
        let (_, h, w) = values.dim();
        FieldGrid::new(values, cell_center_latitudes(h), uniform_longitudes(w), Utc::now())
            .unwrap()
    }

    #[test]
    fn paper71_has_71_channels_and_2_constants() {
        let cat = VariableCatalog::build("paper71").unwrap();
        assert_eq!(cat.channels(), 71);
        assert_eq!(cat.constant_channels().len(), 2);
        assert!(cat.index_of("z500").is_ok());
        assert!(cat.index_of("t850").is_ok());
    }

    #[test]
    fn desk_profile_has_headline_channels() {
        let cat = VariableCatalog::build("desk").unwrap();
        assert_eq!(cat.channels(), 8);
        for key in ["z500", "t850", "t2m", "tp", "u10", "v10"] {
            assert!(cat.index_of(key).is_ok(), "{key} missing");
        }
        assert_eq!(cat.constant_channels().len(), 2);
    }

    #[test]
    fn unknown_profile_is_a_config_error() {
        assert!(VariableCatalog::build("nope").is_err());
    }

    #[test]
    fn constant_channel_stats_floor_std() {
        let cat = VariableCatalog::build("desk").unwrap();
        let v = Array3::from_elem((cat.channels(), 4, 8), 2.5);
        let frames = vec![grid_with(v)];
        let stats = compute_normalization_stats(&frames).unwrap();
        assert!((stats.mean[0] - 2.5).abs() < 1e-12);
        assert_eq!(stats.std[0], STD_EPS);
    }

    #[test]
    fn two_sample_channel_forced_arithmetic() {
        // channel values {0, 2} at every point across two frames
        let cat = VariableCatalog::build("desk").unwrap();
        let frames = vec![
            grid_with(Array3::zeros((cat.channels(), 2, 4))),
            grid_with(Array3::from_elem((cat.channels(), 2, 4), 2.0)),
        ];
        let stats = compute_normalization_stats(&frames).unwrap();
        for ch in 0..cat.channels() {
            assert!((stats.mean[ch] - 1.0).abs() < 1e-12);
            assert!((stats.std[ch] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_errors() {
        assert!(compute_normalization_stats(&[]).is_err());
    }

    #[test]
    fn normalize_at_mean_gives_zero_and_roundtrips() {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let c = cat.channels();
        let mean: Vec<f64> = (0..c).map(|i| i as f64).collect();
        let std: Vec<f64> = (0..c).map(|i| 1.0 + i as f64).collect();
        cat.set_normalization(NormStats { mean: mean.clone(), std }).unwrap();

        let mut v = Array3::zeros((c, 2, 4));
        for ch in 0..c {
            v.index_axis_mut(ndarray::Axis(0), ch).fill(mean[ch]);
        }
        let g = grid_with(v);
        let n = normalize(&g, &cat).unwrap();
        for ch in 0..c {
            if cat.is_constant(ch) {
                continue;
            }
            assert!(n.channel(ch).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn denormalize_clamps_tp() {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let c = cat.channels();
        cat.set_normalization(NormStats { mean: vec![0.0; c], std: vec![1.0; c] })
            .unwrap();
        let tp = cat.index_of("tp").unwrap();
        let mut v = Array3::zeros((c, 2, 4));
        v[[tp, 0, 0]] = -3.0;
        v[[tp, 0, 1]] = 4.0;
        let g = grid_with(v);
        let d = denormalize(&g, &cat).unwrap();
        // hand-applied clamp oracle
        assert_eq!(d.values[[tp, 0, 0]], 0.0);
        assert_eq!(d.values[[tp, 0, 1]], 4.0);
    }

    #[test]
    fn channel_mismatch_errors() {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let c = cat.channels();
        cat.set_normalization(NormStats { mean: vec![0.0; c], std: vec![1.0; c] })
            .unwrap();
        let g = grid_with(Array3::zeros((3, 2, 4)));
        assert!(normalize(&g, &cat).is_err());
    }

    #[test]
    fn hash_changes_with_stats() {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let h0 = cat.hash();
        let c = cat.channels();
        cat.set_normalization(NormStats { mean: vec![0.0; c], std: vec![1.0; c] })
            .unwrap();
        assert_ne!(h0, cat.hash());
    }
}
