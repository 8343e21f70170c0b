//! Time-ordered gridded datasets: container, on-disk format, block-mean
//! downsampling and training sample-pair construction.
//!
//! On disk a dataset is a directory with `meta.json` (dims, catalog, axes,
//! start time, interval) and `data.bin`, little-endian f32 laid out
//! [time, channel, lat, lon].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use ndarray::{s, Array2, Array3, Array4, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::catalog::VariableCatalog;
use crate::grid::field::FieldGrid;

/// A time sequence of grids sharing one catalog and one grid geometry.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub catalog: VariableCatalog,
    pub latitudes: Vec<f64>,
    pub longitudes: Vec<f64>,
    pub start: DateTime<Utc>,
    pub interval_hours: i64,
    /// [time, channel, lat, lon]
    pub values: Array4<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    version: u32,
    dims: [usize; 4],
    catalog: VariableCatalog,
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
    start: DateTime<Utc>,
    interval_hours: i64,
}

impl Dataset {
    pub fn n_steps(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn grid_dims(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.2, d.3)
    }

    pub fn valid_time(&self, t: usize) -> DateTime<Utc> {
        self.start + Duration::hours(self.interval_hours * t as i64)
    }

    /// Materialize one time step as a [`FieldGrid`].
    pub fn frame(&self, t: usize) -> FieldGrid {
        FieldGrid {
            values: self.values.index_axis(Axis(0), t).to_owned(),
            latitudes: self.latitudes.clone(),
            longitudes: self.longitudes.clone(),
            valid_time: self.valid_time(t),
        }
    }

    /// Contiguous time slice [t0, t1) as an owned dataset.
    pub fn time_slice(&self, t0: usize, t1: usize) -> Result<Dataset> {
        if t0 >= t1 || t1 > self.n_steps() {
            return Err(Error::data(format!(
                "invalid time slice [{t0}, {t1}) of {} steps",
                self.n_steps()
            )));
        }
        Ok(Dataset {
            catalog: self.catalog.clone(),
            latitudes: self.latitudes.clone(),
            longitudes: self.longitudes.clone(),
            start: self.valid_time(t0),
            interval_hours: self.interval_hours,
            values: self.values.slice(s![t0..t1, .., .., ..]).to_owned(),
        })
    }

    /// Area-mean block pooling of every frame by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Dataset> {
        let (h, w) = self.grid_dims();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "grid {h}x{w} not divisible by downsample factor {factor}"
            )));
        }
        let (t, c) = (self.n_steps(), self.channels());
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Array4::<f64>::zeros((t, c, ho, wo));
        for ti in 0..t {
            for ci in 0..c {
                let plane = self.values.slice(s![ti, ci, .., ..]);
                out.slice_mut(s![ti, ci, .., ..])
                    .assign(&block_mean(&plane, factor));
            }
        }
        // latitude centers of each block = mean of member row latitudes
        let lats = (0..ho)
            .map(|j| {
                self.latitudes[j * factor..(j + 1) * factor].iter().sum::<f64>()
                    / factor as f64
            })
            .collect();
        let lons = (0..wo)
            .map(|i| {
                self.longitudes[i * factor..(i + 1) * factor].iter().sum::<f64>()
                    / factor as f64
            })
            .collect();
        Ok(Dataset {
            catalog: self.catalog.clone(),
            latitudes: lats,
            longitudes: lons,
            start: self.start,
            interval_hours: self.interval_hours,
            values: out,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.values.dim();
        let meta = DatasetMeta {
            format: "skydiff-dataset".to_string(),
            version: 1,
            dims: [d.0, d.1, d.2, d.3],
            catalog: self.catalog.clone(),
            latitudes: self.latitudes.clone(),
            longitudes: self.longitudes.clone(),
            start: self.start,
            interval_hours: self.interval_hours,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in self.values.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = fs::File::create(dir.join("data.bin"))?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let meta: DatasetMeta =
            serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        if meta.format != "skydiff-dataset" || meta.version != 1 {
            return Err(Error::Format(format!(
                "unsupported dataset container {}/{}",
                meta.format, meta.version
            )));
        }
        let [t, c, h, w] = meta.dims;
        let mut bytes = Vec::new();
        fs::File::open(dir.join("data.bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() != t * c * h * w * 4 {
            return Err(Error::Format(format!(
                "data.bin has {} bytes, expected {}",
                bytes.len(),
                t * c * h * w * 4
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let values = Array4::from_shape_vec((t, c, h, w), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Dataset {
            catalog: meta.catalog,
            latitudes: meta.latitudes,
            longitudes: meta.longitudes,
            start: meta.start,
            interval_hours: meta.interval_hours,
            values,
        })
    }
}

/// Area-mean pooling over factor x factor blocks.
pub fn block_mean(plane: &ArrayView2<f64>, factor: usize) -> Array2<f64> {
    let (h, w) = plane.dim();
    assert!(factor > 0 && h % factor == 0 && w % factor == 0);
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Array2::<f64>::zeros((ho, wo));
    let norm = 1.0 / (factor * factor) as f64;
    for j in 0..ho {
        for i in 0..wo {
            let mut acc = 0.0;
            for dj in 0..factor {
                for di in 0..factor {
                    acc += plane[[j * factor + dj, i * factor + di]];
                }
            }
            out[[j, i]] = acc * norm;
        }
    }
    out
}

/// Block-mean downsampling of one grid; channel-wise global mean preserved.
pub fn downsample(hr: &FieldGrid, factor: usize) -> Result<FieldGrid> {
    let (c, h, w) = hr.values.dim();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "grid {h}x{w} not divisible by downsample factor {factor}"
        )));
    }
    let mut out = Array3::<f64>::zeros((c, h / factor, w / factor));
    for ch in 0..c {
        out.index_axis_mut(Axis(0), ch)
            .assign(&block_mean(&hr.channel(ch), factor));
    }
    let lats = (0..h / factor)
        .map(|j| hr.latitudes[j * factor..(j + 1) * factor].iter().sum::<f64>() / factor as f64)
        .collect();
    let lons = (0..w / factor)
        .map(|i| hr.longitudes[i * factor..(i + 1) * factor].iter().sum::<f64>() / factor as f64)
        .collect();
    FieldGrid::new(out, lats, lons, hr.valid_time)
}

/// One training/evaluation sample: low-res history, low-res targets over the
/// horizon, and the aligned high-res targets.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub history: Vec<FieldGrid>,
    pub lr_targets: Vec<FieldGrid>,
    pub hr_targets: Vec<FieldGrid>,
}

impl SamplePair {
    /// Validate temporal alignment and grid-dimension invariants.
    pub fn check_invariants(&self, interval_hours: i64, sr_factor: usize) -> Result<()> {
        let mut times: Vec<DateTime<Utc>> = self
            .history
            .iter()
            .chain(self.lr_targets.iter())
            .map(|f| f.valid_time)
            .collect();
        for pair in times.windows(2) {
            if pair[1] - pair[0] != Duration::hours(interval_hours) {
                return Err(Error::data("sample-pair frames not evenly spaced"));
            }
        }
        times.clear();
        for (lr, hr) in self.lr_targets.iter().zip(&self.hr_targets) {
            if lr.valid_time != hr.valid_time {
                return Err(Error::data("lr/hr target valid times differ"));
            }
            if hr.lat_len() != lr.lat_len() * sr_factor || hr.lon_len() != lr.lon_len() * sr_factor
            {
                return Err(Error::shape("hr dims must be lr dims x sr factor"));
            }
        }
        Ok(())
    }
}

/// Paired low/high-resolution view of a high-res dataset, the unit both
/// training stages consume. The low-res side is the block-mean of the
/// high-res side, computed once.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub hr: Dataset,
    pub lr: Dataset,
    pub history: usize,
    pub horizon: usize,
    pub sr_factor: usize,
}

impl PairedDataset {
    pub fn new(hr: Dataset, history: usize, horizon: usize, sr_factor: usize) -> Result<Self> {
        if history == 0 || horizon == 0 {
            return Err(Error::config("history and horizon must be >= 1"));
        }
        let lr = hr.downsample(sr_factor)?;
        let ds = PairedDataset { hr, lr, history, horizon, sr_factor };
        if ds.n_samples() == 0 {
            log::warn!(
                "dataset of {} steps too short for history {} + horizon {}: no sample pairs",
                ds.hr.n_steps(),
                history,
                horizon
            );
        }
        Ok(ds)
    }

    /// Number of sample pairs (start offsets).
    pub fn n_samples(&self) -> usize {
        let need = self.history + self.horizon;
        if self.hr.n_steps() >= need {
            self.hr.n_steps() - need + 1
        } else {
            0
        }
    }

    /// Time-step indices referenced by sample `i` (history + targets).
    pub fn sample_steps(&self, i: usize) -> std::ops::Range<usize> {
        i..i + self.history + self.horizon
    }

    /// Assemble sample `i`.
    pub fn sample(&self, i: usize) -> SamplePair {
        assert!(i < self.n_samples());
        let history = (i..i + self.history).map(|t| self.lr.frame(t)).collect();
        let lr_targets = (i + self.history..i + self.history + self.horizon)
            .map(|t| self.lr.frame(t))
            .collect();
        let hr_targets = (i + self.history..i + self.history + self.horizon)
            .map(|t| self.hr.frame(t))
            .collect();
        SamplePair { history, lr_targets, hr_targets }
    }

    pub fn iter(&self) -> impl Iterator<Item = SamplePair> + '_ {
        (0..self.n_samples()).map(|i| self.sample(i))
    }
}

/// Sample pairs over a high-res dataset; insufficient length yields an empty
/// iterator (with a warning logged by [`PairedDataset::new`]).
pub fn make_sample_pairs(
    hr: &Dataset,
    history: usize,
    horizon: usize,
    interval_hours: i64,
    sr_factor: usize,
) -> Result<PairedDataset> {
    if hr.interval_hours != interval_hours {
        return Err(Error::data(format!(
            "dataset interval {}h != requested {}h",
            hr.interval_hours, interval_hours
        )));
    }
    PairedDataset::new(hr.clone(), history, horizon, sr_factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::field::{cell_center_latitudes, uniform_longitudes};
    use ndarray::Array4;

    fn toy_dataset(t: usize, c: usize, h: usize, w: usize) -> Dataset {
        let values =
            Array4::from_shape_fn((t, c, h, w), |(ti, ci, j, i)| {
                (ti * 1000 + ci * 100 + j * 10 + i) as f64
            });
        Dataset {
            catalog: VariableCatalog::build("desk").unwrap(),
            latitudes: cell_center_latitudes(h),
            longitudes: uniform_longitudes(w),
            start: "2000-01-01T00:00:00Z".parse().unwrap(),
            interval_hours: 6,
            values,
        }
    }

    #[test]
    fn block_mean_checkerboard() {
        let mut plane = Array2::<f64>::zeros((4, 4));
        for j in 0..4 {
            for i in 0..4 {
                plane[[j, i]] = ((i + j) % 2) as f64;
            }
        }
        let out = block_mean(&plane.view(), 2);
        for v in out.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_identity_and_constant() {
        let g = FieldGrid::new(
            Array3::from_elem((2, 4, 8), 7.25),
            cell_center_latitudes(4),
            uniform_longitudes(8),
            Utc::now(),
        )
        .unwrap();
        let same = downsample(&g, 1).unwrap();
        assert_eq!(same.values, g.values);
        let lo = downsample(&g, 2).unwrap();
        assert!(lo.values.iter().all(|v| (v - 7.25).abs() < 1e-15));
    }

    #[test]
    fn downsample_rejects_nondivisible() {
        let g = FieldGrid::new(
            Array3::zeros((1, 6, 8)),
            cell_center_latitudes(6),
            uniform_longitudes(8),
            Utc::now(),
        )
        .unwrap();
        assert!(downsample(&g, 4).is_err());
    }

    #[test]
    fn pair_counts_match_protocol() {
        // 26 steps exactly fit 6 history + 20 horizon -> 1 pair
        let ds = toy_dataset(26, 8, 8, 16);
        let pd = PairedDataset::new(ds, 6, 20, 2).unwrap();
        assert_eq!(pd.n_samples(), 1);
        // 25 steps -> none
        let ds = toy_dataset(25, 8, 8, 16);
        let pd = PairedDataset::new(ds, 6, 20, 2).unwrap();
        assert_eq!(pd.n_samples(), 0);
        assert_eq!(pd.iter().count(), 0);
    }

    #[test]
    fn sample_pair_invariants_hold() {
        let ds = toy_dataset(12, 8, 8, 16);
        let pd = PairedDataset::new(ds, 3, 4, 2).unwrap();
        assert_eq!(pd.n_samples(), 6);
        for pair in pd.iter() {
            pair.check_invariants(6, 2).unwrap();
        }
    }

    #[test]
    fn train_split_never_references_eval_steps() {
        let ds = toy_dataset(30, 8, 8, 16);
        let split = 20;
        let train = ds.time_slice(0, split).unwrap();
        let pd = PairedDataset::new(train, 3, 4, 2).unwrap();
        // exhaustive audit over emitted pairs
        for i in 0..pd.n_samples() {
            let steps = pd.sample_steps(i);
            assert!(steps.end <= split, "pair {i} references step >= {split}");
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(3, 8, 4, 8);
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.n_steps(), 3);
        assert_eq!(back.catalog.channels(), 8);
        assert_eq!(back.interval_hours, 6);
        // f32 storage: equal to f32 precision
        for (a, b) in ds.values.iter().zip(back.values.iter()) {
            assert!((a - b).abs() <= (*a as f32).abs() as f64 * 1e-6 + 1e-6);
        }
    }
}
