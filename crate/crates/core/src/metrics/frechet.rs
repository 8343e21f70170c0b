//! Fréchet distance between feature distributions, over a frozen,
//! seed-fixed convolutional feature network.
//!
//! The feature network is a deterministic surrogate for a pretrained
//! backbone: three strided convolutions with fixed random weights over six
//! configured variables, tanh nonlinearities, then global mean pooling.
//! Absolute distances are not comparable to any published backbone; relative
//! orderings between methods on the same data are what the evaluation uses.

use ndarray::{Array1, Array2, Array4, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::grid::{FieldGrid, VariableCatalog};
use crate::tensor::conv::{conv2d_fwd, Conv2dCfg};
use crate::tensor::params::randn;

/// Frozen random convolutional feature network.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    /// Channel keys fed to the network, in order.
    pub channels: Vec<String>,
    pub seed: u64,
    pub out_dim: usize,
    layers: Vec<(Array4<f64>, Array1<f64>)>,
}

impl FeatureExtractor {
    /// Default six-variable extractor with a 256-dim output.
    pub fn default_six(seed: u64) -> Self {
        let keys = ["z500", "t850", "t2m", "tp", "u10", "v10"];
        Self::new(keys.iter().map(|s| s.to_string()).collect(), seed, 256)
    }

    pub fn new(channels: Vec<String>, seed: u64, out_dim: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let widths = [channels.len(), 32, 64, out_dim];
        let mut layers = Vec::new();
        for i in 0..3 {
            let (cin, cout) = (widths[i], widths[i + 1]);
            let w = randn(&mut rng, &[cout, cin, 3, 3], (2.0 / (cin as f64 * 9.0)).sqrt())
                .into_dimensionality()
                .unwrap();
            let b = randn(&mut rng, &[cout], 0.5).into_dimensionality().unwrap();
            layers.push((w, b));
        }
        FeatureExtractor { channels, seed, out_dim, layers }
    }

    /// Feature vector for one grid. Channels are z-scored with the catalog
    /// stats before the convolution stack.
    pub fn features(&self, grid: &FieldGrid, catalog: &VariableCatalog) -> Result<Array1<f64>> {
        let stats = catalog.normalization()?;
        let (h, w) = (grid.lat_len(), grid.lon_len());
        let mut x = ndarray::Array3::<f64>::zeros((self.channels.len(), h, w));
        for (i, key) in self.channels.iter().enumerate() {
            let ch = catalog.index_of(key)?;
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            let plane = grid.channel(ch);
            x.index_axis_mut(Axis(0), i)
                .assign(&plane.mapv(|v| (v - m) / s));
        }
        let cfg = Conv2dCfg::down(3);
        for (wts, bias) in &self.layers {
            x = conv2d_fwd(&x.view(), &wts.view(), Some(bias), &cfg);
            x.mapv_inplace(f64::tanh);
        }
        // global mean pool
        let c = x.dim().0;
        let mut out = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            out[ch] = plane.sum() / plane.len() as f64;
        }
        Ok(out)
    }
}

/// One feature vector per grid; deterministic in (extractor, inputs).
pub fn extract_features(
    grids: &[FieldGrid],
    fe: &FeatureExtractor,
    catalog: &VariableCatalog,
) -> Result<Array2<f64>> {
    if grids.is_empty() {
        return Err(Error::data("no grids to extract features from"));
    }
    let mut out = Array2::<f64>::zeros((grids.len(), fe.out_dim));
    for (i, g) in grids.iter().enumerate() {
        out.row_mut(i).assign(&fe.features(g, catalog)?);
    }
    Ok(out)
}

/// Ridge added to both covariances before the matrix square root.
pub const COV_RIDGE: f64 = 1e-6;

fn mean_and_cov(x: &ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let (n, d) = x.dim();
    let mean = x.sum_axis(Axis(0)) / n as f64;
    let mut cov = Array2::<f64>::zeros((d, d));
    for row in x.axis_iter(Axis(0)) {
        let c = &row - &mean;
        for i in 0..d {
            for j in i..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1).max(1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[[i, j]] /= denom;
            cov[[j, i]] = cov[[i, j]];
        }
        cov[[i, i]] += COV_RIDGE;
    }
    (mean, cov)
}

fn to_na(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    let (r, c) = m.dim();
    nalgebra::DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

/// Symmetric PSD square root via eigendecomposition; tiny negative
/// eigenvalues from roundoff are clamped to zero.
fn sym_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = eig.eigenvectors;
    &q * nalgebra::DMatrix::from_diagonal(&vals) * q.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets
/// ([n_a, d] and [n_b, d]):
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2).
pub fn frechet_distance(features_a: &ArrayView2<f64>, features_b: &ArrayView2<f64>) -> Result<f64> {
    if features_a.dim().0 < 2 || features_b.dim().0 < 2 {
        return Err(Error::data("frechet_distance needs at least 2 samples per set"));
    }
    if features_a.dim().1 != features_b.dim().1 {
        return Err(Error::shape("feature dimensions differ"));
    }
    let (mu_a, cov_a) = mean_and_cov(features_a);
    let (mu_b, cov_b) = mean_and_cov(features_b);

    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();

    let sa = to_na(&cov_a);
    let sb = to_na(&cov_b);
    let sa_sqrt = sym_sqrt(&sa);
    let inner = &sa_sqrt * &sb * &sa_sqrt;
    // inner is symmetric PSD up to roundoff; symmetrize before the sqrt
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sym_sqrt(&inner);

    let trace_term = sa.trace() + sb.trace() - 2.0 * cross.trace();
    let d = mean_term + trace_term;
    if !d.is_finite() {
        return Err(Error::Numerical("non-finite Fréchet distance".into()));
    }
    // exact-zero case can round slightly negative
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::field::{cell_center_latitudes, uniform_longitudes};
    use crate::grid::NormStats;
    use chrono::Utc;
    use ndarray::Array3;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn desk_catalog_with_stats() -> VariableCatalog {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let c = cat.channels();
        cat.set_normalization(NormStats { mean: vec![0.0; c], std: vec![1.0; c] })
            .unwrap();
        cat
    }

    fn random_grid(rng: &mut impl Rng, c: usize, h: usize, w: usize) -> FieldGrid {
        FieldGrid::new(
            Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0)),
            cell_center_latitudes(h),
            uniform_longitudes(w),
            Utc::now(),
        )
        .unwrap()
    }

    #[test]
    fn features_deterministic_and_sized() {
        let cat = desk_catalog_with_stats();
        let fe = FeatureExtractor::default_six(99);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, cat.channels(), 16, 32);
        let f1 = fe.features(&g, &cat).unwrap();
        let f2 = fe.features(&g, &cat).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.len(), 256);
    }

    #[test]
    fn distinct_grids_give_distinct_features() {
        let cat = desk_catalog_with_stats();
        let fe = FeatureExtractor::default_six(99);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a = random_grid(&mut rng, cat.channels(), 16, 32);
        let b = random_grid(&mut rng, cat.channels(), 16, 32);
        let fa = fe.features(&a, &cat).unwrap();
        let fb = fe.features(&b, &cat).unwrap();
        assert_ne!(fa, fb);
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let x = Array2::from_shape_fn((20, 4), |_| rng.gen_range(-1.0..1.0));
        let d = frechet_distance(&x.view(), &x.view()).unwrap();
        assert!(d < 1e-6, "distance {d}");
    }

    #[test]
    fn symmetric_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Array2::from_shape_fn((30, 5), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((25, 5), |_| rng.gen_range(-0.5..1.5));
        let dab = frechet_distance(&a.view(), &b.view()).unwrap();
        let dba = frechet_distance(&b.view(), &a.view()).unwrap();
        assert!((dab - dba).abs() < 1e-8);
        assert!(dab >= 0.0);
    }

    #[test]
    fn matches_closed_form_1d_gaussian() {
        // N(0,1) vs N(1,1): closed form (mu diff)^2 + (sigma diff)^2 = 1
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let n0 = Normal::new(0.0, 1.0).unwrap();
        let n1 = Normal::new(1.0, 1.0).unwrap();
        let n = 100_000;
        let a = Array2::from_shape_fn((n, 1), |_| n0.sample(&mut rng));
        let b = Array2::from_shape_fn((n, 1), |_| n1.sample(&mut rng));
        let d = frechet_distance(&a.view(), &b.view()).unwrap();
        assert!((d - 1.0).abs() < 0.05, "distance {d}");
    }

    #[test]
    fn too_few_samples_error() {
        let x = Array2::<f64>::zeros((1, 3));
        let y = Array2::<f64>::zeros((5, 3));
        assert!(frechet_distance(&x.view(), &y.view()).is_err());
    }

    #[test]
    fn missing_channel_errors() {
        let mut cat = VariableCatalog::build("desk").unwrap();
        let c = cat.channels();
        cat.set_normalization(NormStats { mean: vec![0.0; c], std: vec![1.0; c] })
            .unwrap();
        let fe = FeatureExtractor::new(vec!["z500".into(), "nope".into()], 1, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = random_grid(&mut rng, c, 16, 32);
        assert!(fe.features(&g, &cat).is_err());
    }
}
