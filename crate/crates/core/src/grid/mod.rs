//! Gridded data model: fields, variable catalog, normalization, synthetic
//! generation, dataset containers and LR/HR sample pairing.

pub mod catalog;
pub mod dataset;
pub mod field;
pub mod synthetic;

pub use catalog::{
    compute_normalization_stats, denormalize, normalize, Level, NormStats, VariableCatalog,
    VariableSpec,
};
pub use dataset::{
    block_mean, downsample, make_sample_pairs, Dataset, PairedDataset, SamplePair,
};
pub use field::{cell_center_latitudes, uniform_longitudes, FieldGrid};
pub use synthetic::{generate_synthetic_dataset, SyntheticConfig};

/// Build a catalog from a named profile ("paper71" or "desk").
pub fn build_variable_catalog(profile: &str) -> crate::Result<VariableCatalog> {
    VariableCatalog::build(profile)
}
