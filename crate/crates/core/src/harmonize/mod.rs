//! Aligning a source table with a target table: column matching scored by
//! transport distance, per-column affine and quantile transforms, label-space
//! reconciliation and the distances that document the result.

mod assignment;
mod classes;
mod kernel;
mod mapping;
mod quantile;
mod report;
mod transport;

pub use assignment::{assignment_weight, exhaustive_assignment, hungarian_assignment, max_weight_assignment};
pub use classes::{class_align, ClassMap, ClassMatch, ClassWarning};
pub use kernel::{
    equalize_samples, gaussian_gram, gram_matrix, kernel_distance, median_pairwise_distance, BandwidthMode,
    KernelConfig,
};
pub use mapping::{
    assignment_transport_distance, column_affinity, mapping_objective, parse_mapping_file, search_feature_mapping,
    write_mapping_file, Affine, AffinityWeights, ColumnProfile, ColumnTransform, FeatureMapping, MappingSearchConfig,
    MatchedColumn,
};
pub use quantile::{quantile_transform, QuantileMap, QUANTILE_LEVELS};
pub use report::{harmonize_dataset, FeatureDistance, HarmonizationReport, HarmonizeSettings};
pub use transport::{euclidean_cost, pooled_wasserstein, sinkhorn, wasserstein_1d, SinkhornParams, TransportPlan};

use crate::kv::KvError;

#[derive(Debug, thiserror::Error)]
pub enum HarmonizeError {
    #[error("input contains NaN or infinite values")]
    NonFiniteInput,
    #[error("sample shapes differ: source {source_shape:?}, target {target_shape:?}")]
    SizeMismatch {
        source_shape: (usize, usize),
        target_shape: (usize, usize),
    },
    #[error("empty sample")]
    EmptySample,
    #[error("marginals must be non-negative and sum to 1")]
    InvalidMarginal,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("sinkhorn potentials underflowed at epsilon {epsilon}; raise epsilon")]
    NumericalUnderflow { epsilon: f64 },
    #[error("invalid mapping: {0}")]
    InvalidMapping(String),
    #[error("no source/target column pair reaches the affinity floor {floor}")]
    NoFeasibleMapping { floor: f64 },
    #[error("mapping file: {0}")]
    Parse(#[from] KvError),
}
