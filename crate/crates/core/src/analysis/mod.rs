//! Post-hoc analysis: spectral identities of the partitioned aggregation and
//! gradient-based neighbor influence.

pub mod influence;
pub mod spectral;

pub use influence::{
    influence, influence_csv, influence_histogram, influence_linear_check, HistBin,
    InfluenceReport, NodeInfluence,
};
pub use spectral::{
    eigendecompose, k_matrix, mask_matrices, normalized_adjacency, normalized_laplacian,
    spatial_spectral_check, spectral_csv, FilterResponse, SpectralReport, DENSE_CAP,
};
