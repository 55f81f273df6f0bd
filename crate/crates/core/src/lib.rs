//! Targeted data selection by optimal transport in a whitened gradient
//! feature space.
//!
//! The pipeline runs [`metric`] (projection, whitening, normalization), then
//! [`selection`] (nearest-neighbor expansion ranked or stopped by [`ot`]),
//! then [`weighting`]. [`attribution`] holds the influence-scoring and LDS
//! evaluation harness; [`pipeline`] wires it all to configs and files, and
//! [`api`] exposes the same runs over in-memory arrays.

pub mod api;
pub mod attribution;
mod digest;
pub mod error;
pub mod features;
mod linalg;
pub mod metric;
pub mod ot;
pub mod pipeline;
pub mod selection;
pub mod weighting;

pub use attribution::{AttributionScores, LdsReport, ScoreMethod, SubsetArchive, WhiteningScope};
pub use error::{Error, ErrorKind, Result};
pub use features::{DatasetManifest, Dtype, FeatureMatrix, Role};
pub use metric::{
    MetricSpace, ProjectionFamily, ProjectionSpec, WhitenedFeatures, WhiteningMethod, WhiteningTransform,
};
pub use ot::{CostMatrix, Coupling, MassVector, SinkhornOptions, Solver, TransportPlan};
pub use pipeline::{RunConfig, Stage, StageError};
pub use selection::{NeighborTable, OtmOptions, SelectionResult, SplitMode};
pub use weighting::{RepetitionMode, WeightAssignment};
