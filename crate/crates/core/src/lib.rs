//! Supervised contrastive learning with sigmoid pair losses and learnable
//! decision boundaries over partitioned (common/style) embeddings.
//!
//! The crate covers the loss family (SupCon, CS-SupCon, SCS-SupCon), a small
//! MLP encoder with a projection head, a synthetic content/style data
//! generator, the two-stage training pipeline and the rank-based statistics
//! used to compare methods.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fixtures;
pub mod losses;
pub mod math;
pub mod model;
pub mod stats;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use losses::{
    BoundaryParams, EmbeddingBatch, FieldNormalization, FieldPartition, LossKind, LossOutput,
    PairLabelMatrix, ScalarHypers,
};
pub use data::{Dataset, SyntheticSpec};
pub use math::{Matrix, SeededRng};
pub use model::{Checkpoint, LinearClassifier, ModelState};
pub use stats::{AccuracyMatrix, AccuracyUnit};
pub use training::{TrainConfig, Trajectory, TrainedRun};
