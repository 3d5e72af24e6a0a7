//! Distributionally robust pair weighting for deep metric learning.
//!
//! The crate treats metric learning over a mini-batch as pairwise binary
//! classification: all ordered pairs are built from the batch labels, a
//! simple pairwise loss is evaluated on each, and a robust overall loss is
//! obtained by maximizing the weighted pair loss over an uncertainty set
//! for the weight vector. The maximizing weights have closed forms for
//! every supported set; they drive pair sampling and the subgradient used
//! by the SGD trainer. Reference implementations of the lifted-structure,
//! multi-similarity, and exponential point-to-set weightings make the
//! solver equivalences executable, and slow oracle maximizers verify each
//! closed form numerically.

pub mod batch;
pub mod config;
pub mod dataset;
pub mod dro;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod model;
pub mod oracle;
pub mod pairs;
pub mod recovery;
pub mod weights;

pub use batch::{similarity, EmbeddingBatch, SimilarityMatrix};
pub use config::{DroConfig, DroVariant, LossKind, TrainMethod};
pub use dataset::{gen_synthetic, Dataset};
pub use error::{Error, Result};
pub use eval::{imbalance_sweep, pair_ratio, recall_at_k, SweepRow};
pub use losses::{binomial_loss, loss_matrix, margin_loss, PairLossMatrix};
pub use model::{backward, forward, sample_batch, train, EmbeddingModel, TrainConfig, TrainHistory};
pub use pairs::{build_pair_system, PairSystem};
pub use weights::{WeightAssignment, WeightFlavor};
