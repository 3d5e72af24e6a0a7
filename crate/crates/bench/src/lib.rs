//! Shared fixtures for the solver and training benchmarks.

use drodml::batch::{similarity, EmbeddingBatch, SimilarityMatrix};
use drodml::config::DroConfig;
use drodml::dataset::gen_synthetic;
use drodml::losses::{loss_matrix, PairLossMatrix};
use drodml::pairs::{build_pair_system, PairSystem};
use drodml::LossKind;

/// A ready-to-solve batch of the given size (classes of 5, margin losses).
pub struct SolverFixture {
    pub sim: SimilarityMatrix,
    pub pairs: PairSystem,
    pub losses: PairLossMatrix,
}

pub fn solver_fixture(batch_size: usize) -> SolverFixture {
    let ds = gen_synthetic(batch_size / 5, 5, 16, 0.5, 0).expect("synthetic data");
    let batch = EmbeddingBatch::from_raw(
        ds.features.clone(),
        ds.features.clone(),
        ds.labels.clone(),
    )
    .expect("batch");
    let sim = similarity(&batch).expect("similarity");
    let pairs = build_pair_system(&batch.labels, false).expect("pairs");
    let losses =
        loss_matrix(&sim, &pairs, &DroConfig::default(), LossKind::Margin).expect("losses");
    SolverFixture { sim, pairs, losses }
}
