//! Retrieval metrics and the imbalance-sensitivity experiment.

use ndarray::Array2;

use crate::config::{DroConfig, DroVariant, TrainMethod};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{train, TrainConfig};
use crate::pairs::PairSystem;

/// recall@k over unit-norm embedding rows: a query succeeds when any of
/// its k nearest neighbors (self excluded, similarity ties broken by lower
/// index) shares its class.
pub fn recall_at_k(
    embeddings: &Array2<f64>,
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let n = embeddings.nrows();
    if n < 2 || labels.len() != n {
        return Err(Error::InvalidBatch(format!(
            "recall needs at least 2 labeled examples, got {n}"
        )));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::Config(format!(
                "recall@k needs 0 < k < {n}, got {k}"
            )));
        }
    }
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut successes = vec![0usize; ks.len()];
    for i in 0..n {
        let query = embeddings.row(i);
        let mut neighbors: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, query.dot(&embeddings.row(j))))
            .collect();
        neighbors.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("similarities must not be NaN")
                .then(a.0.cmp(&b.0))
        });
        let mut hit_rank = None;
        for (rank, &(j, _)) in neighbors.iter().take(max_k).enumerate() {
            if labels[j] == labels[i] {
                hit_rank = Some(rank);
                break;
            }
        }
        if let Some(rank) = hit_rank {
            for (slot, &k) in ks.iter().enumerate() {
                if rank < k {
                    successes[slot] += 1;
                }
            }
        }
    }
    Ok(ks
        .iter()
        .zip(&successes)
        .map(|(&k, &s)| (k, s as f64 / n as f64))
        .collect())
}

/// Positive-to-negative pair count ratio P/N.
pub fn pair_ratio(pairs: &PairSystem) -> Result<f64> {
    let n = pairs.neg_count();
    if n == 0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(pairs.pos_count() as f64 / n as f64)
}

/// One imbalance-sweep measurement.
#[derive(Debug, Clone)]
pub struct SweepRow {
    /// Realized batch size (requested size capped by available classes).
    pub batch_size: usize,
    /// Positive-negative pair ratio of a class-balanced batch that size.
    pub ratio: f64,
    pub method: TrainMethod,
    pub recall1: f64,
}

/// The methods compared by the sweep, in reporting order.
pub fn sweep_methods() -> Vec<TrainMethod> {
    vec![
        TrainMethod::Dro(DroVariant::Avg),
        TrainMethod::Semihard,
        TrainMethod::Dws,
        TrainMethod::Dro(DroVariant::TopK),
        TrainMethod::Dro(DroVariant::TopKPn),
        TrainMethod::Dro(DroVariant::Kl),
    ]
}

/// Train every method at every batch size and record held-out recall@1.
///
/// Batch sizes are realized as (B / M) classes of M instances; when the
/// dataset has fewer classes the batch shrinks to all of them. The top-K
/// budget follows the realized batch size as K = 2B.
pub fn imbalance_sweep(
    dataset: &Dataset,
    base_cfg: &TrainConfig,
    batch_sizes: &[usize],
) -> Result<Vec<SweepRow>> {
    let m = base_cfg.instances_per_class;
    let available = dataset.class_count();
    let mut rows = Vec::new();
    for &requested in batch_sizes {
        let classes = (requested / m).max(2).min(available);
        let batch_size = classes * m;
        let ratio = (m - 1) as f64 / (batch_size - m) as f64;
        for method in sweep_methods() {
            let cfg = TrainConfig {
                classes_per_batch: classes,
                method,
                dro: DroConfig {
                    k: 2 * batch_size,
                    ..base_cfg.dro.clone()
                },
                ..base_cfg.clone()
            };
            let (_, history) = train(dataset, &cfg)?;
            let recall1 = history.epochs.last().map_or(0.0, |e| e.recall1);
            rows.push(SweepRow {
                batch_size,
                ratio,
                method,
                recall1,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::normalize_rows;
    use crate::dataset::gen_synthetic;
    use crate::pairs::build_pair_system;
    use ndarray::array;

    #[test]
    fn tight_clusters_have_perfect_recall() {
        let raw = array![
            [1.0, 0.01],
            [1.0, -0.01],
            [-1.0, 0.01],
            [-1.0, -0.01]
        ];
        let emb = normalize_rows(raw);
        let recall = recall_at_k(&emb, &[0, 0, 1, 1], &[1]).unwrap();
        assert_eq!(recall[0], (1, 1.0));
    }

    #[test]
    fn all_distinct_labels_recall_zero() {
        let ds = gen_synthetic(4, 1, 5, 0.0, 3).unwrap();
        let emb = normalize_rows(ds.features);
        for k in [1, 2, 3] {
            let recall = recall_at_k(&emb, &[0, 1, 2, 3], &[k]).unwrap();
            assert_eq!(recall[0].1, 0.0);
        }
    }

    #[test]
    fn recall_non_decreasing_in_k() {
        let ds = gen_synthetic(4, 5, 6, 0.6, 8).unwrap();
        let emb = normalize_rows(ds.features);
        let ks: Vec<usize> = (1..10).collect();
        let recalls = recall_at_k(&emb, &ds.labels, &ks).unwrap();
        for pair in recalls.windows(2) {
            assert!(pair[1].1 >= pair[0].1);
        }
    }

    #[test]
    fn recall_rejects_large_k() {
        let ds = gen_synthetic(2, 2, 3, 0.1, 0).unwrap();
        let emb = normalize_rows(ds.features);
        assert!(recall_at_k(&emb, &ds.labels, &[4]).is_err());
    }

    #[test]
    fn recall_is_permutation_invariant() {
        let ds = gen_synthetic(3, 6, 5, 0.5, 13).unwrap();
        let emb = normalize_rows(ds.features.clone());
        let base = recall_at_k(&emb, &ds.labels, &[1, 3]).unwrap();

        // reverse order (no exact similarity ties in random data)
        let n = ds.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut pemb = Array2::zeros((n, 5));
        let mut plabels = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            for c in 0..5 {
                pemb[(new, c)] = emb[(old, c)];
            }
            plabels[new] = ds.labels[old];
        }
        let permuted = recall_at_k(&pemb, &plabels, &[1, 3]).unwrap();
        assert_eq!(base, permuted);
    }

    #[test]
    fn ratio_matches_published_batch_arithmetic() {
        // class-balanced batches of M = 5: 80 examples over 16 classes and
        // 160 over 32; ratios round to 0.053 and 0.026
        let labels80: Vec<usize> = (0..80).map(|i| i / 5).collect();
        let pairs = build_pair_system(&labels80, false).unwrap();
        assert_eq!(pairs.pos_count(), 320);
        assert_eq!(pairs.neg_count(), 6000);
        let r80 = pair_ratio(&pairs).unwrap();
        assert!((r80 - 0.053).abs() < 5e-4);

        let labels160: Vec<usize> = (0..160).map(|i| i / 5).collect();
        let pairs = build_pair_system(&labels160, false).unwrap();
        let r160 = pair_ratio(&pairs).unwrap();
        assert!((r160 - 0.026).abs() < 5e-4);
    }

    #[test]
    fn ratio_closed_form_for_balanced_batches() {
        for (classes, m) in [(4usize, 3usize), (6, 5), (10, 2)] {
            let labels: Vec<usize> = (0..classes * m).map(|i| i / m).collect();
            let pairs = build_pair_system(&labels, false).unwrap();
            let b = classes * m;
            let expected = (m - 1) as f64 / (b - m) as f64;
            assert!((pair_ratio(&pairs).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_ratio_is_undefined() {
        let pairs = build_pair_system(&[0, 0, 0], false).unwrap();
        assert!(matches!(pair_ratio(&pairs), Err(Error::UndefinedRatio)));
    }

    #[test]
    fn default_synthetic_geometry_overlaps() {
        // spread 0.5 over 16 dimensions leaves the classes overlapping
        let ds = gen_synthetic(10, 30, 16, 0.5, 0).unwrap();
        let emb = normalize_rows(ds.features);
        let recall = recall_at_k(&emb, &ds.labels, &[1]).unwrap();
        assert!(recall[0].1 < 1.0, "raw-feature recall should be imperfect");
        assert!(recall[0].1 > 0.1, "but well above chance");
    }

    #[test]
    fn sweep_emits_one_row_group_per_batch_size() {
        let ds = gen_synthetic(4, 10, 4, 0.1, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.2,
            embed_dim: 4,
            ..TrainConfig::default()
        };
        let rows = imbalance_sweep(&ds, &cfg, &[20]).unwrap();
        assert_eq!(rows.len(), sweep_methods().len());
        assert!(rows.iter().all(|r| r.batch_size == 20));
        assert!(rows.iter().all(|r| (r.ratio - 4.0 / 15.0).abs() < 1e-12));
    }

    #[test]
    fn sweep_on_separable_data_is_uninformative() {
        // every method solves an easy task perfectly
        let ds = gen_synthetic(4, 10, 6, 0.02, 6).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            learning_rate: 0.2,
            embed_dim: 4,
            ..TrainConfig::default()
        };
        let rows = imbalance_sweep(&ds, &cfg, &[10]).unwrap();
        for row in rows {
            assert_eq!(
                row.recall1,
                1.0,
                "{} reached only {}",
                row.method.name(),
                row.recall1
            );
        }
    }
}
