//! Embedding model, analytic backward pass, and the SGD training loop.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::batch::{similarity, EmbeddingBatch};
use crate::config::{DroConfig, LossKind, TrainMethod};
use crate::dataset::Dataset;
use crate::dro;
use crate::error::{Error, Result};
use crate::eval::recall_at_k;
use crate::losses::loss_matrix;
use crate::mining;
use crate::pairs::build_pair_system;

const HOLDOUT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const BATCH_STREAM_BASE: u64 = 16;

/// Fraction of examples held out for per-epoch evaluation.
const HOLDOUT_FRAC: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    OneHidden,
}

/// A small embedding network: one affine map, optionally with a rectified
/// hidden layer, followed by row-wise L2 normalization. No biases.
#[derive(Debug, Clone)]
pub struct EmbeddingModel {
    pub kind: ModelKind,
    /// Linear: embed_dim x input_dim. One-hidden: hidden_dim x input_dim.
    pub w1: Array2<f64>,
    /// One-hidden only: embed_dim x hidden_dim.
    pub w2: Option<Array2<f64>>,
}

impl EmbeddingModel {
    /// Uniform fan-in initialization in [-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(
        input_dim: usize,
        hidden_dim: Option<usize>,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut uniform = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        };
        match hidden_dim {
            None => EmbeddingModel {
                kind: ModelKind::Linear,
                w1: uniform(embed_dim, input_dim),
                w2: None,
            },
            Some(h) => {
                let w1 = uniform(h, input_dim);
                let w2 = uniform(embed_dim, h);
                EmbeddingModel {
                    kind: ModelKind::OneHidden,
                    w1,
                    w2: Some(w2),
                }
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn embed_dim(&self) -> usize {
        match &self.w2 {
            Some(w2) => w2.nrows(),
            None => self.w1.nrows(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.as_ref().map_or(0, |w| w.len())
    }

    /// Parameters as one flat vector, w1 row-major then w2.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat: Vec<f64> = self.w1.iter().copied().collect();
        if let Some(w2) = &self.w2 {
            flat.extend(w2.iter().copied());
        }
        flat
    }

    /// A model of this shape with parameters taken from a flat vector.
    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let n1 = self.w1.len();
        let w1 = Array2::from_shape_vec(self.w1.dim(), flat[..n1].to_vec())
            .expect("flat vector matches w1 shape");
        let w2 = self.w2.as_ref().map(|w2| {
            Array2::from_shape_vec(w2.dim(), flat[n1..].to_vec())
                .expect("flat vector matches w2 shape")
        });
        Self {
            kind: self.kind,
            w1,
            w2,
        }
    }

    /// Flat text serialization: a header naming the architecture, then one
    /// whitespace-separated row per line for each weight matrix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self.kind {
            ModelKind::Linear => out.push_str("kind linear\n"),
            ModelKind::OneHidden => out.push_str("kind one-hidden\n"),
        }
        let mut write_matrix = |name: &str, m: &Array2<f64>| {
            out.push_str(&format!("{name} {} {}\n", m.nrows(), m.ncols()));
            for row in m.rows() {
                let fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                out.push_str(&fields.join(" "));
                out.push('\n');
            }
        };
        write_matrix("w1", &self.w1);
        if let Some(w2) = &self.w2 {
            write_matrix("w2", w2);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let parse_err = |line: usize, message: &str| Error::Parse {
            line: line + 1,
            message: message.to_string(),
        };
        let (ln, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty model file"))?;
        let kind = match header.trim() {
            "kind linear" => ModelKind::Linear,
            "kind one-hidden" => ModelKind::OneHidden,
            other => return Err(parse_err(ln, &format!("unknown header '{other}'"))),
        };
        let mut read_matrix = |expected: &str| -> Result<Array2<f64>> {
            let (ln, shape_line) = lines
                .next()
                .ok_or_else(|| parse_err(0, "missing matrix header"))?;
            let mut parts = shape_line.split_whitespace();
            let name = parts.next().unwrap_or("");
            if name != expected {
                return Err(parse_err(ln, &format!("expected '{expected}', got '{name}'")));
            }
            let rows: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(ln, "bad row count"))?;
            let cols: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| parse_err(ln, "bad column count"))?;
            let mut m = Array2::zeros((rows, cols));
            for r in 0..rows {
                let (ln, row_line) = lines
                    .next()
                    .ok_or_else(|| parse_err(0, "missing matrix row"))?;
                let values: Vec<f64> = row_line
                    .split_whitespace()
                    .map(|f| f.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| parse_err(ln, "bad float"))?;
                if values.len() != cols {
                    return Err(parse_err(ln, "row width mismatch"));
                }
                for (c, v) in values.into_iter().enumerate() {
                    m[(r, c)] = v;
                }
            }
            Ok(m)
        };
        let w1 = read_matrix("w1")?;
        let w2 = match kind {
            ModelKind::Linear => None,
            ModelKind::OneHidden => Some(read_matrix("w2")?),
        };
        Ok(Self { kind, w1, w2 })
    }
}

/// Activations kept from a forward pass for the backward chain.
pub struct ForwardCache {
    /// Row-normalized embeddings.
    pub embeddings: Array2<f64>,
    /// Pre-normalization row norms.
    norms: Vec<f64>,
    /// Post-rectifier hidden activations (one-hidden only).
    hidden: Option<Array2<f64>>,
}

/// Run the model on a matrix of input rows.
pub fn forward(model: &EmbeddingModel, inputs: &Array2<f64>) -> Result<ForwardCache> {
    if inputs.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "inputs have width {}, model expects {}",
            inputs.ncols(),
            model.input_dim()
        )));
    }
    let (hidden, mut z) = match (&model.kind, &model.w2) {
        (ModelKind::Linear, _) => (None, inputs.dot(&model.w1.t())),
        (ModelKind::OneHidden, Some(w2)) => {
            let mut h = inputs.dot(&model.w1.t());
            h.mapv_inplace(|v| v.max(0.0));
            let z = h.dot(&w2.t());
            (Some(h), z)
        }
        (ModelKind::OneHidden, None) => {
            return Err(Error::Shape("one-hidden model without w2".into()))
        }
    };
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in z.rows_mut() {
        let mut norm = row.dot(&row).sqrt();
        if norm < 1e-12 {
            row.mapv_inplace(|v| v + 1e-12);
            norm = row.dot(&row).sqrt();
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok(ForwardCache {
        embeddings: z,
        norms,
        hidden,
    })
}

/// Gradient with the same layout as the model parameters.
#[derive(Debug, Clone)]
pub struct ModelGradient {
    pub g1: Array2<f64>,
    pub g2: Option<Array2<f64>>,
}

impl ModelGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat: Vec<f64> = self.g1.iter().copied().collect();
        if let Some(g2) = &self.g2 {
            flat.extend(g2.iter().copied());
        }
        flat
    }

    pub fn is_finite(&self) -> bool {
        self.g1.iter().all(|v| v.is_finite())
            && self.g2.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Chain per-pair similarity coefficients back to the parameters:
/// grad = sum_k coeff_k dS_{i_k j_k}/dtheta, through the normalization
/// Jacobian (I - f f^T)/||z|| and the affine layers.
pub fn backward(
    model: &EmbeddingModel,
    inputs: &Array2<f64>,
    pairs: &crate::pairs::PairSystem,
    coeffs: &[f64],
) -> Result<ModelGradient> {
    if coeffs.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} pairs",
            coeffs.len(),
            pairs.len()
        )));
    }
    let cache = forward(model, inputs)?;
    let f = &cache.embeddings;
    let n = f.nrows();
    let d = f.ncols();

    // dS_ij/df: coeff * f_j into row i, coeff * f_i into row j
    let mut grad_f = Array2::zeros((n, d));
    for (k, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let (i, j) = pairs.pair(k);
        for col in 0..d {
            grad_f[(i, col)] += c * f[(j, col)];
            grad_f[(j, col)] += c * f[(i, col)];
        }
    }

    // through the normalization
    let mut grad_z = Array2::zeros((n, d));
    for i in 0..n {
        let fi = f.row(i);
        let gi = grad_f.row(i);
        let dot = fi.dot(&gi);
        for col in 0..d {
            grad_z[(i, col)] = (gi[col] - dot * fi[col]) / cache.norms[i];
        }
    }

    match (&model.kind, &model.w2, &cache.hidden) {
        (ModelKind::Linear, _, _) => Ok(ModelGradient {
            g1: grad_z.t().dot(inputs),
            g2: None,
        }),
        (ModelKind::OneHidden, Some(w2), Some(hidden)) => {
            let g2 = grad_z.t().dot(hidden);
            let mut grad_pre = grad_z.dot(w2);
            for ((r, c), v) in grad_pre.indexed_iter_mut() {
                if hidden[(r, c)] <= 0.0 {
                    *v = 0.0;
                }
            }
            Ok(ModelGradient {
                g1: grad_pre.t().dot(inputs),
                g2: Some(g2),
            })
        }
        _ => Err(Error::Shape("one-hidden model without w2".into())),
    }
}

/// Training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub classes_per_batch: usize,
    /// Instances sampled per class (M); at least 2 so positives exist.
    pub instances_per_class: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dro: DroConfig,
    pub loss_kind: LossKind,
    pub method: TrainMethod,
    pub embed_dim: usize,
    /// One-hidden architecture when set.
    pub hidden_dim: Option<usize>,
    pub include_self_pairs: bool,
    pub keep_zero_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            classes_per_batch: 4,
            instances_per_class: 5,
            epochs: 30,
            learning_rate: 0.5,
            seed: 0,
            dro: DroConfig::default(),
            loss_kind: LossKind::Margin,
            method: TrainMethod::Dro(crate::config::DroVariant::TopK),
            embed_dim: 8,
            hidden_dim: None,
            include_self_pairs: false,
            keep_zero_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.instances_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_per_class < 2 {
            return Err(Error::Config(
                "instances_per_class must be at least 2 so positive pairs exist".into(),
            ));
        }
        if self.classes_per_batch == 0 || self.epochs == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "classes_per_batch, epochs and embed_dim must be positive".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// A sampled batch of dataset indices.
#[derive(Debug, Clone)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
    pub warning: Option<String>,
}

/// Draw classes without replacement and M instances per class (with
/// replacement only when a class is too small). Deterministic given
/// (seed, epoch_step).
pub fn sample_batch(dataset: &Dataset, cfg: &TrainConfig, epoch_step: usize) -> SampledBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(BATCH_STREAM_BASE + epoch_step as u64);
    let groups = dataset.class_members();
    let mut warning = None;
    let take_classes = if groups.len() < cfg.classes_per_batch {
        warning = Some(format!(
            "dataset has {} classes, fewer than the {} requested per batch",
            groups.len(),
            cfg.classes_per_batch
        ));
        groups.len()
    } else {
        cfg.classes_per_batch
    };
    let class_picks = rand::seq::index::sample(&mut rng, groups.len(), take_classes);
    let mut indices = Vec::with_capacity(take_classes * cfg.instances_per_class);
    for class_pos in class_picks {
        let members = &groups[class_pos].1;
        let m = cfg.instances_per_class;
        if members.len() >= m {
            for pick in rand::seq::index::sample(&mut rng, members.len(), m) {
                indices.push(members[pick]);
            }
        } else {
            indices.extend(members.iter().copied());
            for _ in members.len()..m {
                let pick = rng.random_range(0..members.len());
                indices.push(members[pick]);
            }
        }
    }
    SampledBatch { indices, warning }
}

/// Loss and held-out recall recorded after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub robust_loss: f64,
    pub recall1: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

fn batch_inputs(dataset: &Dataset, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
    let d = dataset.dim();
    let mut inputs = Array2::zeros((indices.len(), d));
    let mut labels = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        for c in 0..d {
            inputs[(row, c)] = dataset.features[(i, c)];
        }
        labels.push(dataset.labels[i]);
    }
    (inputs, labels)
}

/// One weighting step: solve the configured method on a batch.
fn solve_method(
    method: TrainMethod,
    sim: &crate::batch::SimilarityMatrix,
    losses: &crate::losses::PairLossMatrix,
    pairs: &crate::pairs::PairSystem,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<crate::weights::WeightAssignment> {
    match method {
        TrainMethod::Dro(variant) => {
            let dro_cfg = DroConfig {
                variant,
                ..cfg.dro.clone()
            };
            dro::solve(sim, losses, pairs, &dro_cfg)
        }
        TrainMethod::Semihard => {
            mining::semihard_select(sim, pairs, cfg.dro.lambda, cfg.dro.margin)
        }
        TrainMethod::Dws => mining::dws_select(
            sim,
            pairs,
            cfg.embed_dim,
            2 * (cfg.instances_per_class - 1),
            100.0,
            step_seed,
        ),
        TrainMethod::MsMining => mining::ms_mining_select(sim, pairs, 0.1),
    }
}

/// Robust loss of the configured method on one fixed batch of examples.
fn holdout_robust_loss(
    model: &EmbeddingModel,
    inputs: &Array2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let cache = forward(model, inputs)?;
    let batch = EmbeddingBatch {
        inputs: inputs.clone(),
        embeddings: cache.embeddings,
        labels: labels.to_vec(),
    };
    let sim = similarity(&batch)?;
    let pairs = build_pair_system(&batch.labels, cfg.include_self_pairs)?;
    let mut losses = loss_matrix(&sim, &pairs, &cfg.dro, cfg.loss_kind)?;
    if cfg.keep_zero_loss {
        losses = losses.without_pruning();
    }
    match solve_method(cfg.method, &sim, &losses, &pairs, cfg, cfg.seed) {
        Ok(a) => Ok(a.mean_selected_loss(&losses)),
        Err(Error::EmptyActiveSet(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// SGD training: sample batch, embed, weight pairs, step.
///
/// The held-out split (20% by seeded shuffle) is fixed across epochs; the
/// per-epoch history records the robust loss and recall@1 of the current
/// model on that split. Non-finite losses or gradients abort with the
/// failing epoch, step and pair.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(EmbeddingModel, TrainHistory)> {
    cfg.validate()?;
    let n = dataset.len();
    if n < 4 {
        return Err(Error::InvalidBatch(format!(
            "dataset of {n} examples is too small to split and train"
        )));
    }

    // fixed held-out split, stratified by class so every held-out example
    // has an in-class retrieval target
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(HOLDOUT_STREAM);
    let mut eval_idx = Vec::new();
    let mut train_idx = Vec::new();
    for (_, members) in dataset.class_members() {
        let count = members.len();
        let held = if count >= 4 {
            (((count as f64) * HOLDOUT_FRAC).round() as usize).clamp(2, count - 2)
        } else {
            0
        };
        let order = rand::seq::index::sample(&mut shuffle_rng, count, count);
        for (pos, pick) in order.into_iter().enumerate() {
            if pos < held {
                eval_idx.push(members[pick]);
            } else {
                train_idx.push(members[pick]);
            }
        }
    }
    if eval_idx.len() < 2 {
        // every class too small to split: evaluate on the training data
        eval_idx = train_idx.clone();
    }
    let train_ds = dataset.subset(&train_idx);
    let (eval_inputs, eval_labels) = batch_inputs(dataset, &eval_idx);

    let mut model = EmbeddingModel::init(dataset.dim(), cfg.hidden_dim, cfg.embed_dim, cfg.seed);
    let steps_per_epoch = train_ds.len().div_ceil(cfg.batch_size()).max(1);
    let mut history = TrainHistory::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        // default schedule: base rate decayed by 1/sqrt(epoch + 1)
        let eta = cfg.learning_rate / ((epoch + 1) as f64).sqrt();
        for step in 0..steps_per_epoch {
            let sampled = sample_batch(&train_ds, cfg, global_step);
            global_step += 1;
            let (inputs, labels) = batch_inputs(&train_ds, &sampled.indices);
            let cache = forward(&model, &inputs)?;
            let batch = EmbeddingBatch {
                inputs: inputs.clone(),
                embeddings: cache.embeddings,
                labels,
            };
            let sim = similarity(&batch)?;
            let pairs = build_pair_system(&batch.labels, cfg.include_self_pairs)?;
            let mut losses = loss_matrix(&sim, &pairs, &cfg.dro, cfg.loss_kind)?;
            if cfg.keep_zero_loss {
                losses = losses.without_pruning();
            }
            if let Some(k) = (0..losses.len()).find(|&k| !losses.loss(k).is_finite()) {
                return Err(Error::NonFinite {
                    quantity: "pair loss".into(),
                    epoch,
                    step,
                    pair: Some(pairs.pair(k)),
                });
            }
            let step_seed = cfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(global_step as u64);
            let assignment =
                match solve_method(cfg.method, &sim, &losses, &pairs, cfg, step_seed) {
                    Ok(a) => a,
                    // a batch can come up with no active pair at all; it
                    // contributes no gradient
                    Err(Error::EmptyActiveSet(_)) => continue,
                    Err(e) => return Err(e),
                };
            let coeffs = dro::weighted_subgradient_coeffs(&assignment, &losses);
            let grad = backward(&model, &inputs, &pairs, &coeffs)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    quantity: "gradient".into(),
                    epoch,
                    step,
                    pair: None,
                });
            }
            model.w1.zip_mut_with(&grad.g1, |w, g| *w -= eta * g);
            if let (Some(w2), Some(g2)) = (&mut model.w2, &grad.g2) {
                w2.zip_mut_with(g2, |w, g| *w -= eta * g);
            }
        }

        let eval_cache = forward(&model, &eval_inputs)?;
        let recall = recall_at_k(&eval_cache.embeddings, &eval_labels, &[1])?[0].1;
        let robust = holdout_robust_loss(&model, &eval_inputs, &eval_labels, cfg)?;
        history.epochs.push(EpochStats {
            epoch,
            robust_loss: robust,
            recall1: recall,
        });
    }
    Ok((model, history))
}
