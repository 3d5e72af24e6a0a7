//! Command-line interface: pair weighting, training, evaluation,
//! verification suites, the imbalance sweep, and solver timing.

mod verify;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use drodml::batch::{normalize_rows, similarity, EmbeddingBatch};
use drodml::config::{DroConfig, DroVariant, LossKind, TrainMethod};
use drodml::dataset::{gen_synthetic, Dataset};
use drodml::dro;
use drodml::eval::{imbalance_sweep, recall_at_k};
use drodml::losses::loss_matrix;
use drodml::model::{forward, train, EmbeddingModel, TrainConfig};
use drodml::pairs::build_pair_system;

#[derive(Parser)]
#[command(
    name = "drodml",
    about = "Distributionally robust pair weighting for metric learning",
    subcommand_required = true,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve pair weights on a dataset and emit them as CSV.
    Weights(WeightsArgs),
    /// Train an embedding model; emits per-epoch history as CSV.
    Train(TrainArgs),
    /// Evaluate recall@k of raw features or a trained model.
    Eval(EvalArgs),
    /// Run the oracle, recovery, and gradient verification suites.
    Verify(VerifyArgs),
    /// Train every method across batch sizes; emits the recall table.
    Sweep(SweepArgs),
    /// Time each solver on synthetic batches.
    Bench(BenchArgs),
}

/// Dataset source: a CSV file or seeded synthetic clusters.
#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file of "label,x1,...,xD" rows.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    gen_classes: usize,
    #[arg(long, default_value_t = 30)]
    gen_per_class: usize,
    #[arg(long, default_value_t = 16)]
    gen_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    gen_spread: f64,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<Dataset> {
        match &self.data {
            Some(path) => {
                Dataset::load(path).with_context(|| format!("loading {}", path.display()))
            }
            None => Ok(gen_synthetic(
                self.gen_classes,
                self.gen_per_class,
                self.gen_dim,
                self.gen_spread,
                seed,
            )?),
        }
    }
}

/// Loss and uncertainty-set hyperparameters.
#[derive(Args, Clone)]
struct DroArgs {
    /// Base pairwise loss: margin or binomial.
    #[arg(long, default_value = "margin")]
    loss: String,
    /// Uncertainty set: avg, max, topk, topk-pn, kl, chi2, kl-grouped, ms.
    #[arg(long, default_value = "topk")]
    dro: String,
    #[arg(long, default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma_pos: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma_neg: f64,
    #[arg(long, default_value_t = 0.25)]
    rho: f64,
    #[arg(long, default_value_t = 0.2)]
    m: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50.0)]
    beta: f64,
    #[arg(long, default_value_t = false)]
    include_self_pairs: bool,
    #[arg(long, default_value_t = false)]
    keep_zero_loss: bool,
}

impl DroArgs {
    fn variant(&self) -> Result<DroVariant> {
        Ok(DroVariant::parse(&self.dro)?)
    }

    fn loss_kind(&self) -> Result<LossKind> {
        Ok(LossKind::parse(&self.loss)?)
    }

    fn config(&self) -> Result<DroConfig> {
        let cfg = DroConfig {
            variant: self.variant()?,
            k: self.k,
            gamma: self.gamma,
            gamma_pos: self.gamma_pos,
            gamma_neg: self.gamma_neg,
            rho: self.rho,
            margin: self.m,
            lambda: self.lambda,
            alpha: self.alpha,
            beta: self.beta,
            cost_neg: 1.0,
            c_pos: self.lambda + self.m,
            c_neg: self.lambda - self.m,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    dro: DroArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    dro: DroArgs,
    #[arg(long, default_value_t = 4)]
    classes_per_batch: usize,
    #[arg(long, default_value_t = 5)]
    m_per_class: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    /// Adds a rectified hidden layer of this width.
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the trained parameters as flat text.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained model file; raw normalized features when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated list of k values.
    #[arg(long, default_value = "1,2,4,8")]
    ks: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    dro: DroArgs,
    /// Comma-separated batch sizes.
    #[arg(long, default_value = "20,40,80")]
    batch_sizes: String,
    #[arg(long, default_value_t = 5)]
    m_per_class: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds per cell; the emitted recall is the median over them.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "80,160,320,640")]
    batch_sizes: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Timed repetitions per solver; the median is reported.
    #[arg(long, default_value_t = 30)]
    repeats: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<usize>()
                .with_context(|| format!("bad integer '{f}'"))
        })
        .collect()
}

fn emit(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{content}"),
    }
    Ok(())
}

/// A dataset viewed as one batch: rows normalized into embeddings.
fn dataset_as_batch(ds: &Dataset) -> Result<EmbeddingBatch> {
    Ok(EmbeddingBatch::from_raw(
        ds.features.clone(),
        ds.features.clone(),
        ds.labels.clone(),
    )?)
}

fn cmd_weights(args: WeightsArgs) -> Result<()> {
    let ds = args.data.load(args.seed)?;
    let cfg = args.dro.config()?;
    let kind = args.dro.loss_kind()?;
    let batch = dataset_as_batch(&ds)?;
    let sim = similarity(&batch)?;
    let pairs = build_pair_system(&batch.labels, args.dro.include_self_pairs)?;
    let mut losses = loss_matrix(&sim, &pairs, &cfg, kind)?;
    if args.dro.keep_zero_loss {
        losses = losses.without_pruning();
    }
    let assignment = dro::solve(&sim, &losses, &pairs, &cfg)?;
    let mut csv = String::from("i,j,y,loss,weight\n");
    for k in 0..pairs.len() {
        let (i, j) = pairs.pair(k);
        csv.push_str(&format!(
            "{i},{j},{},{},{}\n",
            pairs.label(k),
            losses.loss(k),
            assignment.weights[k]
        ));
    }
    emit(&args.out, &csv)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let ds = args.data.load(args.seed)?;
    let cfg = TrainConfig {
        classes_per_batch: args.classes_per_batch,
        instances_per_class: args.m_per_class,
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        dro: args.dro.config()?,
        loss_kind: args.dro.loss_kind()?,
        method: TrainMethod::Dro(args.dro.variant()?),
        embed_dim: args.embed_dim,
        hidden_dim: args.hidden_dim,
        include_self_pairs: args.dro.include_self_pairs,
        keep_zero_loss: args.dro.keep_zero_loss,
    };
    let (model, history) = train(&ds, &cfg)?;
    let mut csv = String::from("epoch,robust_loss,recall1\n");
    for e in &history.epochs {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.robust_loss, e.recall1));
    }
    emit(&args.out, &csv)?;
    if let Some(path) = &args.model_out {
        std::fs::write(path, model.to_text())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ds = args.data.load(args.seed)?;
    let ks = parse_usize_list(&args.ks)?;
    let embeddings = match &args.model {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let model = EmbeddingModel::from_text(&text)?;
            forward(&model, &ds.features)?.embeddings
        }
        None => normalize_rows(ds.features.clone()),
    };
    let recalls = recall_at_k(&embeddings, &ds.labels, &ks)?;
    let mut csv = String::from("k,recall\n");
    for (k, r) in recalls {
        csv.push_str(&format!("{k},{r}\n"));
    }
    emit(&args.out, &csv)
}

fn cmd_verify(args: VerifyArgs) -> Result<bool> {
    let (table, all_passed) = verify::run(args.seed);
    print!("{table}");
    Ok(all_passed)
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite recalls"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let ds = args.data.load(args.seed)?;
    let batch_sizes = parse_usize_list(&args.batch_sizes)?;
    let base = TrainConfig {
        instances_per_class: args.m_per_class,
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        dro: args.dro.config()?,
        loss_kind: args.dro.loss_kind()?,
        embed_dim: args.embed_dim,
        include_self_pairs: args.dro.include_self_pairs,
        keep_zero_loss: args.dro.keep_zero_loss,
        ..TrainConfig::default()
    };
    // one sweep per seed, then the median recall per cell
    let mut per_seed = Vec::new();
    for run in 0..args.runs.max(1) {
        let cfg = TrainConfig {
            seed: args.seed + run as u64,
            ..base.clone()
        };
        per_seed.push(imbalance_sweep(&ds, &cfg, &batch_sizes)?);
    }
    let mut csv = String::from("B,ratio,method,recall1\n");
    for (cell, row) in per_seed[0].iter().enumerate() {
        let recalls: Vec<f64> = per_seed.iter().map(|rows| rows[cell].recall1).collect();
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row.batch_size,
            row.ratio,
            row.method.name(),
            median(recalls)
        ));
    }
    emit(&args.out, &csv)
}

type TimedSolver<'a> = (&'a str, Box<dyn Fn() -> f64 + 'a>);

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let batch_sizes = parse_usize_list(&args.batch_sizes)?;
    let mut csv = String::from("method,B,millis\n");
    for &b in &batch_sizes {
        let classes = (b / 5).max(2);
        let ds = gen_synthetic(classes, 5, 16, 0.5, args.seed)?;
        let batch = dataset_as_batch(&ds)?;
        let sim = similarity(&batch)?;
        let pairs = build_pair_system(&batch.labels, false)?;
        let cfg = DroConfig {
            k: 2 * b,
            ..DroConfig::default()
        };
        let losses = loss_matrix(&sim, &pairs, &cfg, LossKind::Margin)?;
        let solvers: Vec<TimedSolver> = vec![
            ("avg", Box::new(|| dro::solve_avg(&losses).unwrap().robust_value)),
            ("max", Box::new(|| dro::solve_max(&losses).unwrap().robust_value)),
            (
                "topk",
                Box::new(|| dro::solve_topk(&losses, 2 * b).unwrap().robust_value),
            ),
            (
                "topk-pn",
                Box::new(|| dro::solve_topk_pn(&losses, &pairs, 2 * b).unwrap().robust_value),
            ),
            (
                "kl",
                Box::new(|| dro::solve_kl(&losses, 0.1).unwrap().robust_value),
            ),
            (
                "chi2",
                Box::new(|| dro::solve_chi2(&losses, 0.25).unwrap().robust_value),
            ),
        ];
        for (name, solve) in solvers {
            let mut times = Vec::with_capacity(args.repeats);
            for _ in 0..args.repeats.max(1) {
                let start = Instant::now();
                let value = solve();
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                std::hint::black_box(value);
                times.push(elapsed);
            }
            csv.push_str(&format!("{name},{b},{}\n", median(times)));
        }
    }
    emit(&args.out, &csv)
}

fn run() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Weights(args) => cmd_weights(args).map(|_| true),
        Command::Train(args) => cmd_train(args).map(|_| true),
        Command::Eval(args) => cmd_eval(args).map(|_| true),
        Command::Verify(args) => cmd_verify(args),
        Command::Sweep(args) => cmd_sweep(args).map(|_| true),
        Command::Bench(args) => cmd_bench(args).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_parsing() {
        assert_eq!(parse_usize_list("20,40, 80").unwrap(), vec![20, 40, 80]);
        assert!(parse_usize_list("20,x").is_err());
    }

    #[test]
    fn median_of_runs() {
        assert_eq!(median(vec![0.3, 0.1, 0.2]), 0.2);
        assert_eq!(median(vec![0.4, 0.1, 0.2, 0.3]), 0.25);
    }
}
