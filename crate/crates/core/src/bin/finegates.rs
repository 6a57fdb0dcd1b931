//! Command-line entry point: train, evaluate, prune, benchmark, and report
//! on gated transformer models.
//!
//! Exit codes: 0 success, 2 configuration or input problem, 3 numeric abort
//! (non-finite loss or gradient), 4 degenerate layer (all rows or columns
//! pruned away).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use finegates::bench::{bench_infer, bench_matmul, infer_csv, matmul_csv};
use finegates::checkpoint::Checkpoint;
use finegates::data::{
    generate_planted, load_tsv, load_vocab, required_vocab_size, save_vocab, Corpus,
    PlantedTaskSpec,
};
use finegates::gates::{gate_report_rows, write_gate_report, GateSide};
use finegates::training::{fit, metrics_csv, predictions, TrainConfig};
use finegates::transformer::ModelConfig;
use finegates::{Error, Model};

pub const SEED_ENV: &str = "FINEGATES_SEED";

#[derive(Parser)]
#[command(name = "finegates", version, about = "Stochastic-gate structured sparsification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config; writes manifest.txt, metrics.csv,
    /// best.ckpt and final.ckpt into --out.
    Train {
        /// TOML run config ([model], [train], [data] tables).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the training seed (also settable via FINEGATES_SEED).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint; prints accuracy and writes predictions.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run config providing the [data] table for the eval corpus.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse gates into the weights and compact; writes pruned.ckpt and
    /// prune_report.csv.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation gates above this value are kept.
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time dense vs gathered (column-pruned) matrix products; writes
    /// bench.csv.
    BenchMatmul {
        #[arg(long, default_value_t = 1024)]
        dim: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 100_000)]
        repeats: usize,
        /// Comma-separated sparsity levels in [0,1).
        #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        grid: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time validation epochs of the pruned model at several sparsity
    /// levels; writes bench.csv.
    BenchInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated sparsity levels in [0,1).
        #[arg(long, default_value = "0.0,0.2,0.4,0.6,0.8")]
        levels: String,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump every gate (mu, evaluation value, kept flag) to
    /// gates_report.csv.
    GatesReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    /// Synthetic planted-feature task.
    #[serde(default)]
    planted: Option<PlantedTaskSpec>,
    /// TSV corpus: `label<TAB>space-separated tokens` per line.
    #[serde(default)]
    train_tsv: Option<PathBuf>,
    #[serde(default)]
    eval_tsv: Option<PathBuf>,
    #[serde(default)]
    max_samples: Option<usize>,
    /// Head/tail split applied when no separate eval source exists.
    #[serde(default = "default_train_fraction")]
    train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
}

fn load_config(path: &Path) -> finegates::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn seed_override(cli_seed: Option<u64>) -> finegates::Result<Option<u64>> {
    if let Some(s) = cli_seed {
        return Ok(Some(s));
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not a u64"))),
        Err(_) => Ok(None),
    }
}

/// Materialize the corpora described by `[data]`. Returns (train, eval) and
/// persists the vocabulary when one was built from text.
fn build_corpora(cfg: &RunConfig, out: Option<&Path>) -> finegates::Result<(Corpus, Corpus)> {
    match (&cfg.data.planted, &cfg.data.train_tsv) {
        (Some(spec), None) => {
            let task = generate_planted(spec)?;
            task.corpus.split_at(cfg.data.train_fraction)
        }
        (None, Some(train_path)) => {
            let train = load_tsv(
                train_path,
                cfg.data.max_samples,
                None,
                cfg.model.num_classes,
            )?;
            if required_vocab_size(&train) > cfg.model.vocab_size {
                return Err(Error::Config(format!(
                    "corpus needs vocab_size >= {}, model has {}",
                    required_vocab_size(&train),
                    cfg.model.vocab_size
                )));
            }
            if let Some(dir) = out {
                save_vocab(&dir.join("vocab.tsv"), &train.vocab)?;
            }
            match &cfg.data.eval_tsv {
                Some(eval_path) => {
                    let eval = load_tsv(
                        eval_path,
                        cfg.data.max_samples,
                        Some(&train.vocab),
                        cfg.model.num_classes,
                    )?;
                    Ok((train, eval))
                }
                None => train.split_at(cfg.data.train_fraction),
            }
        }
        (Some(_), Some(_)) => Err(Error::Config(
            "[data] must set either 'planted' or 'train_tsv', not both".into(),
        )),
        (None, None) => Err(Error::Config(
            "[data] must set either 'planted' or 'train_tsv'".into(),
        )),
    }
}

/// Only the eval-side corpus, reusing a persisted vocabulary if present.
fn build_eval_corpus(cfg: &RunConfig, out: &Path) -> finegates::Result<Corpus> {
    if let (Some(eval_path), Some(_)) = (&cfg.data.eval_tsv, &cfg.data.train_tsv) {
        let vocab_path = out.join("vocab.tsv");
        if vocab_path.exists() {
            let vocab = load_vocab(&vocab_path)?;
            return load_tsv(
                eval_path,
                cfg.data.max_samples,
                Some(&vocab),
                cfg.model.num_classes,
            );
        }
    }
    build_corpora(cfg, None).map(|(_, eval)| eval)
}

fn write_manifest(out: &Path, cfg: &RunConfig) -> finegates::Result<()> {
    let body = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("cannot serialize manifest: {e}")))?;
    let text = format!(
        "# finegates {} run manifest; rerun with --config on this file\n{body}",
        env!("CARGO_PKG_VERSION")
    );
    std::fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn parse_levels(s: &str) -> finegates::Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sparsity level '{p}'")))
        })
        .collect()
}

fn ensure_out(out: &Path) -> finegates::Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>) -> finegates::Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed_override(seed)? {
        cfg.train.seed = s;
    }
    ensure_out(out)?;
    write_manifest(out, &cfg)?;
    let (train, val) = build_corpora(&cfg, Some(out))?;
    let mut model = Model::new(cfg.model.clone())?;
    let result = fit(&mut model, &train, &val, &cfg.train)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&result.metrics))?;
    result.final_checkpoint.save(&out.join("final.ckpt"))?;
    result.best_checkpoint.save(&out.join("best.ckpt"))?;
    println!(
        "trained {} steps: final accuracy {:.4}, best {:.4}, achieved sparsity {:.4}",
        cfg.train.max_steps, result.final_accuracy, result.best_accuracy, result.achieved_sparsity
    );
    println!(
        "trainable params {}, frozen {}, removable at threshold 0: {}",
        model.count_trainable(),
        model.count_frozen(),
        model.removable_at(0.0)?
    );
    Ok(())
}

fn cmd_eval(checkpoint: &Path, config: &Path, out: &Path) -> finegates::Result<()> {
    let cfg = load_config(config)?;
    ensure_out(out)?;
    let corpus = build_eval_corpus(&cfg, out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (accuracy, preds) = if ck.is_pruned()? {
        let model = ck.to_pruned()?;
        predictions(&corpus, cfg.train.batch_size, |ids, mask| {
            model.forward_eval(ids, mask)
        })?
    } else {
        let model = ck.to_model()?;
        predictions(&corpus, cfg.train.batch_size, |ids, mask| {
            model.forward_eval(ids, mask)
        })?
    };
    let mut csv = String::from("index,label,prediction\n");
    for (i, (e, p)) in corpus.examples.iter().zip(&preds).enumerate() {
        csv.push_str(&format!("{i},{},{p}\n", e.label));
    }
    std::fs::write(out.join("predictions.csv"), csv)?;
    println!("accuracy {accuracy:.6} on {} examples", corpus.len());
    Ok(())
}

fn cmd_prune(checkpoint: &Path, threshold: f64, out: &Path) -> finegates::Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0,1]")));
    }
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let pruned = model.prune(threshold)?;
    ensure_out(out)?;
    Checkpoint::from_pruned(&pruned).save(&out.join("pruned.ckpt"))?;
    let mut csv = String::from("layer,kept_rows,kept_cols,removed_params,layer_sparsity\n");
    for (i, block) in pruned.blocks.iter().enumerate() {
        for (l, lname) in finegates::transformer::BLOCK_LAYER_NAMES.iter().enumerate() {
            let p = &block.layers[l];
            let (k, d) = p.original_shape;
            csv.push_str(&format!(
                "block{i}.{lname},{},{},{},{}\n",
                p.kept_rows.len(),
                p.kept_cols.len(),
                p.removed_params(),
                p.removed_params() as f64 / (k * d) as f64
            ));
        }
    }
    std::fs::write(out.join("prune_report.csv"), csv)?;
    let removed = pruned.removed_params();
    println!(
        "removed {} parameters ({} recomputed from gate masks)",
        removed,
        model.removable_at(threshold)?
    );
    Ok(())
}

fn cmd_bench_matmul(
    dim: usize,
    batch: usize,
    repeats: usize,
    grid: &str,
    seed: u64,
    out: &Path,
) -> finegates::Result<()> {
    let grid = parse_levels(grid)?;
    let rows = bench_matmul(dim, batch, repeats, &grid, seed)?;
    ensure_out(out)?;
    std::fs::write(out.join("bench.csv"), matmul_csv(&rows))?;
    for r in &rows {
        println!(
            "sparsity {:.2}: dense {:.4} ms, gathered {:.4} ms, reduction {:.1}%",
            r.sparsity, r.dense_ms, r.gathered_ms, r.relative_reduction_pct
        );
    }
    Ok(())
}

fn cmd_bench_infer(
    checkpoint: &Path,
    config: &Path,
    levels: &str,
    repeats: usize,
    out: &Path,
) -> finegates::Result<()> {
    let cfg = load_config(config)?;
    let corpus = build_eval_corpus(&cfg, out)?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let levels = parse_levels(levels)?;
    let rows = bench_infer(&model, &corpus, &levels, cfg.train.batch_size, repeats)?;
    ensure_out(out)?;
    std::fs::write(out.join("bench.csv"), infer_csv(&rows))?;
    for r in &rows {
        println!(
            "sparsity {:.2}: epoch {:.2} ms, RTF {:.3}, accuracy {:.4}",
            r.sparsity, r.median_epoch_ms, r.rtf, r.accuracy
        );
    }
    Ok(())
}

fn cmd_gates_report(checkpoint: &Path, threshold: f64, out: &Path) -> finegates::Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let vectors = model.gate_vectors();
    if vectors.is_empty() {
        return Err(Error::Input("checkpoint's model has no gates".into()));
    }
    let t = threshold;
    let mut rows = Vec::new();
    for (layer, gate_rows, gate_cols) in vectors {
        rows.extend(gate_report_rows(&layer, GateSide::Row, gate_rows, t)?);
        rows.extend(gate_report_rows(&layer, GateSide::Col, gate_cols, t)?);
    }
    ensure_out(out)?;
    let file = std::fs::File::create(out.join("gates_report.csv"))?;
    write_gate_report(std::io::BufWriter::new(file), &rows)?;
    println!(
        "{} gates, {} kept, achieved sparsity {:.4}",
        rows.len(),
        rows.iter().filter(|r| r.kept).count(),
        model.achieved_sparsity(t)?
    );
    Ok(())
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Degenerate { .. } => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out, seed } => cmd_train(config, out, *seed),
        Command::Eval { checkpoint, config, out } => cmd_eval(checkpoint, config, out),
        Command::Prune { checkpoint, threshold, out } => cmd_prune(checkpoint, *threshold, out),
        Command::BenchMatmul { dim, batch, repeats, grid, seed, out } => {
            cmd_bench_matmul(*dim, *batch, *repeats, grid, *seed, out)
        }
        Command::BenchInfer { checkpoint, config, levels, repeats, out } => {
            cmd_bench_infer(checkpoint, config, levels, *repeats, out)
        }
        Command::GatesReport { checkpoint, threshold, out } => {
            cmd_gates_report(checkpoint, *threshold, out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
