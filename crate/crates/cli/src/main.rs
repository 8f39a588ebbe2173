//! `nars`: preprocess a heterogeneous graph into per-subgraph hop features,
//! train and evaluate on them, and run the synthetic benchmark.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on bad usage.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use nars::config::{Config, ModelSection, Precision};
use nars::featurize::{save_table, train_transe};
use nars::hetgraph::{load_graph, Split};
use nars::metagraph::{choose_subsets, valid_subsets};
use nars::propagate::DiskHops;
use nars::synthetic::SbmConfig;
use nars::train::{
    best_test_metric, checkpoint_precision, compare_on_sbm, evaluate_checkpoint, fit_from_dir, load_config_labels,
    preprocess, Checkpoint, FitOptions, ReplicateSummary,
};
use nars::Scalar;

#[derive(Parser, Debug)]
#[command(name = "nars", version, about = "Neighbor averaging over relation subgraphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Overrides `train.seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample relation subsets and write their hop features to --out.
    Preprocess,
    /// List valid relation subsets and the sampled ones.
    Sample {
        /// Number of subsets; `sample.k` by default.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train TransE embeddings on the graph and write the table to --out.
    Transe {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Train on preprocessed hop features.
    Train {
        /// Directory written by `preprocess`.
        #[arg(long)]
        hops: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        hops: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// NARS against the merged-graph ablation on typed block-model graphs.
    BenchSynthetic {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 1200)]
        papers: usize,
    },
}

/// Bad invocation rather than a failed run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: &str) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

impl Cli {
    fn config(&self) -> anyhow::Result<Config> {
        let Some(path) = &self.config else {
            return usage("--config is required for this command");
        };
        let mut cfg = Config::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn out(&self) -> anyhow::Result<&Path> {
        match &self.out {
            Some(p) => {
                fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
                Ok(p)
            }
            None => usage("--out is required for this command"),
        }
    }
}

fn print_json(v: &impl Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    metric: String,
    seeds: Vec<u64>,
    best_epochs: Vec<Option<usize>>,
    diverged: Vec<Option<usize>>,
    test: ReplicateSummary,
}

fn train_runs<T: Scalar>(cfg: &Config, hops: &Path, out: &Path, n: usize) -> anyhow::Result<TrainSummary> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.train.seed + i).collect();
    let mut values = Vec::new();
    let mut best_epochs = Vec::new();
    let mut diverged = Vec::new();
    let mut metric = String::new();
    for (i, &seed) in seeds.iter().enumerate() {
        let report = fit_from_dir::<T>(cfg, hops, seed)?;
        let dir = if n == 1 { out.to_path_buf() } else { out.join(format!("run{i}")) };
        report.write(&dir)?;
        if let Some(e) = report.diverged {
            log::warn!("seed {seed} diverged at epoch {e}");
        }
        values.push(best_test_metric(&report)?);
        best_epochs.push(report.best_epoch);
        diverged.push(report.diverged);
        metric = report.metric.clone();
    }
    Ok(TrainSummary { metric, seeds, best_epochs, diverged, test: ReplicateSummary::new(values) })
}

fn eval_with<T: Scalar>(cfg: &Config, hops: &Path, ckpt: &Path, split: Split) -> anyhow::Result<serde_json::Value> {
    let ckpt = Checkpoint::<T>::load(ckpt)?;
    let src = DiskHops::open(hops)?;
    let labels = load_config_labels(cfg)?;
    let m = evaluate_checkpoint(&ckpt, &src, &labels, split, cfg.train.ndcg_cutoff)?;
    Ok(serde_json::json!({ "split": split.name(), "epoch": ckpt.epoch, "metrics": m }))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Preprocess => {
            let cfg = cli.config()?;
            let out = cli.out()?;
            let m = preprocess(&cfg, out)?;
            print_json(&serde_json::json!({
                "subgraphs": m.num_subgraphs,
                "hops": m.num_hops,
                "rows": m.rows,
                "dim": m.cols,
                "subsets": m.subsets,
            }))
        }
        Command::Sample { k } => {
            let cfg = cli.config()?;
            let g = load_graph(&cfg.data.dir)?.without_relations(&cfg.data.drop_relations)?;
            let target = g.node_type_by_name(&cfg.data.target)?;
            let valid = valid_subsets(&g, target, cfg.sample.cap);
            let chosen = choose_subsets(&g, target, k.unwrap_or(cfg.sample.k), cfg.train.seed, cfg.sample.cap)?;
            let names: Vec<Vec<String>> = chosen.iter().map(|s| s.names(&g)).collect();
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                let text: String = names.iter().map(|n| n.join(",") + "\n").collect();
                fs::write(out.join("subsets.txt"), text)?;
            }
            print_json(&serde_json::json!({
                "relations": g.relations().len(),
                "valid": valid.as_ref().map(Vec::len).ok(),
                "sampled": names,
            }))
        }
        Command::Transe { epochs, dim } => {
            let mut cfg = cli.config()?;
            let out = cli.out()?;
            if let Some(e) = epochs {
                cfg.transe.epochs = *e;
            }
            if let Some(d) = dim {
                cfg.transe.dim = *d;
            }
            let g = load_graph(&cfg.data.dir)?.without_relations(&cfg.data.drop_relations)?;
            let table = train_transe::<f32>(&g, &cfg.transe, cfg.train.seed)?;
            save_table(&g, &table, out)?;
            print_json(&serde_json::json!({
                "entities": table.entity.rows(),
                "dim": table.dim(),
                "epochs": table.epochs_trained,
                "final_loss": table.loss_history.last(),
            }))
        }
        Command::Train { hops, epochs, replicates } => {
            let mut cfg = cli.config()?;
            let out = cli.out()?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let n = replicates.unwrap_or(cfg.train.replicates);
            if n == 0 {
                return usage("--replicates must be positive");
            }
            let summary = match cfg.train.precision {
                Precision::F32 => train_runs::<f32>(&cfg, hops, out, n)?,
                Precision::F64 => train_runs::<f64>(&cfg, hops, out, n)?,
            };
            write_json(&out.join("summary.json"), &summary)?;
            print_json(&summary)
        }
        Command::Eval { hops, checkpoint, split } => {
            let cfg = cli.config()?;
            let v = match checkpoint_precision(checkpoint)? {
                4 => eval_with::<f32>(&cfg, hops, checkpoint, *split)?,
                8 => eval_with::<f64>(&cfg, hops, checkpoint, *split)?,
                w => bail!("checkpoint has unsupported float width {w}"),
            };
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                write_json(&out.join(format!("eval_{}.json", split.name())), &v)?;
            }
            print_json(&v)
        }
        Command::BenchSynthetic { seeds, epochs, batch_size, lr, papers } => {
            if *seeds == 0 {
                return usage("--seeds must be positive");
            }
            let base = cli.seed.unwrap_or(0);
            let sbm = SbmConfig {
                papers: *papers,
                authors: papers / 2,
                fields: (papers / 6).max(1),
                ..Default::default()
            };
            let model = ModelSection { hops: 2, hidden: 64, dropout: 0.5, ..Default::default() };
            let opts = FitOptions {
                epochs: *epochs,
                batch_size: *batch_size,
                lr: *lr,
                seed: base,
                select_metric: None,
                ndcg_cutoff: None,
                stage: None,
            };
            let list: Vec<u64> = (base..base + seeds).collect();
            let c = compare_on_sbm(&sbm, &model, &opts, &list)?;
            eprintln!("NARS   {}\nmerged {}", c.nars, c.merged);
            if let Some(out) = &cli.out {
                fs::create_dir_all(out)?;
                write_json(&out.join("bench_synthetic.json"), &c)?;
            }
            print_json(&c)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
