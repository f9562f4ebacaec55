//! `tumorreg`: generate phantom datasets, train the recurrent model, register
//! pairs, score registrations and run the conditioning ablation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tumorreg::dataio::{
    ablation_csv, dataset_pairs, prepare_pair, read_pair, read_registration_maps, run_ablation,
    write_dataset_index, write_loss_history, write_registration, PreparedPair, RunConfig,
};
use tumorreg::engine::{read_checkpoint, register, train_with, write_checkpoint, NetworkParams};
use tumorreg::metrics::{metrics_csv, MetricsReport};
use tumorreg::{Conditioning, EngineConfig};

#[derive(Parser)]
#[command(
    name = "tumorreg",
    version,
    about = "Tumor-aware recurrent deformable registration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for phantom generation and model initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct EngineArgs {
    /// Recurrent steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Squaring steps per velocity integration.
    #[arg(long)]
    int_steps: Option<usize>,
    #[arg(long)]
    lambda_smooth: Option<f64>,
    #[arg(long)]
    lambda_pre: Option<f64>,
    #[arg(long)]
    lambda_ob: Option<f64>,
    /// Tumor conditioning to switch off.
    #[arg(long, value_enum)]
    no_conditioning: Option<Disable>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Updates per pair with --optimize-pair.
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Disable {
    Forward,
    Inverse,
    Both,
    None,
}

impl EngineArgs {
    fn apply(&self, cfg: &mut EngineConfig) {
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.int_steps {
            cfg.int_steps = v;
        }
        if let Some(v) = self.lambda_smooth {
            cfg.weights.lambda_smooth = v;
        }
        if let Some(v) = self.lambda_pre {
            cfg.weights.lambda_pre = v;
        }
        if let Some(v) = self.lambda_ob {
            cfg.weights.lambda_ob = v;
        }
        if let Some(d) = self.no_conditioning {
            let c = &mut cfg.conditioning;
            match d {
                Disable::Forward => c.forward = false,
                Disable::Inverse => c.inverse = false,
                Disable::Both => *c = Conditioning::NONE,
                Disable::None => {}
            }
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.iterations {
            cfg.pair_opt.iterations = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantom pairs, preprocess them and write a dataset directory.
    Phantom {
        #[command(flatten)]
        run: RunArgs,
        /// Number of pairs (overrides the config).
        #[arg(long)]
        pairs: Option<usize>,
    },
    /// Train the recurrent network on a dataset; writes a checkpoint and a loss log.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        engine: EngineArgs,
        /// Dataset directory written by `phantom`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Register dataset pairs with a trained checkpoint or by per-pair optimization.
    Register {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        data: PathBuf,
        /// Only these pairs (repeatable); all pairs by default.
        #[arg(long)]
        pair: Vec<String>,
        #[arg(
            long,
            conflicts_with = "optimize_pair",
            required_unless_present = "optimize_pair"
        )]
        checkpoint: Option<PathBuf>,
        /// Optimize the velocity fields of each pair directly instead of using a network.
        #[arg(long)]
        optimize_pair: bool,
    },
    /// Score stored registrations against the original-resolution volumes.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        data: PathBuf,
        /// Output directory of `register`.
        #[arg(long)]
        registrations: PathBuf,
    },
    /// Compare no, inverse, forward and both-sided tumor conditioning on phantom pairs.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        pairs: Option<usize>,
    },
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_prepared(data: &Path, names: &[String]) -> Result<Vec<PreparedPair>> {
    names
        .par_iter()
        .map(|n| PreparedPair::read(n, &data.join(n)).with_context(|| format!("reading pair {n}")))
        .collect()
}

fn phantom(run: &RunArgs, pairs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(run)?;
    if let Some(n) = pairs {
        cfg.pairs = n;
    }
    cfg.validate()?;
    create_out(&run.out)?;
    let names = (0..cfg.pairs)
        .into_par_iter()
        .map(|i| {
            let p = prepare_pair(&cfg, i).with_context(|| format!("generating pair {i}"))?;
            p.write(&run.out.join(&p.name))?;
            Ok(p.name)
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset_index(&run.out, &names)?;
    write_text(&run.out.join("config.json"), &cfg.to_json()?)?;
    println!("wrote {} pairs to {}", names.len(), run.out.display());
    Ok(())
}

fn train(run: &RunArgs, engine: &EngineArgs, data: &Path) -> Result<()> {
    let mut cfg = load_config(run)?;
    engine.apply(&mut cfg.engine);
    cfg.engine.validate()?;
    let names =
        dataset_pairs(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let dataset = names
        .iter()
        .map(|n| read_pair(data.join(n)).with_context(|| format!("reading pair {n}")))
        .collect::<Result<Vec<_>>>()?;
    create_out(&run.out)?;
    let start = Instant::now();
    let init = NetworkParams::init(&cfg.engine)?;
    let outcome = train_with(&dataset, &cfg.engine, init, |e| {
        eprintln!(
            "epoch {:>4}  lr {:.2e}  total {:.6}  sim {:.6}  smooth {:.6}  pre {:.6}  ob {:.6}  ({:.0}s)",
            e.epoch,
            e.learning_rate,
            e.loss.total,
            e.loss.sim,
            e.loss.smooth,
            e.loss.pre,
            e.loss.ob,
            start.elapsed().as_secs_f64()
        )
    })?;
    write_checkpoint(
        run.out.join("checkpoint.trcr"),
        &cfg.engine,
        &outcome.params,
    )?;
    write_loss_history(run.out.join("loss.csv"), &outcome.history)?;
    write_text(&run.out.join("config.json"), &cfg.to_json()?)?;
    println!(
        "trained {} epochs on {} pairs; checkpoint in {}",
        outcome.history.len(),
        dataset.len(),
        run.out.display()
    );
    Ok(())
}

fn register_cmd(
    run: &RunArgs,
    engine: &EngineArgs,
    data: &Path,
    only: &[String],
    checkpoint: Option<&Path>,
) -> Result<()> {
    let (mut cfg, params) = match checkpoint {
        Some(p) => {
            let (cfg, params) = read_checkpoint(p)
                .with_context(|| format!("reading checkpoint {}", p.display()))?;
            (cfg, Some(params))
        }
        None => (load_config(run)?.engine, None),
    };
    if checkpoint.is_some() && run.config.is_some() {
        eprintln!("note: the checkpoint's configuration is used; --config is ignored");
    }
    engine.apply(&mut cfg);
    cfg.validate()?;
    let all = dataset_pairs(data).with_context(|| format!("reading dataset {}", data.display()))?;
    let names: Vec<String> = if only.is_empty() {
        all
    } else {
        for n in only {
            if !all.contains(n) {
                bail!("pair {n:?} is not in dataset {}", data.display());
            }
        }
        only.to_vec()
    };
    create_out(&run.out)?;
    names
        .par_iter()
        .map(|n| {
            let pair = read_pair(data.join(n)).with_context(|| format!("reading pair {n}"))?;
            let reg = register(&pair, params.as_ref(), &cfg)
                .with_context(|| format!("registering {n}"))?;
            write_registration(&run.out.join(n), &pair, &reg)?;
            println!("{n}: loss {:.6}", reg.loss.total);
            Ok(())
        })
        .collect::<Result<Vec<_>>>()?;
    write_dataset_index(&run.out, &names)?;
    Ok(())
}

fn evaluate(run: &RunArgs, data: &Path, registrations: &Path) -> Result<()> {
    let cfg = load_config(run)?;
    let names = dataset_pairs(registrations)
        .with_context(|| format!("reading {}", registrations.display()))?;
    let pairs = read_prepared(data, &names)?;
    let reports = pairs
        .par_iter()
        .map(|p| {
            let dir = registrations.join(&p.name);
            let (phi, psi) = read_registration_maps(&dir)
                .with_context(|| format!("reading {}", dir.display()))?;
            p.evaluate(&phi, &psi, cfg.dose_statistic)
                .with_context(|| format!("evaluating {}", p.name))
        })
        .collect::<Result<Vec<MetricsReport>>>()?;
    create_out(&run.out)?;
    write_text(&run.out.join("metrics.csv"), &metrics_csv(&reports))?;
    let excluded = reports.iter().filter(|r| r.excluded).count();
    let lung: Vec<f64> = reports
        .iter()
        .filter_map(|r| Some(0.5 * (r.dsc.get("lung_left")? + r.dsc.get("lung_right")?)))
        .collect();
    println!(
        "evaluated {} pairs; mean lung DSC {:.4}; {} excluded; metrics in {}",
        reports.len(),
        lung.iter().sum::<f64>() / lung.len().max(1) as f64,
        excluded,
        run.out.join("metrics.csv").display()
    );
    Ok(())
}

fn ablate(run: &RunArgs, engine: &EngineArgs, pairs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(run)?;
    engine.apply(&mut cfg.engine);
    if let Some(n) = pairs {
        cfg.pairs = n;
    }
    cfg.validate()?;
    let prepared = (0..cfg.pairs)
        .into_par_iter()
        .map(|i| prepare_pair(&cfg, i).with_context(|| format!("generating pair {i}")))
        .collect::<Result<Vec<_>>>()?;
    let table = run_ablation(&prepared, &cfg.engine, cfg.dose_statistic)?;
    create_out(&run.out)?;
    let rows: Vec<_> = table.iter().map(|(r, _)| r.clone()).collect();
    write_text(&run.out.join("ablation.csv"), &ablation_csv(&rows))?;
    for (row, reports) in &table {
        write_text(
            &run.out.join(format!("metrics_{}.csv", row.condition)),
            &metrics_csv(reports),
        )?;
    }
    println!(
        "{:<10} {:>14} {:>10} {:>8} {:>8} {:>8}",
        "condition", "delta_t %", "mse", "lung", "heart", "cord"
    );
    for r in &rows {
        println!(
            "{:<10} {:>7.2} ± {:<5.2} {:>10.5} {:>8.3} {:>8.3} {:>8.3}",
            r.condition,
            r.delta_t_mean,
            r.delta_t_sd,
            r.tumor_mse_mean,
            r.dsc_lung,
            r.dsc_heart,
            r.dsc_cord
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Phantom { run, pairs } => phantom(run, *pairs),
        Command::Train { run, engine, data } => train(run, engine, data),
        Command::Register {
            run,
            engine,
            data,
            pair,
            checkpoint,
            ..
        } => register_cmd(run, engine, data, pair, checkpoint.as_deref()),
        Command::Evaluate {
            run,
            data,
            registrations,
        } => evaluate(run, data, registrations),
        Command::Ablate { run, engine, pairs } => ablate(run, engine, *pairs),
    }
}
