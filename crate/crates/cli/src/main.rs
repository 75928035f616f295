//! `gcl`: dataset generation, training, evaluation and sweeps.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gcl_core::harness::config::{ConfigEcho, RunConfig};
use gcl_core::harness::gradcheck::{drl_gradcheck, GradcheckConfig};
use gcl_core::harness::runner::{load_member, prepare_data, RunReport};
use gcl_core::harness::{self, NavVocab};
use gcl_core::metrics::{evaluate_model, Embedder};
use gcl_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gcl", version, about = "Competitive co-training of two small models on synthetic navigation scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test scene set and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        grid_size: Option<usize>,
        #[arg(long)]
        multiplicity: Option<usize>,
    },
    /// Supervised training of both models.
    TrainSft(RunArgs),
    /// Competitive training of the group.
    TrainGcl(RunArgs),
    /// Score a checkpoint on a test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Check the regularizer gradient against autodiff and finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        vocab: usize,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One competitive run per learning-rate ratio.
    SweepLr {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
    /// One competitive run per (τ_learner, τ_guide) cell.
    SweepTemp {
        #[command(flatten)]
        run: RunArgs,
        /// Cells as `learner:guide`, comma separated.
        #[arg(long, value_delimiter = ',')]
        taus: Vec<String>,
    },
    /// One competitive run per loss-weight setting of the config.
    Ablate(RunArgs),
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    sft_report: Option<PathBuf>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> gcl_core::Result<(RunConfig, ConfigEcho)> {
        let (mut cfg, mut echo) = match &self.config {
            Some(p) => harness::load_config(p)?,
            None => {
                let cfg = RunConfig::default();
                let echo = ConfigEcho::from_config(&cfg)?;
                (cfg, echo)
            }
        };
        let mut set = |entry: String| echo.overrides.push(entry);
        if let Some(v) = self.seed {
            cfg.seed = v;
            set(format!("seed={v}"));
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
            set(format!("epochs={v}"));
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
            set(format!("batch_size={v}"));
        }
        if let Some(v) = self.lr_scale {
            cfg.lr_scale = v;
            set(format!("lr_scale={v}"));
        }
        if let Some(v) = &self.data_dir {
            cfg.data.dir = Some(v.clone());
            cfg.data.generate = None;
            set(format!("data.dir={}", v.display()));
        }
        if let Some(v) = &self.out_dir {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = &self.sft_report {
            cfg.sft_report = Some(v.clone());
            set(format!("sft_report={}", v.display()));
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
            set(format!("eval_every={v}"));
        }
        if let Some(v) = self.max_new_tokens {
            cfg.max_new_tokens = v;
            set(format!("max_new_tokens={v}"));
        }
        cfg.validate()?;
        cfg.check_paths()?;
        Ok((cfg, echo))
    }
}

enum Outcome {
    Done,
    Aborted,
    PartialSweep,
}

fn summarize(report: &RunReport) -> Outcome {
    println!("run {} ({})", report.run_id, report.mode);
    if let Some(r) = report.roles {
        println!(
            "roles: learner {} guide {} tau {}/{} regime {}",
            report.members[r.learner].name, report.members[r.guide].name, r.tau_learner, r.tau_guide, r.regime
        );
    }
    for m in &report.final_metrics {
        println!(
            "{} epoch {}: action_f1 {:.4} perception_cos {:.4} reasoning_cos {:.4}",
            m.model, m.epoch, m.action_f1, m.perception_cos, m.reasoning_cos
        );
    }
    if let Some(p) = &report.artifacts.report {
        println!("report: {}", p.display());
    }
    match &report.aborted {
        Some(msg) => {
            eprintln!("aborted: {msg}");
            Outcome::Aborted
        }
        None => Outcome::Done,
    }
}

fn sweep_result(out: harness::SweepOutcome) -> Outcome {
    for r in &out.rows {
        println!(
            "{} {} learner={:?} f1=({:?}, {:?}){}",
            r.cell,
            r.status,
            r.learner,
            r.action_f1_a,
            r.action_f1_b,
            r.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
        );
    }
    if let Some(p) = &out.csv {
        println!("sweep: {}", p.display());
    }
    if out.failures() > 0 {
        Outcome::PartialSweep
    } else {
        Outcome::Done
    }
}

fn parse_taus(cells: &[String]) -> Result<Vec<[f64; 2]>> {
    cells
        .iter()
        .map(|c| {
            let (l, g) = c.split_once(':').with_context(|| format!("temperature cell {c:?} is not learner:guide"))?;
            Ok([l.trim().parse()?, g.trim().parse()?])
        })
        .collect()
}

fn execute(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenData {
            out,
            run,
            n_train,
            n_test,
            grid_size,
            multiplicity,
        } => {
            let (cfg, _) = run.load()?;
            let mut d = cfg
                .data
                .generate
                .clone()
                .context("gen-data needs an inline [data.generate] table")?;
            d.seed = run.seed.unwrap_or(d.seed);
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_test = n_test.unwrap_or(d.n_test);
            d.grid_size = grid_size.unwrap_or(d.grid_size);
            d.multiplicity = multiplicity.unwrap_or(d.multiplicity);
            let ds = harness::gen_dataset(&d)?;
            harness::write_dataset(&out, &ds)?;
            println!(
                "{} train / {} test scenarios, checksum {}",
                ds.train.len(),
                ds.test.len(),
                ds.manifest.checksum
            );
            Ok(Outcome::Done)
        }
        Command::TrainSft(run) => {
            let (cfg, echo) = run.load()?;
            Ok(summarize(&harness::run_sft(&cfg, &echo)?))
        }
        Command::TrainGcl(run) => {
            let (cfg, echo) = run.load()?;
            Ok(summarize(&harness::run_gcl(&cfg, &echo)?))
        }
        Command::Eval { checkpoint, run, name } => {
            let (cfg, _) = run.load()?;
            let (params, _) = load_member(&checkpoint)?;
            let data = prepare_data(&cfg)?;
            let vocab = NavVocab::new()?;
            let emb = Embedder::new(cfg.embedder.clone(), vocab.spec.size)?;
            let samples: Vec<_> = data.test.iter().map(|s| s.to_eval_sample()).collect();
            let row = evaluate_model(&params, &samples, &emb, &vocab.format, cfg.max_new_tokens, &name, 0)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
            Ok(Outcome::Done)
        }
        Command::Gradcheck {
            pairs,
            vocab,
            h,
            seed,
            tol,
            out,
        } => {
            let cfg = GradcheckConfig {
                pairs,
                vocab,
                h,
                seed,
                ..GradcheckConfig::default()
            };
            let s = drl_gradcheck(&cfg)?;
            println!("closed form vs autodiff: max rel err {:.3e}", s.max_autodiff_rel_err);
            println!("closed form vs finite differences: max rel err {:.3e}", s.max_fd_rel_err);
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_vec_pretty(&s)?)?;
            }
            if s.max_fd_rel_err <= tol && s.max_autodiff_rel_err <= tol {
                Ok(Outcome::Done)
            } else {
                eprintln!("gradient check exceeded tolerance {tol:e}");
                Ok(Outcome::Aborted)
            }
        }
        Command::SweepLr { run, ratios } => {
            let (cfg, echo) = run.load()?;
            let ratios = if ratios.is_empty() { cfg.lr_ratios.clone() } else { ratios };
            if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0)) {
                return Err(Error::Config("ratios must be non-empty and positive".into()).into());
            }
            Ok(sweep_result(harness::sweep_lr_ratio(&cfg, &echo, &ratios)?))
        }
        Command::SweepTemp { run, taus } => {
            let (cfg, echo) = run.load()?;
            let grid = if taus.is_empty() {
                cfg.temperature_grid.clone()
            } else {
                parse_taus(&taus).map_err(|e| Error::Config(e.to_string()))?
            };
            if grid.is_empty() {
                return Err(Error::Config("temperature grid is empty".into()).into());
            }
            Ok(sweep_result(harness::sweep_temperature(&cfg, &echo, &grid)?))
        }
        Command::Ablate(run) => {
            let (cfg, echo) = run.load()?;
            if cfg.ablations.is_empty() {
                return Err(Error::Config("no ablation settings configured".into()).into());
            }
            Ok(sweep_result(harness::ablate_weights(&cfg, &echo, &cfg.ablations)?))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Aborted) => ExitCode::from(2),
        Ok(Outcome::PartialSweep) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::Numerical(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
