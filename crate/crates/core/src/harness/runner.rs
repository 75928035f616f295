//! Supervised and competitive training runs with their on-disk artifacts.

use super::config::{ConfigEcho, Mode, RunConfig};
use super::dataset::{gen_dataset, load_dataset, Dataset, NavVocab, BOS, PAD};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, Embedder, EvalSample, MetricsRow};
use crate::model::checkpoint::{model_block, params_from_block, tensor_block, Checkpoint};
use crate::model::{init_model, Batch, ModelParams, Sequence};
use crate::objectives::{LossWeights, PoolingHead};
use crate::optimizer::{
    assign_roles, gcl_train_step, sft_step, AdamWConfig, CompetitiveGroup, Competitor, RoleAssignment, ScheduleConfig,
};
use crate::autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Independent 64-bit seed for sub-stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub name: String,
    pub capacity: usize,
    pub eta_peak: f64,
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_sup: [f64; 2],
    pub mean_gsl: Option<f64>,
    pub mean_drl: Option<f64>,
}

/// One line of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub batch: Vec<String>,
    pub sup: [f64; 2],
    pub gsl: Option<f64>,
    pub drl: Option<f64>,
    pub drl_unscaled: Option<f64>,
    pub total: f64,
    pub grad_norms: [f64; 2],
    pub lrs: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub report: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    pub steps: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub mode: Mode,
    pub config_text: String,
    pub overrides: Vec<String>,
    pub dataset_checksum: String,
    pub members: Vec<MemberSummary>,
    pub roles: Option<RoleAssignment>,
    pub sft_scores: Option<[f64; 2]>,
    pub weights: LossWeights,
    pub ago: bool,
    pub total_steps: u64,
    pub epochs: Vec<EpochSummary>,
    pub metrics: Vec<MetricsRow>,
    /// Last evaluation of each member, in member order.
    pub final_metrics: Vec<MetricsRow>,
    /// Reason the run stopped early.
    pub aborted: Option<String>,
    pub wall_clock_secs: f64,
    pub artifacts: RunArtifacts,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Final action F1 of each member.
    pub fn final_scores(&self) -> Result<[f64; 2]> {
        match self.final_metrics.as_slice() {
            [a, b] => Ok([a.action_f1, b.action_f1]),
            _ => Err(Error::Config(format!("run {} has no final evaluation", self.run_id))),
        }
    }
}

/// Loads or generates the configured scenes.
pub fn prepare_data(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.dir, &cfg.data.generate) {
        (Some(dir), None) => load_dataset(dir),
        (None, Some(g)) => gen_dataset(g),
        _ => Err(Error::Config("set exactly one of data.dir and data.generate".into())),
    }
}

fn init_competitors(cfg: &RunConfig, etas: [f64; 2], total_steps: u64) -> Result<[Competitor; 2]> {
    let vocab_size = super::dataset::VOCAB_SIZE;
    let mk = |k: usize| -> Result<Competitor> {
        let mc = cfg.models[k].model_config(vocab_size);
        let params = init_model(&mc, derive_seed(cfg.seed, 1 + k as u64))?;
        let head = PoolingHead::init(k, mc.d_model, cfg.d_proj, derive_seed(cfg.seed, 11 + k as u64))?;
        Competitor::new(
            params,
            head,
            AdamWConfig::default(),
            ScheduleConfig {
                eta_peak: etas[k],
                total_steps,
                warmup_ratio: cfg.warmup_ratio,
            },
        )
    };
    Ok([mk(0)?, mk(1)?])
}

/// SFT scores from the config or from a referenced supervised report.
pub fn resolve_sft_scores(cfg: &RunConfig) -> Result<[f64; 2]> {
    if let Some(s) = cfg.sft_scores {
        return Ok(s);
    }
    let Some(path) = &cfg.sft_report else {
        return Err(Error::Config(
            "competitive training needs sft_scores or sft_report to assign roles".into(),
        ));
    };
    let report = RunReport::load(path)?;
    if report.mode != Mode::Sft {
        return Err(Error::Config(format!("{} is not a supervised run report", path.display())));
    }
    let names: Vec<&str> = report.members.iter().map(|m| m.name.as_str()).collect();
    let want: Vec<&str> = cfg.models.iter().map(|m| m.name.as_str()).collect();
    if names != want {
        return Err(Error::Config(format!("report members {names:?} differ from configured {want:?}")));
    }
    report.final_scores()
}

/// Roles and per-member rates for a competitive run.
pub fn resolve_roles(cfg: &RunConfig, capacities: [usize; 2]) -> Result<RoleAssignment> {
    let scores = resolve_sft_scores(cfg)?;
    let caps = cfg.capacities.unwrap_or(capacities);
    let mut roles = assign_roles(scores, caps, &cfg.roles)?;
    if cfg.ago {
        if let Some([tl, tg]) = cfg.taus {
            roles.tau_learner = tl;
            roles.tau_guide = tg;
        }
        roles.eta_learner *= cfg.lr_scale;
        roles.eta_guide *= cfg.lr_scale;
    } else {
        roles.eta_learner = cfg.sft_eta * cfg.lr_scale;
        roles.eta_guide = cfg.sft_eta * cfg.lr_scale;
        roles.tau_learner = 1.0;
        roles.tau_guide = 1.0;
    }
    Ok(roles)
}

struct Outputs {
    metrics: Option<csv::Writer<std::fs::File>>,
    steps: Option<std::io::BufWriter<std::fs::File>>,
    artifacts: RunArtifacts,
}

impl Outputs {
    fn open(dir: Option<&Path>, run_id: &str) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                metrics: None,
                steps: None,
                artifacts: RunArtifacts::default(),
            });
        };
        std::fs::create_dir_all(dir)?;
        let mp = dir.join(format!("metrics-{run_id}.csv"));
        let sp = dir.join(format!("steps-{run_id}.jsonl"));
        let metrics = csv::Writer::from_path(&mp).map_err(csv_err)?;
        let steps = std::io::BufWriter::new(std::fs::File::create(&sp)?);
        Ok(Self {
            metrics: Some(metrics),
            steps: Some(steps),
            artifacts: RunArtifacts {
                report: Some(dir.join(format!("report-{run_id}.json"))),
                metrics: Some(mp),
                steps: Some(sp),
                checkpoints: Vec::new(),
            },
        })
    }

    fn step(&mut self, rec: &StepRecord) -> Result<()> {
        if let Some(w) = &mut self.steps {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        if let Some(w) = &mut self.metrics {
            w.serialize(row).map_err(csv_err)?;
            w.flush()?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        if let Some(w) = &mut self.steps {
            w.flush()?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

/// Saves weights, head and optimizer state of one member.
pub fn save_member(path: &Path, c: &Competitor, seed: u64) -> Result<()> {
    let mut ck = Checkpoint::new(c.params.config.clone(), seed, c.opt.step);
    ck.push_block("model", model_block(&c.params));
    ck.push_block("head.query", tensor_block(&c.head.query));
    ck.push_block("head.proj", tensor_block(&c.head.proj));
    c.opt.push_blocks(&mut ck, "opt");
    ck.save(path)
}

/// Weights and pooling head stored by [`save_member`].
pub fn load_member(path: &Path) -> Result<(ModelParams, Option<PoolingHead>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck
        .block("model")
        .ok_or_else(|| Error::Checkpoint(format!("{} has no model block", path.display())))?;
    let params = params_from_block(&ck.header.model, model)?;
    let head = match (ck.block("head.query"), ck.block("head.proj")) {
        (Some(q), Some(p)) => {
            let d = q.len();
            if d != params.config.d_model || p.len() % d != 0 || p.is_empty() {
                return Err(Error::Checkpoint("pooling head blocks have inconsistent sizes".into()));
            }
            Some(PoolingHead {
                owner: 0,
                query: Tensor::from_vec(q.to_vec()),
                proj: Tensor::new(vec![d, p.len() / d], p.to_vec())?,
            })
        }
        _ => None,
    };
    Ok((params, head))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Default)]
struct EpochAcc {
    sup: [Vec<f64>; 2],
    gsl: Vec<f64>,
    drl: Vec<f64>,
}

enum Trainer {
    Sft([Competitor; 2]),
    Gcl(CompetitiveGroup),
}

impl Trainer {
    fn members(&self) -> [&Competitor; 2] {
        match self {
            Trainer::Sft([a, b]) => [a, b],
            Trainer::Gcl(g) => [&g.members[0], &g.members[1]],
        }
    }
}

/// Runs the configured mode. Numerical failures stop training and are
/// reported through [`RunReport::aborted`].
pub fn run(cfg: &RunConfig, echo: &ConfigEcho) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    let vocab = NavVocab::new()?;
    let embedder = Embedder::new(cfg.embedder.clone(), vocab.spec.size)?;
    let train: Vec<Sequence> = data.train.iter().map(|s| s.to_sequence(&vocab)).collect();
    let test: Vec<EvalSample> = data.test.iter().map(|s| s.to_eval_sample()).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("training and test splits must be non-empty".into()));
    }
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let max_len = cfg.models.iter().map(|m| m.max_len).min().expect("two models");
    let run_id = echo.run_id();

    let (mut trainer, roles, sft_scores, weights) = match cfg.mode {
        Mode::Sft => {
            let eta = cfg.sft_eta * cfg.lr_scale;
            let members = init_competitors(cfg, [eta, eta], total_steps)?;
            (Trainer::Sft(members), None, None, LossWeights::sup_only())
        }
        Mode::Gcl => {
            let v = super::dataset::VOCAB_SIZE;
            let caps = [cfg.models[0].model_config(v).param_count(), cfg.models[1].model_config(v).param_count()];
            let roles = resolve_roles(cfg, caps)?;
            let members = init_competitors(cfg, [roles.eta(0), roles.eta(1)], total_steps)?;
            let mut group = CompetitiveGroup::new(members, roles)?;
            group.tau_gsl = cfg.tau_gsl;
            group.symmetric_gsl = cfg.symmetric_gsl;
            group.clip = cfg.clip;
            (Trainer::Gcl(group), Some(roles), Some(resolve_sft_scores(cfg)?), cfg.weights)
        }
    };
    let members: Vec<MemberSummary> = trainer
        .members()
        .iter()
        .enumerate()
        .map(|(k, c)| MemberSummary {
            name: cfg.models[k].name.clone(),
            capacity: c.capacity(),
            eta_peak: c.schedule.eta_peak,
            tau: roles.map(|r| r.tau(k)),
        })
        .collect();

    let mut out = Outputs::open(cfg.out_dir.as_deref(), &run_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 100));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut all_metrics = Vec::new();
    let mut final_metrics = Vec::new();
    let mut aborted = None;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochAcc::default();
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<Sequence> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = Batch::new(seqs, BOS, PAD, max_len)?;
            let ids: Vec<String> = batch.ids().map(str::to_string).collect();
            let rec = match &mut trainer {
                Trainer::Sft(ms) => {
                    let mut reps = Vec::with_capacity(2);
                    for m in ms.iter_mut() {
                        match sft_step(m, &batch, cfg.clip) {
                            Ok(r) => reps.push(r),
                            Err(Error::Numerical(msg)) => {
                                aborted = Some(msg);
                                break 'epochs;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    StepRecord {
                        step: reps[0].step,
                        epoch,
                        batch: ids,
                        sup: [reps[0].loss, reps[1].loss],
                        gsl: None,
                        drl: None,
                        drl_unscaled: None,
                        total: reps[0].loss + reps[1].loss,
                        grad_norms: [reps[0].grad_norm, reps[1].grad_norm],
                        lrs: [reps[0].lr, reps[1].lr],
                    }
                }
                Trainer::Gcl(g) => match gcl_train_step(g, &batch, weights, cfg.scaled_drl) {
                    Ok(r) => StepRecord {
                        step: r.step,
                        epoch,
                        batch: ids,
                        sup: [r.breakdown.sup_a, r.breakdown.sup_b],
                        gsl: Some(r.breakdown.gsl),
                        drl: Some(r.breakdown.drl),
                        drl_unscaled: Some(r.breakdown.drl_unscaled),
                        total: r.breakdown.total,
                        grad_norms: r.grad_norms,
                        lrs: r.lrs,
                    },
                    Err(Error::Numerical(msg)) => {
                        aborted = Some(msg);
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                },
            };
            acc.sup[0].push(rec.sup[0]);
            acc.sup[1].push(rec.sup[1]);
            acc.gsl.extend(rec.gsl);
            acc.drl.extend(rec.drl);
            out.step(&rec)?;
        }
        epochs.push(EpochSummary {
            epoch,
            steps: acc.sup[0].len(),
            mean_sup: [mean(&acc.sup[0]), mean(&acc.sup[1])],
            mean_gsl: (!acc.gsl.is_empty()).then(|| mean(&acc.gsl)),
            mean_drl: (!acc.drl.is_empty()).then(|| mean(&acc.drl)),
        });
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            final_metrics.clear();
            for (k, c) in trainer.members().iter().enumerate() {
                let row = evaluate_model(
                    &c.params,
                    &test,
                    &embedder,
                    &vocab.format,
                    cfg.max_new_tokens,
                    &cfg.models[k].name,
                    epoch,
                )?;
                out.metrics(&row)?;
                all_metrics.push(row.clone());
                final_metrics.push(row);
            }
        }
    }
    out.finish()?;

    if aborted.is_none() && cfg.save_checkpoints {
        if let Some(dir) = &cfg.out_dir {
            for (k, c) in trainer.members().iter().enumerate() {
                let p = dir.join(format!("ckpt-{run_id}-{}.bin", cfg.models[k].name));
                save_member(&p, c, cfg.seed)?;
                out.artifacts.checkpoints.push(p);
            }
        }
    }

    let report = RunReport {
        run_id,
        mode: cfg.mode,
        config_text: echo.text.clone(),
        overrides: echo.overrides.clone(),
        dataset_checksum: data.manifest.checksum.clone(),
        members,
        roles,
        sft_scores,
        weights,
        ago: cfg.mode == Mode::Gcl && cfg.ago,
        total_steps,
        epochs,
        metrics: all_metrics,
        final_metrics,
        aborted,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        artifacts: out.artifacts,
    };
    if let Some(p) = &report.artifacts.report {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        std::fs::write(p, bytes)?;
    }
    Ok(report)
}

/// Supervised run of both members, whatever `cfg.mode` says.
pub fn run_sft(cfg: &RunConfig, echo: &ConfigEcho) -> Result<RunReport> {
    let mut c = cfg.clone();
    c.mode = Mode::Sft;
    run(&c, echo)
}

/// Competitive run; fails with a config error when no SFT scores are known.
pub fn run_gcl(cfg: &RunConfig, echo: &ConfigEcho) -> Result<RunReport> {
    let mut c = cfg.clone();
    c.mode = Mode::Gcl;
    run(&c, echo)
}
