//! Asymmetric group optimization: role assignment, schedules, AdamW and the
//! joint training step.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{checkpoint::Checkpoint, Batch, BoundModel, ModelParams};
use crate::objectives::{gco_graph, BoundHead, GcoSettings, LossBreakdown, LossWeights, MemberOutput, PoolingHead};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Learner is the smaller model.
    #[serde(rename = "A")]
    Reshaping,
    /// Learner is the larger model.
    #[serde(rename = "B")]
    Extraction,
    #[serde(rename = "homogeneous")]
    Homogeneous,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Reshaping => "A",
            Regime::Extraction => "B",
            Regime::Homogeneous => "homogeneous",
        })
    }
}

/// Learning-rate and temperature defaults used by [`assign_roles`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolePolicy {
    pub eta_guide: f64,
    /// `η_learner / η_guide`
    pub lr_ratio: f64,
    /// Temperature of the larger model.
    pub tau_large: f64,
    /// Temperature of the smaller model.
    pub tau_small: f64,
}

impl Default for RolePolicy {
    fn default() -> Self {
        Self {
            eta_guide: 5e-6,
            lr_ratio: 2.0,
            tau_large: 2.0,
            tau_small: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub learner: usize,
    pub guide: usize,
    pub eta_learner: f64,
    pub eta_guide: f64,
    pub tau_learner: f64,
    pub tau_guide: f64,
    pub regime: Regime,
}

impl RoleAssignment {
    pub fn eta(&self, member: usize) -> f64 {
        if member == self.learner {
            self.eta_learner
        } else {
            self.eta_guide
        }
    }

    pub fn tau(&self, member: usize) -> f64 {
        if member == self.learner {
            self.tau_learner
        } else {
            self.tau_guide
        }
    }
}

/// The lower-scoring model becomes the learner (index 0 on ties); the larger
/// model takes the low temperature (the learner takes the high one when
/// capacities are equal).
pub fn assign_roles(scores: [f64; 2], capacities: [usize; 2], policy: &RolePolicy) -> Result<RoleAssignment> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input(format!("SFT scores must be finite, got {scores:?}")));
    }
    if capacities.contains(&0) {
        return Err(Error::Input("capacities must be at least 1".into()));
    }
    if !(policy.eta_guide > 0.0) || !(policy.lr_ratio > 0.0) || !(policy.tau_large > 0.0) || !(policy.tau_small > 0.0) {
        return Err(Error::Config("role policy values must be positive".into()));
    }
    let learner = if scores[1] < scores[0] { 1 } else { 0 };
    let guide = 1 - learner;
    let (tau_learner, tau_guide, regime) = match capacities[learner].cmp(&capacities[guide]) {
        std::cmp::Ordering::Less => (policy.tau_small, policy.tau_large, Regime::Reshaping),
        std::cmp::Ordering::Greater => (policy.tau_large, policy.tau_small, Regime::Extraction),
        std::cmp::Ordering::Equal => (policy.tau_small, policy.tau_large, Regime::Homogeneous),
    };
    Ok(RoleAssignment {
        learner,
        guide,
        eta_learner: policy.eta_guide * policy.lr_ratio,
        eta_guide: policy.eta_guide,
        tau_learner,
        tau_guide,
        regime,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub eta_peak: f64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup ratio {} outside [0, 1)", self.warmup_ratio)));
        }
        if !(self.eta_peak >= 0.0) || !self.eta_peak.is_finite() {
            return Err(Error::Config(format!("peak learning rate {} is invalid", self.eta_peak)));
        }
        Ok(())
    }
}

/// Linear warmup to `eta_peak` over `wT` steps, then half-cosine decay to 0 at `T`.
pub fn lr_schedule(t: u64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if t > cfg.total_steps {
        return Err(Error::Usage(format!("step {t} beyond schedule length {}", cfg.total_steps)));
    }
    let total = cfg.total_steps as f64;
    let warm = cfg.warmup_ratio * total;
    let t = t as f64;
    if t < warm {
        return Ok(cfg.eta_peak * t / warm);
    }
    let frac = (t - warm) / (total - warm);
    Ok(cfg.eta_peak * 0.5 * (1.0 + (PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn push_blocks(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.push_block(format!("{prefix}.m"), self.m.concat());
        ck.push_block(format!("{prefix}.v"), self.v.concat());
        ck.push_block(format!("{prefix}.step"), vec![self.step as f64]);
    }

    pub fn restore_blocks(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let get = |name: &str| {
            ck.block(&format!("{prefix}.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing block {prefix}.{name}")))
        };
        for (dst, src) in [(&mut self.m, get("m")?), (&mut self.v, get("v")?)] {
            let total: usize = dst.iter().map(Vec::len).sum();
            if total != src.len() {
                return Err(Error::Checkpoint(format!("optimizer block holds {} values, expected {total}", src.len())));
            }
            let mut off = 0;
            for d in dst.iter_mut() {
                let n = d.len();
                d.copy_from_slice(&src[off..off + n]);
                off += n;
            }
        }
        self.step = get("step")?.first().copied().unwrap_or(0.0) as u64;
        Ok(())
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(state: &mut OptimizerState, params: &mut [&mut Tensor], grads: &[Vec<f64>], eta: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Usage(format!(
            "adamw_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Usage(format!("adamw_step: tensor of {} entries got {} gradients", p.len(), g.len())));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - eta * c.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w * decay - eta * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Euclidean norm over every gradient entry, accumulated in order.
pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `max_norm` when larger; returns the pre-clip norm.
pub fn clip_grads(grads: &mut [Vec<f64>], max_norm: Option<f64>) -> f64 {
    let norm = global_norm(grads);
    if let Some(max) = max_norm {
        if norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    norm
}

/// A model, its pooling head and its own optimizer subspace.
#[derive(Clone, Debug)]
pub struct Competitor {
    pub params: ModelParams,
    pub head: PoolingHead,
    pub opt: OptimizerState,
    pub schedule: ScheduleConfig,
}

impl Competitor {
    pub fn new(params: ModelParams, head: PoolingHead, adam: AdamWConfig, schedule: ScheduleConfig) -> Result<Self> {
        schedule.validate()?;
        if head.d_model() != params.config.d_model {
            return Err(Error::Config("pooling head width differs from model width".into()));
        }
        let mut tensors = params.tensors();
        tensors.extend(head.tensors());
        let opt = OptimizerState::new(adam, &tensors);
        Ok(Self {
            params,
            head,
            opt,
            schedule,
        })
    }

    fn bind(&self, g: &mut Graph) -> Result<(BoundModel, BoundHead)> {
        let m = BoundModel::bind(g, &self.params, true);
        let h = BoundHead::bind(g, &self.head, true)?;
        Ok((m, h))
    }

    fn vars(model: &BoundModel, head: &BoundHead) -> Vec<Var> {
        let mut v = model.param_vars().to_vec();
        v.extend(head.vars());
        v
    }

    fn collect_grads(g: &Graph, vars: &[Var], tensors: &[&Tensor]) -> Vec<Vec<f64>> {
        vars.iter()
            .zip(tensors)
            .map(|(&v, t)| match g.grad(v) {
                Some(gr) => gr.data().to_vec(),
                None => vec![0.0; t.len()],
            })
            .collect()
    }

    fn current_lr(&self) -> Result<f64> {
        lr_schedule(self.opt.step.min(self.schedule.total_steps), &self.schedule)
    }

    /// Clips and applies `grads`; returns `(pre-clip norm, learning rate)`.
    fn apply(&mut self, mut grads: Vec<Vec<f64>>, clip: Option<f64>) -> Result<(f64, f64)> {
        let norm = clip_grads(&mut grads, clip);
        if !norm.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient norm {norm}")));
        }
        let lr = self.current_lr()?;
        let mut tensors = self.params.tensors_mut();
        tensors.extend(self.head.tensors_mut());
        adamw_step(&mut self.opt, &mut tensors, &grads, lr)?;
        Ok((norm, lr))
    }

    pub fn capacity(&self) -> usize {
        crate::model::capacity(&self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStepReport {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One supervised-only update of a single model.
pub fn sft_step(c: &mut Competitor, batch: &Batch, clip: Option<f64>) -> Result<SftStepReport> {
    let mut g = Graph::new();
    let (model, head) = c.bind(&mut g)?;
    let out = model.run(&mut g, &batch.input_ids, &batch.segments)?;
    let loss = g.cross_entropy(out.logits, &batch.pred_rows, &batch.pred_targets)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("supervised loss is {value} at step {}", c.opt.step)));
    }
    g.backward(loss)?;
    let mut tensors = c.params.tensors();
    tensors.extend(c.head.tensors());
    let grads = Competitor::collect_grads(&g, &Competitor::vars(&model, &head), &tensors);
    drop(g);
    let (grad_norm, lr) = c.apply(grads, clip)?;
    Ok(SftStepReport {
        step: c.opt.step,
        loss: value,
        grad_norm,
        lr,
    })
}

/// Two competitors trained against each other.
#[derive(Clone, Debug)]
pub struct CompetitiveGroup {
    pub members: [Competitor; 2],
    pub roles: RoleAssignment,
    pub tau_gsl: f64,
    pub symmetric_gsl: bool,
    pub clip: Option<f64>,
}

impl CompetitiveGroup {
    pub fn new(members: [Competitor; 2], roles: RoleAssignment) -> Result<Self> {
        if members[0].params.config.vocab_size != members[1].params.config.vocab_size {
            return Err(Error::Config("group members must share a vocabulary".into()));
        }
        Ok(Self {
            members,
            roles,
            tau_gsl: crate::objectives::DEFAULT_TAU_GSL,
            symmetric_gsl: true,
            clip: Some(1.0),
        })
    }

    pub fn settings(&self, weights: LossWeights, scaled: bool) -> GcoSettings {
        GcoSettings {
            weights,
            tau_gsl: self.tau_gsl,
            tau_a: self.roles.tau(0),
            tau_b: self.roles.tau(1),
            scaled,
            symmetric_gsl: self.symmetric_gsl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: LossBreakdown,
    pub grad_norms: [f64; 2],
    pub lrs: [f64; 2],
}

/// Joint forward on one batch, a single backward through the weighted
/// objective, then learner and guide updates with their own rates.
pub fn gcl_train_step(group: &mut CompetitiveGroup, batch: &Batch, weights: LossWeights, scaled: bool) -> Result<StepReport> {
    let settings = group.settings(weights, scaled);
    let mut g = Graph::new();
    let (ma, ha) = group.members[0].bind(&mut g)?;
    let (mb, hb) = group.members[1].bind(&mut g)?;
    let oa = ma.run(&mut g, &batch.input_ids, &batch.segments)?;
    let ob = mb.run(&mut g, &batch.input_ids, &batch.segments)?;
    let (root, breakdown) = gco_graph(
        &mut g,
        batch,
        MemberOutput { out: oa, head: &ha },
        MemberOutput { out: ob, head: &hb },
        &settings,
    )?;
    if !breakdown.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite objective (sup {}/{}, gsl {}, drl {})",
            breakdown.sup_a, breakdown.sup_b, breakdown.gsl, breakdown.drl
        )));
    }
    g.backward(root)?;
    let mut grads = [Vec::new(), Vec::new()];
    for (k, (m, h)) in [(&ma, &ha), (&mb, &hb)].into_iter().enumerate() {
        let c = &group.members[k];
        let mut tensors = c.params.tensors();
        tensors.extend(c.head.tensors());
        grads[k] = Competitor::collect_grads(&g, &Competitor::vars(m, h), &tensors);
    }
    drop(g);
    let mut grad_norms = [0.0; 2];
    let mut lrs = [0.0; 2];
    let [ga, gb] = grads;
    let mut grads = [Some(ga), Some(gb)];
    for k in [group.roles.learner, group.roles.guide] {
        let gk = grads[k].take().expect("each member updated once");
        let (n, lr) = group.members[k].apply(gk, group.clip)?;
        grad_norms[k] = n;
        lrs[k] = lr;
    }
    Ok(StepReport {
        step: group.members[0].opt.step,
        breakdown,
        grad_norms,
        lrs,
    })
}
