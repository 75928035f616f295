//! Group competitive objective: supervised, global-semantic and
//! distributional-regularization losses for a pair of models.

use crate::autodiff::{kl_div, softmax_temp, Graph, Segment, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{glorot, Batch, ModelParams, PackedOutput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_TAU_GSL: f64 = 0.07;
pub const DEFAULT_PROJ_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sup: f64,
    pub lambda_gsl: f64,
    pub lambda_drl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_sup: 1.0,
            lambda_gsl: 0.5,
            lambda_drl: 0.4,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_sup: f64, lambda_gsl: f64, lambda_drl: f64) -> Result<Self> {
        let w = Self {
            lambda_sup,
            lambda_gsl,
            lambda_drl,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn sup_only() -> Self {
        Self {
            lambda_sup: 1.0,
            lambda_gsl: 0.0,
            lambda_drl: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sup", self.lambda_sup),
            ("lambda_gsl", self.lambda_gsl),
            ("lambda_drl", self.lambda_drl),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Attention pooling query plus the projection into the shared space.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolingHead {
    pub owner: usize,
    /// `d`
    pub query: Tensor,
    /// `d × d_proj`
    pub proj: Tensor,
}

impl PoolingHead {
    pub fn init(owner: usize, d: usize, d_proj: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_proj == 0 {
            return Err(Error::Config("pooling head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            owner,
            query: glorot(&mut rng, d, 1, vec![d]),
            proj: glorot(&mut rng, d, d_proj, vec![d, d_proj]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.query.len()
    }

    pub fn d_proj(&self) -> usize {
        self.proj.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.query, &self.proj]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.query, &mut self.proj]
    }

    pub fn param_count(&self) -> usize {
        self.query.len() + self.proj.len()
    }
}

/// Model capacity with an attached pooling head counted in.
pub fn capacity_with_head(params: &ModelParams, head: &PoolingHead) -> usize {
    crate::model::capacity(params) + head.param_count()
}

/// A [`PoolingHead`] recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundHead {
    query: Var,
    proj: Var,
    d: usize,
}

impl BoundHead {
    pub fn bind(g: &mut Graph, head: &PoolingHead, trainable: bool) -> Result<Self> {
        let d = head.d_model();
        let q = head.query.clone().reshape(vec![d, 1])?;
        let (query, proj) = if trainable {
            (g.param(q), g.param(head.proj.clone()))
        } else {
            (g.constant(q), g.constant(head.proj.clone()))
        };
        Ok(Self { query, proj, d })
    }

    /// Leaves in [`PoolingHead::tensors`] order.
    pub fn vars(&self) -> [Var; 2] {
        [self.query, self.proj]
    }

    /// `1×d` pooled vector of hidden rows `rows` (an `L×d` node).
    pub fn pool(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let scores = g.matmul(rows, self.query)?;
        let scores = g.transpose(scores)?;
        let scores = g.scale(scores, 1.0 / (self.d as f64).sqrt());
        let alpha = g.softmax(scores, 1.0)?;
        g.matmul(alpha, rows)
    }

    /// Unit-norm projections, one row per segment of `hidden`.
    pub fn embed(&self, g: &mut Graph, hidden: Var, segments: &[Segment]) -> Result<Var> {
        let mut pooled = Vec::with_capacity(segments.len());
        for s in segments {
            let rows = g.slice_rows(hidden, s.start, s.start + s.len)?;
            pooled.push(self.pool(g, rows)?);
        }
        let z = g.concat_rows(&pooled)?;
        let p = g.matmul(z, self.proj)?;
        g.l2_normalize_rows(p)
    }
}

/// Mean of `-ln softmax(logits_t)[target_t]` over positions where `mask` holds.
pub fn supervised_loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if logits.shape().len() != 2 || targets.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "supervised_loss: logits {:?}, {} targets, {} mask entries",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    let rows: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::Input("supervised_loss: mask selects no positions".into()));
    }
    let picked: Vec<usize> = rows.iter().map(|&i| targets[i]).collect();
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, &rows, &picked)?;
    Ok(g.scalar(l))
}

/// `α = softmax(H q / √d)`, `z = Σ α_l H_l`.
pub fn attention_pool(hidden: &Tensor, head: &PoolingHead) -> Result<Vec<f64>> {
    if hidden.shape().len() != 2 || hidden.rows() == 0 || hidden.cols() != head.d_model() {
        return Err(Error::Shape(format!(
            "attention_pool: hidden {:?} vs head width {}",
            hidden.shape(),
            head.d_model()
        )));
    }
    let mut g = Graph::new();
    let b = BoundHead::bind(&mut g, head, false)?;
    let h = g.constant(hidden.clone());
    let z = b.pool(&mut g, h)?;
    Ok(g.value(z).data().to_vec())
}

/// Pooling weights over the rows of `hidden`.
pub fn attention_weights(hidden: &Tensor, head: &PoolingHead) -> Result<Vec<f64>> {
    let d = head.d_model();
    if hidden.shape().len() != 2 || hidden.rows() == 0 || hidden.cols() != d {
        return Err(Error::Shape("attention_weights: hidden width mismatch".into()));
    }
    let q = head.query.data();
    let scores: Vec<f64> = (0..hidden.rows())
        .map(|i| hidden.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    softmax_temp(&scores, 1.0)
}

/// `z P / ‖z P‖₂`.
pub fn project_normalize(z: &[f64], head: &PoolingHead) -> Result<Vec<f64>> {
    if z.len() != head.d_model() {
        return Err(Error::Shape(format!("project_normalize: z has {} entries, head expects {}", z.len(), head.d_model())));
    }
    let mut g = Graph::new();
    let b = BoundHead::bind(&mut g, head, false)?;
    let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?);
    let p = g.matmul(zv, b.proj)?;
    let n = g.l2_normalize_rows(p)?;
    Ok(g.value(n).data().to_vec())
}

/// InfoNCE between aligned `B×k` unit-vector batches on a graph.
///
/// Row `i` of `a` is the positive for row `i` of `b`; the other rows of the
/// opposite model are the negatives. With `symmetric`, the B-anchored term
/// is averaged in.
pub fn gsl_graph(g: &mut Graph, a: Var, b: Var, tau: f64, symmetric: bool) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("tau_gsl must be positive, got {tau}")));
    }
    let (ra, rb) = (g.value(a).rows(), g.value(b).rows());
    if ra != rb || g.value(a).cols() != g.value(b).cols() {
        return Err(Error::Input(format!("gsl batches differ: {:?} vs {:?}", g.value(a).shape(), g.value(b).shape())));
    }
    if ra == 0 {
        return Err(Error::Input("gsl over an empty batch".into()));
    }
    let idx: Vec<usize> = (0..ra).collect();
    let sim = g.matmul_nt(a, b)?;
    let sim = g.scale(sim, 1.0 / tau);
    let fwd = g.cross_entropy(sim, &idx, &idx)?;
    if !symmetric {
        return Ok(fwd);
    }
    let simt = g.transpose(sim)?;
    let bwd = g.cross_entropy(simt, &idx, &idx)?;
    let both = g.add(fwd, bwd)?;
    Ok(g.scale(both, 0.5))
}

/// InfoNCE value for aligned batches of unit vectors.
pub fn gsl_loss(zbar_a: &[Vec<f64>], zbar_b: &[Vec<f64>], tau: f64, symmetric: bool) -> Result<f64> {
    if zbar_a.len() != zbar_b.len() {
        return Err(Error::Input(format!("gsl batch lengths {} vs {}", zbar_a.len(), zbar_b.len())));
    }
    if zbar_a.is_empty() {
        return Err(Error::Input("gsl over an empty batch".into()));
    }
    let k = zbar_a[0].len();
    if zbar_a.iter().chain(zbar_b).any(|z| z.len() != k) {
        return Err(Error::Input("gsl vectors have differing widths".into()));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(zbar_a.len(), k, zbar_a.concat())?);
    let b = g.constant(Tensor::matrix(zbar_b.len(), k, zbar_b.concat())?);
    let l = gsl_graph(&mut g, a, b, tau, symmetric)?;
    Ok(g.scalar(l))
}

/// Two tempered next-token distributions and their mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionPair {
    pub p_a: Vec<f64>,
    pub p_b: Vec<f64>,
    pub tau_a: f64,
    pub tau_b: f64,
    pub m: Vec<f64>,
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

fn check_probs(name: &str, p: &[f64]) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.is_empty() || (s - 1.0).abs() > 1e-9 || p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::Input(format!("{name} is not a probability vector (sum {s})")));
    }
    Ok(())
}

impl DistributionPair {
    pub fn new(p_a: Vec<f64>, p_b: Vec<f64>, tau_a: f64, tau_b: f64) -> Result<Self> {
        check_tau("tau_a", tau_a)?;
        check_tau("tau_b", tau_b)?;
        if p_a.len() != p_b.len() {
            return Err(Error::Input(format!("distribution lengths {} vs {}", p_a.len(), p_b.len())));
        }
        check_probs("P_A", &p_a)?;
        check_probs("P_B", &p_b)?;
        let m = p_a.iter().zip(&p_b).map(|(a, b)| (a + b) / 2.0).collect();
        Ok(Self { p_a, p_b, tau_a, tau_b, m })
    }

    /// `P_A = softmax(z_A / τ_A)`, `P_B = softmax(z_B / τ_B)`.
    pub fn from_logits(z_a: &[f64], z_b: &[f64], tau_a: f64, tau_b: f64) -> Result<Self> {
        check_tau("tau_a", tau_a)?;
        check_tau("tau_b", tau_b)?;
        Self::new(softmax_temp(z_a, tau_a)?, softmax_temp(z_b, tau_b)?, tau_a, tau_b)
    }

    pub fn kl_a(&self) -> Result<f64> {
        kl_div(&self.p_a, &self.m)
    }

    pub fn kl_b(&self) -> Result<f64> {
        kl_div(&self.p_b, &self.m)
    }
}

/// Jensen-Shannon regularizer of a pair. `scaled` weights each KL term by
/// `τ²/2` instead of `1/2`.
pub fn drl_loss(pair: &DistributionPair, scaled: bool) -> Result<f64> {
    let (wa, wb) = drl_weights(pair.tau_a, pair.tau_b, scaled);
    Ok(wa * pair.kl_a()? + wb * pair.kl_b()?)
}

fn drl_weights(tau_a: f64, tau_b: f64, scaled: bool) -> (f64, f64) {
    if scaled {
        (tau_a * tau_a / 2.0, tau_b * tau_b / 2.0)
    } else {
        (0.5, 0.5)
    }
}

/// `P_{A,i} (V_i − E_{P_A}[V])` with `V_i = P_{B,i} / (P_{A,i} + P_{B,i})`.
///
/// Sums to zero over `i` up to rounding.
pub fn shift_force(p_a: &[f64], p_b: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = p_a
        .iter()
        .zip(p_b)
        .map(|(a, b)| if a + b > 0.0 { b / (a + b) } else { 0.5 })
        .collect();
    let ev: f64 = p_a.iter().zip(&v).map(|(p, v)| p * v).sum();
    p_a.iter().zip(&v).map(|(p, v)| p * (v - ev)).collect()
}

/// Analytic gradient of the scaled regularizer, split into its parts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DrlGradient {
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
    /// Alignment part of `grad_a` (the term that survives at `τ_A = τ_B`).
    pub align_a: Vec<f64>,
    pub align_b: Vec<f64>,
    /// `P_{A,i}(V_i − E[V])` before its coefficient.
    pub shift_a: Vec<f64>,
    pub shift_b: Vec<f64>,
}

fn one_side(p: &[f64], q: &[f64], m: &[f64], kl: f64, tau: f64, tau_rival: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let shift = shift_force(p, q);
    let coef = (tau_rival * tau_rival - tau * tau) / (2.0 * tau);
    let align: Vec<f64> = p
        .iter()
        .zip(m)
        .map(|(&pi, &mi)| if pi > 0.0 { (tau / 2.0) * pi * ((pi / mi).ln() - kl) } else { 0.0 })
        .collect();
    let grad = align.iter().zip(&shift).map(|(a, s)| a - coef * s).collect();
    (grad, align, shift)
}

/// Closed-form `∂/∂z` of the τ²-scaled regularizer for both logit vectors.
pub fn drl_grad_closed_form(z_a: &[f64], z_b: &[f64], tau_a: f64, tau_b: f64) -> Result<DrlGradient> {
    let pair = DistributionPair::from_logits(z_a, z_b, tau_a, tau_b)?;
    let (kl_a, kl_b) = (pair.kl_a()?, pair.kl_b()?);
    let (grad_a, align_a, shift_a) = one_side(&pair.p_a, &pair.p_b, &pair.m, kl_a, tau_a, tau_b);
    let (grad_b, align_b, shift_b) = one_side(&pair.p_b, &pair.p_a, &pair.m, kl_b, tau_b, tau_a);
    Ok(DrlGradient {
        grad_a,
        grad_b,
        align_a,
        align_b,
        shift_a,
        shift_b,
    })
}

/// Graph handles for the regularizer over selected rows of two logit nodes.
#[derive(Clone, Debug)]
pub struct DrlNodes {
    /// Position mean of the (possibly scaled) loss.
    pub loss: Var,
    pub kl_a: Var,
    pub kl_b: Var,
}

pub fn drl_graph(
    g: &mut Graph,
    logits_a: Var,
    logits_b: Var,
    rows: &[usize],
    tau_a: f64,
    tau_b: f64,
    scaled: bool,
) -> Result<DrlNodes> {
    if rows.is_empty() {
        return Err(Error::Input("regularizer over zero positions".into()));
    }
    let za = g.gather_rows(logits_a, rows)?;
    let zb = g.gather_rows(logits_b, rows)?;
    let pa = g.softmax(za, tau_a)?;
    let pb = g.softmax(zb, tau_b)?;
    let m = g.add(pa, pb)?;
    let m = g.scale(m, 0.5);
    let kl_a = g.kl_rows(pa, m)?;
    let kl_b = g.kl_rows(pb, m)?;
    let (wa, wb) = drl_weights(tau_a, tau_b, scaled);
    let ta = g.scale(kl_a, wa);
    let tb = g.scale(kl_b, wb);
    let per = g.add(ta, tb)?;
    let loss = g.mean(per);
    Ok(DrlNodes { loss, kl_a, kl_b })
}

/// Settings shared by every evaluation of the group objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcoSettings {
    pub weights: LossWeights,
    pub tau_gsl: f64,
    pub tau_a: f64,
    pub tau_b: f64,
    pub scaled: bool,
    pub symmetric_gsl: bool,
}

impl Default for GcoSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tau_gsl: DEFAULT_TAU_GSL,
            tau_a: 1.0,
            tau_b: 1.0,
            scaled: true,
            symmetric_gsl: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup_a: f64,
    pub sup_b: f64,
    pub gsl: f64,
    pub drl: f64,
    /// The regularizer with `1/2` weights at the same temperatures.
    pub drl_unscaled: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub drl_per_position: Vec<f64>,
}

impl LossBreakdown {
    pub fn recombine(&self) -> f64 {
        let w = &self.weights;
        w.lambda_sup * (self.sup_a + self.sup_b) + w.lambda_gsl * self.gsl + w.lambda_drl * self.drl
    }

    pub fn is_finite(&self) -> bool {
        [self.sup_a, self.sup_b, self.gsl, self.drl, self.total].iter().all(|v| v.is_finite())
    }
}

/// One group member's forward pass on a shared graph.
#[derive(Clone, Copy, Debug)]
pub struct MemberOutput<'a> {
    pub out: PackedOutput,
    pub head: &'a BoundHead,
}

/// Builds the weighted objective on `g`; returns the scalar root.
///
/// Components with a zero weight are still evaluated for the breakdown but
/// are not connected to the root, so they send no gradient.
pub fn gco_graph(
    g: &mut Graph,
    batch: &Batch,
    a: MemberOutput<'_>,
    b: MemberOutput<'_>,
    s: &GcoSettings,
) -> Result<(Var, LossBreakdown)> {
    s.weights.validate()?;
    check_tau("tau_gsl", s.tau_gsl)?;
    check_tau("tau_a", s.tau_a)?;
    check_tau("tau_b", s.tau_b)?;
    let rows = &batch.pred_rows;
    let sup_a = g.cross_entropy(a.out.logits, rows, &batch.pred_targets)?;
    let sup_b = g.cross_entropy(b.out.logits, rows, &batch.pred_targets)?;

    let za = a.head.embed(g, a.out.hidden, &batch.segments)?;
    let zb = b.head.embed(g, b.out.hidden, &batch.segments)?;
    let gsl = gsl_graph(g, za, zb, s.tau_gsl, s.symmetric_gsl)?;

    let drl = drl_graph(g, a.out.logits, b.out.logits, rows, s.tau_a, s.tau_b, s.scaled)?;

    let sup = g.add(sup_a, sup_b)?;
    let mut total = g.scale(sup, s.weights.lambda_sup);
    if s.weights.lambda_gsl != 0.0 {
        let t = g.scale(gsl, s.weights.lambda_gsl);
        total = g.add(total, t)?;
    }
    if s.weights.lambda_drl != 0.0 {
        let t = g.scale(drl.loss, s.weights.lambda_drl);
        total = g.add(total, t)?;
    }

    let (wa, wb) = drl_weights(s.tau_a, s.tau_b, s.scaled);
    let kla = g.value(drl.kl_a).data();
    let klb = g.value(drl.kl_b).data();
    let drl_per_position: Vec<f64> = kla.iter().zip(klb).map(|(x, y)| wa * x + wb * y).collect();
    let unscaled: Vec<f64> = kla.iter().zip(klb).map(|(x, y)| 0.5 * x + 0.5 * y).collect();
    let breakdown = LossBreakdown {
        sup_a: g.scalar(sup_a),
        sup_b: g.scalar(sup_b),
        gsl: g.scalar(gsl),
        drl: g.scalar(drl.loss),
        drl_unscaled: unscaled.iter().sum::<f64>() / unscaled.len() as f64,
        total: g.scalar(total),
        weights: s.weights,
        drl_per_position,
    };
    Ok((total, breakdown))
}

/// Value-only evaluation of the objective for two models on one batch.
pub fn gco_loss(
    params_a: &ModelParams,
    head_a: &PoolingHead,
    params_b: &ModelParams,
    head_b: &PoolingHead,
    batch: &Batch,
    s: &GcoSettings,
) -> Result<LossBreakdown> {
    if params_a.config.vocab_size != params_b.config.vocab_size {
        return Err(Error::Config("group members must share a vocabulary".into()));
    }
    let mut g = Graph::new();
    let ma = crate::model::BoundModel::bind(&mut g, params_a, false);
    let ha = BoundHead::bind(&mut g, head_a, false)?;
    let mb = crate::model::BoundModel::bind(&mut g, params_b, false);
    let hb = BoundHead::bind(&mut g, head_b, false)?;
    let oa = ma.run(&mut g, &batch.input_ids, &batch.segments)?;
    let ob = mb.run(&mut g, &batch.input_ids, &batch.segments)?;
    let (_, br) = gco_graph(&mut g, batch, MemberOutput { out: oa, head: &ha }, MemberOutput { out: ob, head: &hb }, s)?;
    Ok(br)
}
