use super::{Batch, ModelConfig, ModelParams};
use crate::autodiff::{Graph, Segment, Tensor, Var};
use crate::error::{Error, Result};

/// Final hidden states and vocabulary logits, one row per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
}

/// Graph handles for a packed forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PackedOutput {
    pub hidden: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
struct BoundLayer {
    ln1_gain: Var,
    ln1_bias: Var,
    w_qkv: Var,
    b_qkv: Var,
    w_out: Var,
    b_out: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w_ff1: Var,
    b_ff1: Var,
    w_ff2: Var,
    b_ff2: Var,
}

/// A model's weights recorded as leaves of a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    config: ModelConfig,
    embedding: Var,
    layers: Vec<BoundLayer>,
    final_norm: Option<(Var, Var)>,
    output: Option<Var>,
    vars: Vec<Var>,
}

impl BoundModel {
    /// Records every weight as a leaf; `trainable` controls gradient tracking.
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let mut vars = Vec::new();
        let mut leaf = |g: &mut Graph, t: &Tensor| {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.push(v);
            v
        };
        let embedding = leaf(g, &params.embedding);
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                ln1_gain: leaf(g, &l.ln1_gain),
                ln1_bias: leaf(g, &l.ln1_bias),
                w_qkv: leaf(g, &l.w_qkv),
                b_qkv: leaf(g, &l.b_qkv),
                w_out: leaf(g, &l.w_out),
                b_out: leaf(g, &l.b_out),
                ln2_gain: leaf(g, &l.ln2_gain),
                ln2_bias: leaf(g, &l.ln2_bias),
                w_ff1: leaf(g, &l.w_ff1),
                b_ff1: leaf(g, &l.b_ff1),
                w_ff2: leaf(g, &l.w_ff2),
                b_ff2: leaf(g, &l.b_ff2),
            })
            .collect();
        let final_norm = match (&params.final_gain, &params.final_bias) {
            (Some(a), Some(b)) => Some((leaf(g, a), leaf(g, b))),
            _ => None,
        };
        let output = params.output.as_ref().map(|o| leaf(g, o));
        Self {
            config: params.config.clone(),
            embedding,
            layers,
            final_norm,
            output,
            vars,
        }
    }

    /// Leaves in [`ModelParams::tensors`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    /// Hidden states for packed `ids` (before the output projection).
    pub fn hidden(&self, g: &mut Graph, ids: &[usize], segments: &[Segment]) -> Result<Var> {
        let cfg = &self.config;
        let d = cfg.d_model;
        for s in segments {
            if s.len > cfg.max_len {
                return Err(Error::Input(format!(
                    "sequence of length {} exceeds max_len {}",
                    s.len, cfg.max_len
                )));
            }
        }
        let x = g.embedding(self.embedding, ids)?;
        let pos = g.constant(positions(ids.len(), d, segments)?);
        let mut x = g.add(x, pos)?;
        for l in &self.layers {
            let h = g.layer_norm(x, l.ln1_gain, l.ln1_bias)?;
            let qkv = g.matmul(h, l.w_qkv)?;
            let qkv = g.add_row_broadcast(qkv, l.b_qkv)?;
            let a = g.causal_attention(qkv, cfg.heads, segments)?;
            let o = g.matmul(a, l.w_out)?;
            let o = g.add_row_broadcast(o, l.b_out)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, l.ln2_gain, l.ln2_bias)?;
            let f = g.matmul(h, l.w_ff1)?;
            let f = g.add_row_broadcast(f, l.b_ff1)?;
            let f = g.gelu(f);
            let f = g.matmul(f, l.w_ff2)?;
            let f = g.add_row_broadcast(f, l.b_ff2)?;
            x = g.add(x, f)?;
        }
        if let Some((gain, bias)) = self.final_norm {
            x = g.layer_norm(x, gain, bias)?;
        }
        Ok(x)
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn project(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        match self.output {
            Some(w) => g.matmul(hidden, w),
            None => g.matmul_nt(hidden, self.embedding),
        }
    }

    pub fn run(&self, g: &mut Graph, ids: &[usize], segments: &[Segment]) -> Result<PackedOutput> {
        let hidden = self.hidden(g, ids, segments)?;
        let logits = self.project(g, hidden)?;
        Ok(PackedOutput { hidden, logits })
    }
}

/// Sinusoidal position codes; positions restart at 0 in every segment.
fn positions(rows: usize, d: usize, segments: &[Segment]) -> Result<Tensor> {
    let mut data = vec![0.0; rows * d];
    for s in segments {
        for p in 0..s.len {
            let row = &mut data[(s.start + p) * d..(s.start + p + 1) * d];
            for i in 0..d {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = p as f64 * freq;
                row[i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
    }
    Tensor::matrix(rows, d, data)
}

fn check_ids(params: &ModelParams, ids: &[usize]) -> Result<()> {
    let v = params.config.vocab_size;
    if let Some(bad) = ids.iter().find(|&&id| id >= v) {
        return Err(Error::Input(format!("token id {bad} >= vocabulary size {v}")));
    }
    Ok(())
}

/// Forward pass over one token sequence.
pub fn forward_tokens(params: &ModelParams, ids: &[usize]) -> Result<ForwardOutput> {
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    check_ids(params, ids)?;
    let seg = [Segment { start: 0, len: ids.len() }];
    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params, false);
    let out = m.run(&mut g, ids, &seg)?;
    Ok(ForwardOutput {
        hidden: g.value(out.hidden).clone(),
        logits: g.value(out.logits).clone(),
    })
}

/// Forward pass over a packed batch; rows follow `batch.input_ids`.
pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    check_ids(params, &batch.input_ids)?;
    let mut g = Graph::new();
    let m = BoundModel::bind(&mut g, params, false);
    let out = m.run(&mut g, &batch.input_ids, &batch.segments)?;
    Ok(ForwardOutput {
        hidden: g.value(out.hidden).clone(),
        logits: g.value(out.logits).clone(),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of one prompt; see [`generate_batch`].
pub fn generate(params: &ModelParams, prefix: &[usize], max_new: usize, eos: usize) -> Result<Vec<usize>> {
    let mut out = generate_batch(params, &[prefix.to_vec()], max_new, eos)?;
    Ok(out.pop().unwrap_or_default())
}

/// Greedy decoding for several prompts at once.
///
/// Each output holds the emitted tokens, including a final `eos` when one was
/// produced. Decoding also stops when the model's context is full.
pub fn generate_batch(
    params: &ModelParams,
    prefixes: &[Vec<usize>],
    max_new: usize,
    eos: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_new == 0 {
        return Err(Error::Usage("max_len must be at least 1".into()));
    }
    for p in prefixes {
        if p.is_empty() {
            return Err(Error::Input("empty generation prefix".into()));
        }
        check_ids(params, p)?;
    }
    let max_ctx = params.config.max_len;
    let mut seqs: Vec<Vec<usize>> = prefixes.to_vec();
    let mut emitted: Vec<Vec<usize>> = vec![Vec::new(); prefixes.len()];
    let mut active: Vec<usize> = (0..prefixes.len()).filter(|&i| seqs[i].len() <= max_ctx).collect();

    let mut g = Graph::new();
    let model = BoundModel::bind(&mut g, params, false);
    let mark = g.len();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let mut ids = Vec::new();
        let mut segments = Vec::with_capacity(active.len());
        let mut last_rows = Vec::with_capacity(active.len());
        for &i in &active {
            let start = ids.len();
            ids.extend(&seqs[i]);
            segments.push(Segment { start, len: seqs[i].len() });
            last_rows.push(ids.len() - 1);
        }
        let hidden = model.hidden(&mut g, &ids, &segments)?;
        let last = g.gather_rows(hidden, &last_rows)?;
        let logits = model.project(&mut g, last)?;
        let next: Vec<usize> = (0..active.len()).map(|r| argmax(g.value(logits).row(r))).collect();
        g.truncate(mark);
        let mut still = Vec::with_capacity(active.len());
        for (&i, tok) in active.iter().zip(next) {
            emitted[i].push(tok);
            seqs[i].push(tok);
            if tok != eos && seqs[i].len() <= max_ctx {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(emitted)
}
