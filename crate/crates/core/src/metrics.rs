//! Embedding-based output scoring: greedy max-cosine token F1 and
//! mean-pooled sentence cosine.

use crate::error::{Error, Result};
use crate::model::{generate_batch, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How token vectors are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Seeded random unit vectors.
    Random,
    /// `e_{id}`; every pair of distinct tokens is orthogonal.
    OneHot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub seed: u64,
    pub kind: EmbedderKind,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            seed: 0x5EED,
            kind: EmbedderKind::Random,
        }
    }
}

/// Precomputed unit vector per token id.
#[derive(Clone, Debug)]
pub struct Embedder {
    spec: EmbedderSpec,
    table: Vec<Vec<f64>>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec, vocab_size: usize) -> Result<Self> {
        if spec.dim == 0 {
            return Err(Error::Config("embedder dimension must be positive".into()));
        }
        if spec.kind == EmbedderKind::OneHot && spec.dim < vocab_size {
            return Err(Error::Config(format!(
                "one-hot embedder needs dim >= vocabulary size ({} < {vocab_size})",
                spec.dim
            )));
        }
        let table = (0..vocab_size).map(|id| token_vector(&spec, id)).collect();
        Ok(Self { spec, table })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn vector(&self, id: usize) -> Result<&[f64]> {
        self.table
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Input(format!("token id {id} outside embedder table")))
    }
}

fn token_vector(spec: &EmbedderSpec, id: usize) -> Vec<f64> {
    match spec.kind {
        EmbedderKind::OneHot => {
            let mut v = vec![0.0; spec.dim];
            v[id] = 1.0;
            v
        }
        EmbedderKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(id as u64);
            loop {
                let v: Vec<f64> = (0..spec.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 {
                    return v.into_iter().map(|x| x / n).collect();
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Cosines between every generated token `y_j` and reference token `g_k`,
/// clamped to `[0, 1]`; row-major `n×m`. Equal ids have cosine exactly 1.
pub fn cosine_matrix(y: &[usize], g: &[usize], emb: &Embedder) -> Result<Vec<f64>> {
    let gv: Vec<&[f64]> = g.iter().map(|&t| emb.vector(t)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(y.len() * g.len());
    for &t in y {
        let yv = emb.vector(t)?;
        for (&gid, &gk) in g.iter().zip(&gv) {
            out.push(if gid == t { 1.0 } else { dot(yv, gk).clamp(0.0, 1.0) });
        }
    }
    Ok(out)
}

/// Greedy max-cosine matching: recall averages over reference tokens,
/// precision over generated tokens.
pub fn token_f1(y: &[usize], g: &[usize], emb: &Embedder) -> Result<F1Score> {
    if y.is_empty() || g.is_empty() {
        return Err(Error::Input("token_f1 needs two nonempty sequences".into()));
    }
    let (n, m) = (y.len(), g.len());
    let c = cosine_matrix(y, g, emb)?;
    let best_row = |j: usize| c[j * m..(j + 1) * m].iter().copied().fold(0.0, f64::max);
    let best_col = |k: usize| (0..n).map(|j| c[j * m + k]).fold(0.0, f64::max);
    let precision = (0..n).map(best_row).sum::<f64>() / n as f64;
    let recall = (0..m).map(best_col).sum::<f64>() / m as f64;
    Ok(F1Score {
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

fn mean_vector(ids: &[usize], emb: &Embedder) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; emb.spec.dim];
    for &t in ids {
        for (a, v) in acc.iter_mut().zip(emb.vector(t)?) {
            *a += v;
        }
    }
    let n = ids.len() as f64;
    Ok(acc.into_iter().map(|x| x / n).collect())
}

/// Cosine of the mean-pooled token vectors.
pub fn sentence_cos(y: &[usize], g: &[usize], emb: &Embedder) -> Result<f64> {
    if y.is_empty() || g.is_empty() {
        return Err(Error::Input("sentence_cos needs two nonempty sequences".into()));
    }
    let a = mean_vector(y, emb)?;
    let b = mean_vector(g, emb)?;
    let (na, nb) = (dot(&a, &a).sqrt(), dot(&b, &b).sqrt());
    if !(na > 1e-12) || !(nb > 1e-12) {
        return Err(Error::Degenerate("pooled sentence vector has zero norm".into()));
    }
    Ok((dot(&a, &b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Token ids that delimit the three output fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFormat {
    pub sep_perception: usize,
    pub sep_reasoning: usize,
    pub eos: usize,
}

/// Generated text split into its fields.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub action: Vec<usize>,
    pub perception: Vec<usize>,
    pub reasoning: Vec<usize>,
}

impl OutputFormat {
    /// `action <sep_p> perception <sep_r> reasoning <eos>`
    pub fn compose(&self, action: &[usize], perception: &[usize], reasoning: &[usize]) -> Vec<usize> {
        let mut t = action.to_vec();
        t.push(self.sep_perception);
        t.extend(perception);
        t.push(self.sep_reasoning);
        t.extend(reasoning);
        t.push(self.eos);
        t
    }

    /// Splits at the first separators; anything after `eos` is dropped.
    pub fn parse(&self, tokens: &[usize]) -> ParsedOutput {
        let end = tokens.iter().position(|&t| t == self.eos).unwrap_or(tokens.len());
        let toks = &tokens[..end];
        let mut out = ParsedOutput::default();
        let mut field = 0;
        for &t in toks {
            if t == self.sep_perception && field == 0 {
                field = 1;
            } else if t == self.sep_reasoning && field < 2 {
                field = 2;
            } else {
                match field {
                    0 => out.action.push(t),
                    1 => out.perception.push(t),
                    _ => out.reasoning.push(t),
                }
            }
        }
        out
    }
}

/// A test instance: the prompt plus its reference fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSample {
    pub id: String,
    pub prompt: Vec<usize>,
    pub action: Vec<usize>,
    pub perception: Vec<usize>,
    pub reasoning: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub action: F1Score,
    pub perception_cos: f64,
    pub reasoning_cos: f64,
    /// Set when a field could not be scored and was counted as 0.
    pub flag: Option<String>,
}

fn score_sample(sample: &EvalSample, out: &ParsedOutput, emb: &Embedder) -> SampleScore {
    let mut flags = Vec::new();
    let zero = F1Score {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    let action = if out.action.is_empty() {
        flags.push("empty action");
        zero
    } else {
        token_f1(&out.action, &sample.action, emb).unwrap_or_else(|_| {
            flags.push("action unscorable");
            zero
        })
    };
    let mut cos = |gen: &[usize], refr: &[usize], name: &'static str| {
        if gen.is_empty() {
            flags.push(name);
            return 0.0;
        }
        sentence_cos(gen, refr, emb).unwrap_or_else(|_| {
            flags.push(name);
            0.0
        })
    };
    let perception_cos = cos(&out.perception, &sample.perception, "perception unscorable");
    let reasoning_cos = cos(&out.reasoning, &sample.reasoning, "reasoning unscorable");
    SampleScore {
        id: sample.id.clone(),
        action,
        perception_cos,
        reasoning_cos,
        flag: (!flags.is_empty()).then(|| flags.join("; ")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub epoch: usize,
    /// `2PR/(P+R)` of the mean precision and recall.
    pub action_f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub perception_cos: f64,
    pub reasoning_cos: f64,
    /// Mean of the per-sample F1 values.
    pub sample_f1: f64,
    pub samples: usize,
    pub flagged: usize,
}

impl MetricsRow {
    pub fn from_scores(model: &str, epoch: usize, scores: &[SampleScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Input("no samples to aggregate".into()));
        }
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&SampleScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let precision = mean(&|s| s.action.precision);
        let recall = mean(&|s| s.action.recall);
        Ok(Self {
            model: model.to_string(),
            epoch,
            action_f1: harmonic(precision, recall),
            precision,
            recall,
            perception_cos: mean(&|s| s.perception_cos),
            reasoning_cos: mean(&|s| s.reasoning_cos),
            sample_f1: mean(&|s| s.action.f1),
            samples: scores.len(),
            flagged: scores.iter().filter(|s| s.flag.is_some()).count(),
        })
    }
}

/// Greedy-decodes every sample and scores the parsed fields.
pub fn score_model(
    params: &ModelParams,
    samples: &[EvalSample],
    emb: &Embedder,
    format: &OutputFormat,
    max_new: usize,
    chunk: usize,
) -> Result<Vec<SampleScore>> {
    if samples.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    let mut scores = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let prompts: Vec<Vec<usize>> = part.iter().map(|s| s.prompt.clone()).collect();
        match generate_batch(params, &prompts, max_new, format.eos) {
            Ok(outs) => {
                for (s, o) in part.iter().zip(outs) {
                    scores.push(score_sample(s, &format.parse(&o), emb));
                }
            }
            Err(e) => {
                for s in part {
                    let mut sc = score_sample(s, &ParsedOutput::default(), emb);
                    sc.flag = Some(format!("generation failed: {e}"));
                    scores.push(sc);
                }
            }
        }
    }
    Ok(scores)
}

pub fn evaluate_model(
    params: &ModelParams,
    samples: &[EvalSample],
    emb: &Embedder,
    format: &OutputFormat,
    max_new: usize,
    model: &str,
    epoch: usize,
) -> Result<MetricsRow> {
    let scores = score_model(params, samples, emb, format, max_new, 16)?;
    MetricsRow::from_scores(model, epoch, &scores)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_are_unit_and_stable() {
        let e = Embedder::new(EmbedderSpec::default(), 20).unwrap();
        let f = Embedder::new(EmbedderSpec::default(), 40).unwrap();
        for id in 0..20 {
            let v = e.vector(id).unwrap();
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
            assert_eq!(v, f.vector(id).unwrap());
        }
    }

    #[test]
    fn parse_roundtrip() {
        let f = OutputFormat {
            sep_perception: 3,
            sep_reasoning: 4,
            eos: 2,
        };
        let t = f.compose(&[10, 11], &[12], &[13, 14]);
        let p = f.parse(&t);
        assert_eq!((p.action, p.perception, p.reasoning), (vec![10, 11], vec![12], vec![13, 14]));
    }
}
