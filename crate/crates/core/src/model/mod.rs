//! Small decoder-only model over a visual-token prefix plus text tokens.
//!
//! Pre-norm transformer blocks with fixed sinusoidal positions. The visual
//! input is a flattened grid of discrete cell codes that shares the token
//! vocabulary with text, so `(x_v, x_t) → y` is a single causal sequence.

mod batch;
pub mod checkpoint;
mod forward;

pub use batch::{Batch, Sequence};
pub use forward::{forward, forward_tokens, generate, generate_batch, BoundModel, ForwardOutput, PackedOutput};

use crate::error::{Error, Result};
use crate::autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Token-id layout shared by every member of a group.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub visual_offset: usize,
    pub visual_count: usize,
}

impl VocabSpec {
    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad, self.bos, self.eos];
        if specials.iter().any(|&s| s >= self.size) {
            return Err(Error::Config("special token id outside vocabulary".into()));
        }
        if self.pad == self.bos || self.pad == self.eos || self.bos == self.eos {
            return Err(Error::Config("pad, bos and eos must be distinct".into()));
        }
        let vis = self.visual_offset..self.visual_offset + self.visual_count;
        if vis.end > self.size {
            return Err(Error::Config("visual token range exceeds vocabulary".into()));
        }
        if specials.iter().any(|s| vis.contains(s)) {
            return Err(Error::Config("visual token range overlaps special ids".into()));
        }
        Ok(())
    }

    pub fn visual_id(&self, code: usize) -> usize {
        self.visual_offset + code
    }

    pub fn is_visual(&self, id: usize) -> bool {
        (self.visual_offset..self.visual_offset + self.visual_count).contains(&id)
    }
}

fn default_ffn_mult() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_true")]
    pub final_norm: bool,
    /// Reuse the token embedding as the output projection.
    #[serde(default)]
    pub tie_output: bool,
}

impl ModelConfig {
    pub fn new(layers: usize, d_model: usize, heads: usize, vocab_size: usize) -> Self {
        Self {
            layers,
            d_model,
            heads,
            vocab_size,
            max_len: 128,
            ffn_mult: 4,
            final_norm: true,
            tie_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.layers > 0 && (self.heads == 0 || self.d_model % self.heads != 0) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.layers > 0 && self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }

    /// Trainable scalars in one transformer block.
    pub fn per_layer_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_mult * d;
        // ln1 + qkv + out + ln2 + ffn-in + ffn-out
        2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    }

    /// Closed-form parameter count of a model built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let mut n = v * d + self.layers * self.per_layer_count();
        if self.final_norm {
            n += 2 * d;
        }
        if !self.tie_output {
            n += d * v;
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor,
    pub b_qkv: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_qkv,
            &mut self.b_qkv,
            &mut self.w_out,
            &mut self.b_out,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
        ]
    }
}

/// Model weights. Tensor order in [`ModelParams::tensors`] is fixed and is the
/// order used by optimizers and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Option<Tensor>,
    pub final_bias: Option<Tensor>,
    pub output: Option<Tensor>,
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

/// Deterministic initialization: identical `(config, seed)` pairs produce
/// bit-identical weights.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let v = config.vocab_size;
    let f = config.ffn_mult * d;
    let embedding = glorot(&mut rng, v, d, vec![v, d]);
    let layers = (0..config.layers)
        .map(|_| LayerParams {
            ln1_gain: Tensor::from_vec(vec![1.0; d]),
            ln1_bias: Tensor::zeros(vec![d]),
            w_qkv: glorot(&mut rng, d, 3 * d, vec![d, 3 * d]),
            b_qkv: Tensor::zeros(vec![3 * d]),
            w_out: glorot(&mut rng, d, d, vec![d, d]),
            b_out: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::from_vec(vec![1.0; d]),
            ln2_bias: Tensor::zeros(vec![d]),
            w_ff1: glorot(&mut rng, d, f, vec![d, f]),
            b_ff1: Tensor::zeros(vec![f]),
            w_ff2: glorot(&mut rng, f, d, vec![f, d]),
            b_ff2: Tensor::zeros(vec![d]),
        })
        .collect();
    let (final_gain, final_bias) = if config.final_norm {
        (Some(Tensor::from_vec(vec![1.0; d])), Some(Tensor::zeros(vec![d])))
    } else {
        (None, None)
    };
    let output = (!config.tie_output).then(|| glorot(&mut rng, d, v, vec![d, v]));
    Ok(ModelParams {
        config: config.clone(),
        embedding,
        layers,
        final_gain,
        final_bias,
        output,
    })
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out.extend(self.final_gain.iter());
        out.extend(self.final_bias.iter());
        out.extend(self.output.iter());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.extend(self.final_gain.iter_mut());
        out.extend(self.final_bias.iter_mut());
        out.extend(self.output.iter_mut());
        out
    }

    /// Order-sensitive digest of every weight bit.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

/// Exact number of trainable scalars.
pub fn capacity(params: &ModelParams) -> usize {
    params.tensors().iter().map(|t| t.len()).sum()
}
