use super::dataset::DataConfig;
use crate::error::{Error, Result};
use crate::metrics::EmbedderSpec;
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, DEFAULT_PROJ_DIM, DEFAULT_TAU_GSL};
use crate::optimizer::RolePolicy;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sft,
    Gcl,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sft => "sft",
            Mode::Gcl => "gcl",
        })
    }
}

fn default_max_len() -> usize {
    96
}

fn default_ffn() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    pub name: String,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_ffn")]
    pub ffn_mult: usize,
}

impl MemberConfig {
    pub fn new(name: &str, layers: usize, d_model: usize, heads: usize) -> Self {
        Self {
            name: name.to_string(),
            layers,
            d_model,
            heads,
            max_len: default_max_len(),
            ffn_mult: default_ffn(),
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            max_len: self.max_len,
            ffn_mult: self.ffn_mult,
            ..ModelConfig::new(self.layers, self.d_model, self.heads, vocab_size)
        }
    }
}

/// Where scenes come from: a generated directory or an inline generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub dir: Option<PathBuf>,
    pub generate: Option<DataConfig>,
}

/// One row of a loss-weight ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub name: String,
    pub weights: LossWeights,
    /// Role-based learning rates and temperatures; otherwise both models use
    /// the supervised rate and τ = 1.
    pub ago: bool,
}

pub fn default_ablations() -> Vec<AblationSetting> {
    let s = |name: &str, l: (f64, f64, f64), ago| AblationSetting {
        name: name.to_string(),
        weights: LossWeights {
            lambda_sup: l.0,
            lambda_gsl: l.1,
            lambda_drl: l.2,
        },
        ago,
    };
    vec![
        s("sup", (1.0, 0.0, 0.0), false),
        s("sup+gsl", (1.0, 0.5, 0.0), false),
        s("sup+drl", (1.0, 0.0, 0.4), false),
        s("gco", (1.0, 0.5, 0.4), false),
        s("gco+ago", (1.0, 0.5, 0.4), true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    /// Common multiplier on every peak learning rate.
    pub lr_scale: f64,
    /// Peak rate of supervised-only training.
    pub sft_eta: f64,
    /// Per-model global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f64>,
    pub scaled_drl: bool,
    pub symmetric_gsl: bool,
    pub tau_gsl: f64,
    pub d_proj: usize,
    pub ago: bool,
    pub weights: LossWeights,
    pub roles: RolePolicy,
    /// `[τ_learner, τ_guide]`, replacing the capacity-based choice.
    pub taus: Option<[f64; 2]>,
    pub sft_scores: Option<[f64; 2]>,
    /// A supervised run report supplying `sft_scores`.
    pub sft_report: Option<PathBuf>,
    /// Replaces the parameter counts used for role assignment.
    pub capacities: Option<[usize; 2]>,
    pub eval_every: usize,
    pub max_new_tokens: usize,
    pub embedder: EmbedderSpec,
    pub data: DataSource,
    pub models: Vec<MemberConfig>,
    pub out_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
    pub lr_ratios: Vec<f64>,
    pub temperature_grid: Vec<[f64; 2]>,
    pub ablations: Vec<AblationSetting>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Gcl,
            seed: 0,
            epochs: 10,
            batch_size: 16,
            warmup_ratio: 0.1,
            lr_scale: 1.0,
            sft_eta: 1e-5,
            clip: Some(1.0),
            scaled_drl: true,
            symmetric_gsl: true,
            tau_gsl: DEFAULT_TAU_GSL,
            d_proj: DEFAULT_PROJ_DIM,
            ago: true,
            weights: LossWeights::default(),
            roles: RolePolicy::default(),
            taus: None,
            sft_scores: None,
            sft_report: None,
            capacities: None,
            eval_every: 1,
            max_new_tokens: 64,
            embedder: EmbedderSpec::default(),
            data: DataSource {
                dir: None,
                generate: Some(DataConfig::default()),
            },
            models: vec![MemberConfig::new("small", 2, 64, 4), MemberConfig::new("large", 4, 96, 4)],
            out_dir: None,
            save_checkpoints: true,
            lr_ratios: vec![1.0, 2.0, 3.0, 4.0],
            temperature_grid: vec![[3.0, 2.0]],
            ablations: default_ablations(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if self.max_new_tokens < 1 {
            return bad("max_new_tokens must be at least 1".into());
        }
        if self.models.len() != 2 {
            return bad(format!("a group has exactly two models, got {}", self.models.len()));
        }
        if self.models[0].name == self.models[1].name {
            return bad("model names must differ".into());
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        for (name, v) in [("lr_scale", self.lr_scale), ("sft_eta", self.sft_eta), ("tau_gsl", self.tau_gsl)] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return bad(format!("clip must be positive, got {c}"));
            }
        }
        if let Some(t) = self.taus {
            if t.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("temperatures must be positive, got {t:?}"));
            }
        }
        if self.d_proj < 1 {
            return bad("d_proj must be at least 1".into());
        }
        self.weights.validate()?;
        match (&self.data.dir, &self.data.generate) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("set exactly one of data.dir and data.generate".into());
            }
            (None, Some(g)) => g.validate()?,
            _ => {}
        }
        Ok(())
    }

    /// Fails when a referenced file or directory is missing.
    pub fn check_paths(&self) -> Result<()> {
        let mut paths: Vec<&Path> = Vec::new();
        if let Some(d) = &self.data.dir {
            paths.push(d);
        }
        if let Some(r) = &self.sft_report {
            paths.push(r);
        }
        for p in paths {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// The configuration text a run was started from, plus any overrides.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub text: String,
    pub overrides: Vec<String>,
}

impl ConfigEcho {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            text: toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?,
            overrides: Vec::new(),
        })
    }

    pub fn with_override(&self, entry: impl Into<String>) -> Self {
        let mut e = self.clone();
        e.overrides.push(entry.into());
        e
    }

    /// First 16 hex digits of SHA-256 over the text and overrides.
    pub fn run_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.text.as_bytes());
        for o in &self.overrides {
            h.update(b"\n");
            h.update(o.as_bytes());
        }
        format!("{:x}", h.finalize())[..16].to_string()
    }
}

/// Reads and validates a TOML config, keeping its bytes for the echo.
pub fn load_config(path: &Path) -> Result<(RunConfig, ConfigEcho)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = RunConfig::from_toml(&text)?;
    cfg.check_paths()?;
    Ok((
        cfg,
        ConfigEcho {
            text,
            overrides: Vec::new(),
        },
    ))
}
