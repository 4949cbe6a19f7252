//! Model, training and run configuration, loadable from a strict TOML file.

use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::SimilarityKind;

/// Architectural and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BrightVaeConfig {
    /// Feature width C shared by every block.
    pub channels: usize,
    /// Number of codebook entries K.
    pub codebook_size: usize,
    /// Embedding dimension D; must equal `channels` when given.
    pub embedding_dim: Option<usize>,
    /// Hidden width D_h of the quantizer attention projection (default 2·D).
    pub attention_hidden: Option<usize>,
    pub heads: usize,
    pub beta: f64,
    pub leaky_slope: f64,
    pub lambda_rest: f64,
    pub lambda_latent: f64,
    pub lambda_similarity: f64,
    pub similarity_loss_kind: SimilarityKind,
    /// Histogram bins for the KL-divergence similarity loss.
    pub kld_bins: usize,
    pub two_receptive_fields: bool,
    pub skip_connection: bool,
    pub use_attencoder: bool,
    pub use_attenquant: bool,
    pub use_similarity_loss: bool,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for BrightVaeConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            codebook_size: 512,
            embedding_dim: None,
            attention_hidden: None,
            heads: 8,
            beta: 0.25,
            leaky_slope: 0.01,
            lambda_rest: 1.0,
            lambda_latent: 0.25,
            lambda_similarity: 0.08,
            similarity_loss_kind: SimilarityKind::Ssi,
            kld_bins: 256,
            two_receptive_fields: true,
            skip_connection: true,
            use_attencoder: true,
            use_attenquant: true,
            use_similarity_loss: true,
            seed: 0,
        }
    }
}

impl BrightVaeConfig {
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim.unwrap_or(self.channels)
    }

    pub fn attention_hidden(&self) -> usize {
        self.attention_hidden.unwrap_or(2 * self.embedding_dim())
    }

    /// Whether the similarity term contributes to the total loss.
    pub fn similarity_active(&self) -> bool {
        self.use_similarity_loss && self.similarity_loss_kind != SimilarityKind::None
    }

    pub fn toggles(&self) -> ComponentToggles {
        ComponentToggles {
            two_receptive_fields: self.two_receptive_fields,
            ssi_loss: self.similarity_active() && self.similarity_loss_kind == SimilarityKind::Ssi,
            skip_connection: self.skip_connection,
            attencoder: self.use_attencoder,
            attenquant: self.use_attenquant,
        }
    }

    /// Applies a component-ablation row. The SSI toggle switches the similarity term.
    pub fn with_toggles(&self, t: ComponentToggles) -> Self {
        let mut cfg = self.clone();
        cfg.two_receptive_fields = t.two_receptive_fields;
        cfg.skip_connection = t.skip_connection;
        cfg.use_attencoder = t.attencoder;
        cfg.use_attenquant = t.attenquant;
        cfg.use_similarity_loss = t.ssi_loss;
        if t.ssi_loss {
            cfg.similarity_loss_kind = SimilarityKind::Ssi;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return err("channels must be positive".into());
        }
        if self.codebook_size == 0 {
            return err("codebook_size must be positive".into());
        }
        if let Some(d) = self.embedding_dim {
            if d != self.channels {
                return err(format!("embedding_dim ({d}) must equal channels ({})", self.channels));
            }
        }
        if self.use_attencoder && (self.heads == 0 || self.channels % self.heads != 0) {
            return err(format!("channels ({}) not divisible by heads ({})", self.channels, self.heads));
        }
        if self.use_attenquant && self.attention_hidden() <= self.embedding_dim() {
            return err(format!(
                "attention_hidden ({}) must exceed embedding dim ({})",
                self.attention_hidden(),
                self.embedding_dim()
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return err(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return err(format!("leaky_slope must lie in (0, 1), got {}", self.leaky_slope));
        }
        for (name, v) in [
            ("lambda_rest", self.lambda_rest),
            ("lambda_latent", self.lambda_latent),
            ("lambda_similarity", self.lambda_similarity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if self.kld_bins == 0 {
            return err("kld_bins must be positive".into());
        }
        Ok(())
    }
}

/// The five component switches of the structural ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentToggles {
    pub two_receptive_fields: bool,
    pub ssi_loss: bool,
    pub skip_connection: bool,
    pub attencoder: bool,
    pub attenquant: bool,
}

impl ComponentToggles {
    /// The six cumulative configurations, from all-off to the full model.
    pub fn ablation_rows() -> [ComponentToggles; 6] {
        let mut rows = [ComponentToggles {
            two_receptive_fields: false,
            ssi_loss: false,
            skip_connection: false,
            attencoder: false,
            attenquant: false,
        }; 6];
        for (i, row) in rows.iter_mut().enumerate() {
            row.two_receptive_fields = i >= 1;
            row.ssi_loss = i >= 2;
            row.skip_connection = i >= 3;
            row.attencoder = i >= 4;
            row.attenquant = i >= 5;
        }
        rows
    }

    pub fn as_array(&self) -> [bool; 5] {
        [
            self.two_receptive_fields,
            self.ssi_loss,
            self.skip_connection,
            self.attencoder,
            self.attenquant,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(&self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Optimization schedule and bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub cycle_epochs: usize,
    /// Seed for minibatch shuffling.
    pub seed: u64,
    /// Save a checkpoint every N epochs (0: final only).
    pub checkpoint_every: usize,
    /// Evaluate on the test split every N epochs (0: never during training).
    pub eval_every: usize,
    pub device: String,
    pub precision: Precision,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 5,
            lr_max: 3e-4,
            lr_min: 3e-5,
            warmup_epochs: 5,
            cycle_epochs: 50,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            device: "cpu".into(),
            precision: Precision::F32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return err(format!(
                "need 0 < lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            ));
        }
        if self.cycle_epochs == 0 {
            return err("cycle_epochs must be positive".into());
        }
        if self.device != "cpu" {
            return err(format!("unsupported device `{}` (only `cpu`)", self.device));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return err("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return err(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Seeded random-weight feature extractor used for LPIPS and perceptual loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub seed: u64,
    #[serde(default = "default_stage_widths")]
    pub stage_widths: Vec<usize>,
}

fn default_stage_widths() -> Vec<usize> {
    vec![8, 16, 32]
}

/// Everything a config file can hold.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: BrightVaeConfig,
    pub train: TrainConfig,
    pub extractor: Option<ExtractorConfig>,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(x) = &self.extractor {
            if x.stage_widths.is_empty() || x.stage_widths.contains(&0) {
                return Err(Error::Config("extractor needs at least one nonzero stage width".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Stable SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
    }
}
