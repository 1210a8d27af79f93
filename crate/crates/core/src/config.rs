//! Resolved run configuration (TOML) and its fingerprints.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DataConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::heads::{FusionConfig, FusionMode, ModelConfig, TaskKind, TaskSpec};
use crate::ssl::SslConfig;
use crate::train::TrainConfig;
use crate::transformer::TransformerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub folds: usize,
    /// Test fold of the rotation; validation is the next fold.
    pub fold: usize,
    /// Fraction of the training pool used.
    pub ratio: f64,
    pub use_transformer: bool,
    /// Divide duplicated stem kernels by the new channel count.
    pub adapt_scale: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            fold: 0,
            ratio: 1.0,
            use_transformer: true,
            adapt_scale: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub fusion: FusionConfig,
    pub task: TaskSpec,
    pub ssl: SslConfig,
    /// Optimisation settings of both pre-training stages.
    pub pretrain: TrainConfig,
    /// Optimisation settings of fine-tuning.
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            fusion: FusionConfig::default(),
            task: TaskSpec::default(),
            ssl: SslConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of everything that determines backbone parameter names and shapes,
/// except the input channel count (adapted on transfer).
pub fn backbone_fingerprint(encoder: &EncoderConfig, transformer: &TransformerConfig) -> String {
    let enc = EncoderConfig {
        in_channels: 1,
        taps: Vec::new(),
        ..encoder.clone()
    };
    let arch = serde_json::json!({
        "encoder": enc,
        "transformer": {
            "d_emb": transformer.d_emb,
            "d_ff": transformer.d_ff,
            "heads": transformer.heads,
            "layers": transformer.layers,
            "shared_across_planes": transformer.shared_across_planes,
            "mode": transformer.mode,
        },
    });
    sha256_hex(arch.to_string().as_bytes())
}

impl RunConfig {
    /// Parses TOML; unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// A named preset or a TOML file path.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "default" => Ok(Self::default()),
            path => Self::load(Path::new(path)),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The model configuration for `kind`; segmentation always uses
    /// multi-scale fusion.
    pub fn model(&self, kind: TaskKind) -> ModelConfig {
        let mut fusion = self.fusion.clone();
        if kind == TaskKind::Segmentation {
            fusion.mode = FusionMode::MultiScale;
        }
        ModelConfig {
            encoder: self.encoder.clone(),
            transformer: self.transformer.clone(),
            fusion,
            task: TaskSpec {
                kind,
                ..self.task.clone()
            },
            use_transformer: self.finetune.use_transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model(self.task.kind).validate()?;
        self.ssl.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        let f = &self.finetune;
        if f.folds < 3 {
            return Err(Error::Config(format!("folds must be >= 3, got {}", f.folds)));
        }
        if f.fold >= f.folds {
            return Err(Error::Config(format!("fold {} outside 0..{}", f.fold, f.folds)));
        }
        if !(f.ratio > 0.0 && f.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1]", f.ratio)));
        }
        if self.data.pool_factor == 0 {
            return Err(Error::Config("pool_factor must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical configuration, excluding the data
    /// directory location.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.data.dir = Default::default();
        let json = serde_json::to_string(&c).expect("config serialises");
        sha256_hex(json.as_bytes())
    }

    pub fn backbone_fingerprint(&self) -> String {
        backbone_fingerprint(&self.encoder, &self.transformer)
    }
}
