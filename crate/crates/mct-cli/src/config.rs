//! Run configuration: one JSON document covering model dimensions, the ELMo
//! embedder, training hyperparameters and data paths. CLI flags override
//! fields after load. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mct_core::data::FeatureFormat;
use mct_core::decoder::DecoderConfig;
use mct_core::embedder::ElmoConfig;
use mct_core::encoder::EncoderConfig;
use mct_core::model::Mode;
use mct_core::training::TrainConfig;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_feat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    pub depth: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    20
}

impl Default for ModelDims {
    fn default() -> Self {
        // Published full-scale dimensions.
        ModelDims {
            d_feat: 2048,
            d_model: 1024,
            n_heads: 8,
            d_head: 128,
            d_ffn: 4096,
            depth: 2,
            max_len: 20,
        }
    }
}

impl ModelDims {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_feat: self.d_feat,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_ffn: self.d_ffn,
            depth: self.depth,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_head,
            d_ffn: self.d_ffn,
            depth: self.depth,
            max_len: self.max_len,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormatCfg {
    #[default]
    Jsonl,
    Binary,
}

impl From<FeatureFormatCfg> for FeatureFormat {
    fn from(f: FeatureFormatCfg) -> FeatureFormat {
        match f {
            FeatureFormatCfg::Jsonl => FeatureFormat::Jsonl,
            FeatureFormatCfg::Binary => FeatureFormat::Binary,
        }
    }
}

impl std::str::FromStr for FeatureFormatCfg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(FeatureFormatCfg::Jsonl),
            "binary" => Ok(FeatureFormatCfg::Binary),
            other => Err(format!("unknown feature format {other:?}")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub features: PathBuf,
    #[serde(default)]
    pub format: FeatureFormatCfg,
    pub captions: PathBuf,
    pub splits: PathBuf,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub elmo: Option<ElmoConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| format!("config {}: {e}", path.display()))?;
        // The top-level mode is authoritative.
        cfg.train.mode = cfg.mode;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.encoder().validate()?;
        self.model.decoder().validate()?;
        self.train.validate()?;
        match (self.mode, &self.elmo) {
            (Mode::ElmoMct, None) => {
                return Err("mode ELMo-MCT requires an elmo section".into());
            }
            (_, Some(elmo)) => {
                elmo.validate()?;
                if elmo.emb != self.model.d_model {
                    return Err(format!(
                        "elmo emb ({}) must equal d_model ({}) so embeddings sum",
                        elmo.emb, self.model.d_model
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
