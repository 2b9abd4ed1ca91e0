//! Run configuration: every setting of a pipeline run in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusOptions;
use crate::encoder::EncoderMode;
use crate::mixer::MixerConfig;
use crate::model::AblationMode;
use crate::train::TrainConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    /// EMB file, required in precomputed mode.
    pub embeddings: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            mode: EncoderMode::Internal,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Number of tags returned by `recommend`.
    pub b: usize,
    pub per_post_f1: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 3, 5],
            b: 5,
            per_post_f1: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusOptions,
    pub mixer: MixerConfig,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub eval: EvalConfig,
    pub ablation: AblationMode,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies dotted-key overrides such as `train.seed=3` on top of this
    /// configuration. Values are parsed as JSON, falling back to a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = parsed;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mixer.validate()?;
        self.train.validate()?;
        if self.corpus.min_user_posts < 3 {
            return Err(Error::Config("min_user_posts must be at least 3".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.b == 0 {
            return Err(Error::Config("ks and b must be positive".into()));
        }
        if self.encoder.mode == EncoderMode::Precomputed && self.encoder.embeddings.is_none() {
            return Err(Error::Config(
                "precomputed encoder mode needs encoder.embeddings".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
