//! Training, evaluation, and ablation orchestration.

pub mod ablate;
pub mod eval;
pub mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::corpus::{CorpusConfig, CorpusError};
use crate::decoding::DecodeConfig;
use crate::metrics::MetricsError;
use crate::model::ModelConfig;
use crate::tensor::TensorError;
use crate::vocab::VocabError;

pub use ablate::{render_table, run_ablation, AblationReport, AblationSpec, SystemId};
pub use eval::{evaluate_model, write_decoded_jsonl, EvalReport};
pub use train::{train, RunRecord, TrainConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
        dump: Option<PathBuf>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Everything one run needs: data, model, optimizer, and decode settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl ExperimentConfig {
    /// Checks internal consistency across the sections.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.train.validate()?;
        self.decode.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.model.feature_dim != self.corpus.feature_dim {
            return Err(HarnessError::Config(format!(
                "model feature_dim {} != corpus feature_dim {}",
                self.model.feature_dim, self.corpus.feature_dim
            )));
        }
        let vocab_size = 4 + 2 * self.corpus.n_units_per_language;
        if self.model.vocab_size != vocab_size {
            return Err(HarnessError::Config(format!(
                "model vocab_size {} != corpus vocabulary {vocab_size} (4 specials + 2x{})",
                self.model.vocab_size, self.corpus.n_units_per_language
            )));
        }
        Ok(())
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic stream seed from independent components.
pub(crate) fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(a ^ splitmix64(b ^ splitmix64(c)))
}
