use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, QuestionVocab, BLOCK_NAMES};
use crate::diffcore::ParamBlock;
use crate::error::{Error, Result};
use crate::synthdata::AnswerVocab;

const CHECKPOINT_VERSION: u32 = 1;

/// On-disk form of a [`Model`]: named arrays with shapes plus a hash of the
/// configuration and vocabularies they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub feature_dim: usize,
    pub question_vocab: QuestionVocab,
    pub answer_vocab: AnswerVocab,
    pub params: Vec<ParamBlock>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Model {
    /// SHA-256 of the configuration, vocabularies and feature width.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Manifest<'a> {
            config: &'a ModelConfig,
            feature_dim: usize,
            question_vocab: &'a QuestionVocab,
            answer_vocab: &'a AnswerVocab,
        }
        let manifest = Manifest {
            config: &self.config,
            feature_dim: self.feature_dim(),
            question_vocab: &self.question_vocab,
            answer_vocab: &self.answer_vocab,
        };
        let bytes = serde_json::to_vec(&manifest).expect("manifest serializes");
        hex(&Sha256::digest(&bytes))
    }

    /// SHA-256 over block names and the exact bit patterns of all parameters.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash().as_bytes());
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            feature_dim: self.feature_dim(),
            question_vocab: self.question_vocab.clone(),
            answer_vocab: self.answer_vocab.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Model> {
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        let shapes = Model::block_shapes(
            &ckpt.config,
            ckpt.question_vocab.len(),
            ckpt.answer_vocab.len(),
            ckpt.feature_dim,
        );
        if ckpt.params.len() != BLOCK_NAMES.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                BLOCK_NAMES.len(),
                ckpt.params.len()
            )));
        }
        for ((p, name), shape) in ckpt.params.iter().zip(BLOCK_NAMES).zip(&shapes) {
            if p.name != name || p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "block `{}` {:?} does not match expected `{name}` {shape:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::Checkpoint(format!("block `{}` holds non-finite values", p.name)));
            }
        }
        let model = Model {
            config: ckpt.config,
            question_vocab: ckpt.question_vocab,
            answer_vocab: ckpt.answer_vocab,
            params: ckpt.params,
        };
        if model.config_hash() != ckpt.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let text = serde_json::to_string(&model.to_checkpoint())?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    Model::from_checkpoint(ckpt)
}
