use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsRecord;
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Model};
use crate::rng::derive_seed;
use crate::synthdata::{question_types, DatasetSplit};

const BASELINE_TAG: u64 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    RandomPredictions,
    RandomPredictionsInverted,
    TopAnsMasked,
    RandImg,
    RandMask,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        Self::RandomPredictions,
        Self::RandomPredictionsInverted,
        Self::TopAnsMasked,
        Self::RandImg,
        Self::RandMask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RandomPredictions => "random_predictions",
            Self::RandomPredictionsInverted => "random_predictions_inverted",
            Self::TopAnsMasked => "top_ans_masked",
            Self::RandImg => "rand_img",
            Self::RandMask => "rand_mask",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Whether the policy is a training regime evaluated through a checkpoint.
    pub fn is_training(self) -> bool {
        matches!(self, Self::RandImg | Self::RandMask)
    }
}

/// Normalized per-question-type answer distributions over the answer vocab.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnswerStatistics {
    pub distributions: BTreeMap<String, Vec<f64>>,
}

impl AnswerStatistics {
    /// Frequencies of the majority annotator answer in `train`.
    pub fn from_train(train: &DatasetSplit) -> Self {
        let distributions = train
            .answer_histograms()
            .into_iter()
            .map(|(qt, hist)| {
                let total: usize = hist.iter().sum();
                let dist = hist.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
                (qt, dist)
            })
            .collect();
        Self { distributions }
    }

    /// Weights proportional to `1 / (count + 1)` over each template's legal
    /// answers, normalized.
    pub fn inverted(train: &DatasetSplit) -> Result<Self> {
        let hist = train.answer_histograms();
        let mut distributions = BTreeMap::new();
        for qt in question_types() {
            let mut dist = vec![0.0; train.answer_vocab.len()];
            let counts = hist.get(qt.id());
            for a in qt.answers() {
                let i = train
                    .answer_vocab
                    .index_of(a)
                    .ok_or_else(|| Error::UnknownAnswer(a.to_string()))?;
                let c = counts.map_or(0, |h| h[i]);
                dist[i] = 1.0 / (c as f64 + 1.0);
            }
            let total: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|w| *w /= total);
            distributions.insert(qt.id().to_string(), dist);
        }
        Ok(Self { distributions })
    }

    /// Draws one answer index per instance of `split`.
    pub fn sample(&self, split: &DatasetSplit, seed: u64) -> Result<Vec<usize>> {
        let mut samplers = BTreeMap::new();
        for (qt, dist) in &self.distributions {
            if dist.len() != split.answer_vocab.len() {
                return Err(Error::VocabMismatch);
            }
            if let Ok(w) = WeightedIndex::new(dist) {
                samplers.insert(qt.as_str(), w);
            }
        }
        split
            .instances
            .iter()
            .map(|inst| {
                let sampler = samplers
                    .get(inst.qa.question_type.as_str())
                    .ok_or_else(|| Error::Config(format!("no answer statistics for `{}`", inst.qa.question_type)))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, BASELINE_TAG, inst.qa.qid));
                Ok(sampler.sample(&mut rng))
            })
            .collect()
    }
}

/// Index of the second-highest score; the top answer is pushed to the bottom.
pub fn top_ans_masked(scores: &[f64]) -> usize {
    let top = crate::model::argmax(scores);
    let mut masked = scores.to_vec();
    masked[top] = f64::NEG_INFINITY;
    crate::model::argmax(&masked)
}

/// Scores a non-training baseline on `split`. `model` is required by
/// `top_ans_masked`.
pub fn run_baseline(
    kind: BaselineKind,
    train: &DatasetSplit,
    split: &DatasetSplit,
    model: Option<&Model>,
    seed: u64,
) -> Result<MetricsRecord> {
    let predictions = match kind {
        BaselineKind::RandomPredictions => AnswerStatistics::from_train(train).sample(split, seed)?,
        BaselineKind::RandomPredictionsInverted => AnswerStatistics::inverted(train)?.sample(split, seed)?,
        BaselineKind::TopAnsMasked => {
            let model = model.ok_or_else(|| Error::Config("top_ans_masked needs a checkpoint".into()))?;
            if model.answer_vocab != split.answer_vocab {
                return Err(Error::VocabMismatch);
            }
            split
                .instances
                .iter()
                .map(|inst| {
                    let out = model.infer(&inst.scene, &inst.qa.question_tokens, AttentionMode::Learned)?;
                    Ok(top_ans_masked(&out.probs))
                })
                .collect::<Result<Vec<_>>>()?
        }
        BaselineKind::RandImg | BaselineKind::RandMask => {
            return Err(Error::Config(format!(
                "{} is a training regime; finetune with it and evaluate the checkpoint",
                kind.as_str()
            )))
        }
    };
    MetricsRecord::score(split, &predictions)
}
