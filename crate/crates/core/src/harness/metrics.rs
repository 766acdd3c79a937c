use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMode, Model};
use crate::synthdata::{DatasetSplit, QuestionCategory, SplitName};

/// `min(1, #annotators who gave `predicted` / 3)`.
pub fn accuracy(predicted: &str, answers: &[String]) -> f64 {
    let humans = answers.iter().filter(|a| *a == predicted).count();
    (humans as f64 / 3.0).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: SplitName,
    pub overall: f64,
    pub n: usize,
    pub per_category: BTreeMap<QuestionCategory, CategoryMetrics>,
}

const CATEGORIES: [QuestionCategory; 3] = [
    QuestionCategory::YesNo,
    QuestionCategory::Number,
    QuestionCategory::Other,
];

impl MetricsRecord {
    /// Scores one predicted answer index per instance.
    pub fn score(split: &DatasetSplit, predictions: &[usize]) -> Result<Self> {
        if predictions.len() != split.instances.len() {
            return Err(Error::Config(format!(
                "{} predictions for {} instances",
                predictions.len(),
                split.instances.len()
            )));
        }
        let mut sums: BTreeMap<QuestionCategory, (f64, usize)> = CATEGORIES.iter().map(|&c| (c, (0.0, 0))).collect();
        let mut total = 0.0;
        for (inst, &p) in split.instances.iter().zip(predictions) {
            let acc = accuracy(split.answer_vocab.token(p), &inst.qa.answers);
            let e = sums
                .get_mut(&inst.qa.question_category)
                .expect("all categories present");
            e.0 += acc;
            e.1 += 1;
            total += acc;
        }
        let n = split.instances.len();
        Ok(Self {
            split: split.name,
            overall: if n == 0 { 0.0 } else { total / n as f64 },
            n,
            per_category: sums
                .into_iter()
                .map(|(c, (s, k))| {
                    let accuracy = if k == 0 { 0.0 } else { s / k as f64 };
                    (c, CategoryMetrics { accuracy, n: k })
                })
                .collect(),
        })
    }

    /// `sum(category accuracy * n) / sum(n)`.
    pub fn weighted_category_mean(&self) -> f64 {
        let n: usize = self.per_category.values().map(|c| c.n).sum();
        if n == 0 {
            return 0.0;
        }
        self.per_category.values().map(|c| c.accuracy * c.n as f64).sum::<f64>() / n as f64
    }
}

/// Argmax predictions of `model` on every instance of `split`.
pub fn predictions(model: &Model, split: &DatasetSplit, mode: AttentionMode) -> Result<Vec<usize>> {
    if model.answer_vocab != split.answer_vocab {
        return Err(Error::VocabMismatch);
    }
    split
        .instances
        .iter()
        .map(|inst| Ok(model.infer(&inst.scene, &inst.qa.question_tokens, mode)?.predicted()))
        .collect()
}

pub fn evaluate(model: &Model, split: &DatasetSplit) -> Result<MetricsRecord> {
    evaluate_with(model, split, AttentionMode::Learned)
}

pub fn evaluate_with(model: &Model, split: &DatasetSplit, mode: AttentionMode) -> Result<MetricsRecord> {
    MetricsRecord::score(split, &predictions(model, split, mode)?)
}
