//! Synthetic changing-priors VQA benchmark.
//!
//! Scenes are bags of object detections whose features are sums of
//! category/attribute prototypes plus noise, so every question is answerable
//! only from the right object. Train and out-of-domain test splits draw answers
//! from opposite per-question-type priors.

mod generate;
mod io;
pub mod lexicon;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_benchmark, question_types, Benchmark, DataConfig, QuestionType};
pub use io::{read_split, write_split, FORMAT_VERSION};
pub use lexicon::{extract_nouns, EmbeddingTable, Lexicon};

/// Number of simulated annotators per question.
pub const ANNOTATORS: usize = 10;

/// Maximum number of question tokens the encoder reads.
pub const MAX_QUESTION_LEN: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectDetection {
    pub id: usize,
    pub category: String,
    pub attributes: Vec<String>,
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub detections: Vec<ObjectDetection>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.detections.iter().map(|d| d.active).collect()
    }

    pub fn active_count(&self) -> usize {
        self.detections.iter().filter(|d| d.active).count()
    }

    pub fn feature_dim(&self) -> usize {
        self.detections.first().map_or(0, |d| d.feature.len())
    }

    /// Row-major `[K, d_v]` feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.detections.iter().flat_map(|d| d.feature.iter().copied()).collect()
    }

    /// Copy of the scene with the listed detections deactivated.
    pub fn with_masked(&self, ids: &[usize]) -> Scene {
        let mut out = self.clone();
        for d in &mut out.detections {
            if ids.contains(&d.id) {
                d.active = false;
            }
        }
        out
    }

    /// Copy of the scene where only the listed detections stay active.
    pub fn keeping_only(&self, ids: &[usize]) -> Scene {
        let mut out = self.clone();
        for d in &mut out.detections {
            d.active = d.active && ids.contains(&d.id);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionCategory {
    YesNo,
    Number,
    Other,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 3] = [Self::YesNo, Self::Number, Self::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::YesNo => "yesno",
            Self::Number => "number",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for QuestionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub qid: u64,
    pub scene_id: u64,
    pub question_tokens: Vec<String>,
    pub question_category: QuestionCategory,
    /// Template identifier; the unit over which answer priors are defined.
    pub question_type: String,
    pub answers: Vec<String>,
    pub nouns: Vec<String>,
    pub gt_key_object_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub scene: Scene,
    pub qa: QAInstance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    ValIndomain,
    TestOod,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [Self::Train, Self::ValIndomain, Self::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::ValIndomain => "val_indomain",
            Self::TestOod => "test_ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered candidate answer set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn new(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for AnswerVocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::new(tokens)
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub answer_vocab: AnswerVocab,
    pub num_objects: usize,
    pub feature_dim: usize,
    pub instances: Vec<Instance>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Answer histogram of the first annotator-majority answer per question type.
    pub fn answer_histograms(&self) -> HashMap<String, Vec<usize>> {
        let mut out: HashMap<String, Vec<usize>> = HashMap::new();
        for inst in &self.instances {
            let hist = out
                .entry(inst.qa.question_type.clone())
                .or_insert_with(|| vec![0; self.answer_vocab.len()]);
            if let Some(i) = majority_answer(&inst.qa.answers).and_then(|a| self.answer_vocab.index_of(a)) {
                hist[i] += 1;
            }
        }
        out
    }
}

/// Most frequent annotator answer; ties go to the answer seen first.
pub fn majority_answer(answers: &[String]) -> Option<&str> {
    let mut best: Option<(&str, usize)> = None;
    for a in answers {
        let c = answers.iter().filter(|x| *x == a).count();
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a)
}

/// Per-answer soft scores `min(1, count / 3)` from the annotator multiset.
pub fn soft_targets(answers: &[String], vocab: &AnswerVocab) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; vocab.len()];
    for a in answers {
        let i = vocab.index_of(a).ok_or_else(|| Error::UnknownAnswer(a.clone()))?;
        counts[i] += 1;
    }
    Ok(counts.into_iter().map(|c| (c as f64 / 3.0).min(1.0)).collect())
}
