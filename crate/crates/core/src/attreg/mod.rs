//! Visual attention regularization with curated samples.
//!
//! For a training pair the regularizer
//!
//! 1. picks *key objects*: detections whose category embedding is close to a
//!    question noun (cosine `>= sigma`, best `top_m`),
//! 2. picks *ignored objects*: the lowest-ranked `ignored_pct` percent of active
//!    detections under the current attention,
//! 3. masks their intersection and pairs the masked scene with an all-zero
//!    answer target.
//!
//! Training on both the original and the curated sample with
//! `L_all = L_vqa + lambda * L_reg` pushes the model to depend on, and attend
//! to, the key objects it was ignoring.

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthdata::{DatasetSplit, EmbeddingTable, QAInstance, Scene};
use crate::train::{self, Regime, TrainLog, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegConfig {
    /// Minimum cosine similarity for a key object.
    pub sigma: f64,
    /// Maximum number of key objects.
    pub top_m: usize,
    /// Percentage of active detections, from the bottom of the attention
    /// ranking, treated as ignored.
    pub ignored_pct: f64,
    pub lambda: f64,
    /// Absolute epoch at which curated samples start being used.
    pub start_epoch: usize,
    /// Locate ignored objects with the attention of the model as it was when
    /// regularization started instead of the current model.
    pub frozen_attention: bool,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            sigma: 0.6,
            top_m: 3,
            ignored_pct: 40.0,
            lambda: 1.0,
            start_epoch: 12,
            frozen_attention: false,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if self.top_m < 1 {
            return Err(Error::Config("top_m must be >= 1".into()));
        }
        if !(self.ignored_pct > 0.0 && self.ignored_pct <= 100.0) {
            return Err(Error::Config(format!(
                "ignored_pct must lie in (0, 100], got {}",
                self.ignored_pct
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyObject {
    pub id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyObjectReport {
    pub key_ids: Vec<KeyObject>,
    pub ignored_ids: Vec<usize>,
    pub masked_ids: Vec<usize>,
}

/// A scene with the ignored key objects deactivated, paired with its question
/// and an all-zero answer target.
#[derive(Clone, Debug, PartialEq)]
pub struct CuratedSample {
    pub scene: Scene,
    pub question_tokens: Vec<String>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CurateOutcome {
    Curated(CuratedSample),
    /// Key objects and ignored objects do not overlap.
    NoIgnoredKeys,
    /// Masking would leave no active detection; the sample is skipped.
    WouldEmptyScene,
}

impl CurateOutcome {
    pub fn sample(&self) -> Option<&CuratedSample> {
        match self {
            CurateOutcome::Curated(s) => Some(s),
            _ => None,
        }
    }
}

/// Active detections whose best cosine similarity to any noun is at least
/// `sigma`, highest first (ties by id), truncated to `top_m`.
pub fn identify_key_objects(
    scene: &Scene,
    nouns: &[String],
    table: &EmbeddingTable,
    sigma: f64,
    top_m: usize,
) -> Vec<KeyObject> {
    let mut keys: Vec<KeyObject> = scene
        .detections
        .iter()
        .filter(|d| d.active)
        .filter_map(|d| {
            let score = nouns
                .iter()
                .filter_map(|n| table.cosine(&d.category, n))
                .fold(f64::NEG_INFINITY, f64::max);
            // Tolerate rounding in the cosine so sigma = 1 keeps exact matches.
            (score >= sigma - 1e-12).then_some(KeyObject { id: d.id, score })
        })
        .collect();
    keys.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    keys.truncate(top_m);
    keys
}

/// Ids of the bottom `floor(K_active * pct / 100)` active detections when
/// ranked by attention descending (ties by ascending id). Returned lowest
/// weight first.
pub fn locate_ignored(attention: &[f64], active: &[bool], pct: f64) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..attention.len()).filter(|&i| active[i]).collect();
    ranked.sort_by(|&a, &b| attention[b].total_cmp(&attention[a]).then(a.cmp(&b)));
    let count = ((ranked.len() as f64 * pct) / 100.0 + 1e-9).floor() as usize;
    ranked.iter().rev().take(count.min(ranked.len())).copied().collect()
}

/// Builds the curated sample for `V* ∩ V^o`, if that intersection is non-empty.
pub fn curate(
    scene: &Scene,
    qa: &QAInstance,
    key_ids: &[KeyObject],
    ignored_ids: &[usize],
    num_answers: usize,
) -> (CurateOutcome, KeyObjectReport) {
    let masked_ids: Vec<usize> = key_ids
        .iter()
        .map(|k| k.id)
        .filter(|id| ignored_ids.contains(id))
        .collect();
    let report = KeyObjectReport {
        key_ids: key_ids.to_vec(),
        ignored_ids: ignored_ids.to_vec(),
        masked_ids: masked_ids.clone(),
    };
    if masked_ids.is_empty() {
        return (CurateOutcome::NoIgnoredKeys, report);
    }
    let curated = scene.with_masked(&masked_ids);
    if curated.active_count() == 0 {
        return (CurateOutcome::WouldEmptyScene, report);
    }
    let sample = CuratedSample {
        scene: curated,
        question_tokens: qa.question_tokens.clone(),
        target: vec![0.0; num_answers],
    };
    (CurateOutcome::Curated(sample), report)
}

/// `L_all = L_vqa + lambda * L_reg`.
pub fn combined_loss(l_vqa: f64, l_reg: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return l_vqa;
    }
    l_vqa + lambda * l_reg
}

/// Fine-tunes `model` on `train` with curated samples active from
/// `reg.start_epoch` on. Epochs are numbered absolutely, so a finetuning run
/// after a 12-epoch pretraining covers `start_epoch..start_epoch + epochs`.
pub fn finetune_with_attreg(
    model: &mut Model,
    train: &DatasetSplit,
    reg: &RegConfig,
    optimizer: AdamConfig,
    epochs: std::ops::Range<usize>,
    batch_size: usize,
    seed: u64,
) -> Result<TrainLog> {
    reg.validate()?;
    let options = TrainOptions {
        epochs,
        optimizer,
        batch_size,
        seed,
        regime: Regime::AttReg(reg.clone()),
        probe: Some(train::Probe::from_split(train, reg.clone(), 2000)),
        ..TrainOptions::default()
    };
    train::train(model, train, &options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{Lexicon, ObjectDetection, QuestionCategory};

    fn scene_of(categories: &[&str]) -> Scene {
        Scene {
            scene_id: 0,
            detections: categories
                .iter()
                .enumerate()
                .map(|(id, c)| ObjectDetection {
                    id,
                    category: c.to_string(),
                    attributes: vec![],
                    feature: vec![0.0; 2],
                    bbox: [0.0, 0.0, 0.5, 0.5],
                    active: true,
                })
                .collect(),
        }
    }

    fn qa() -> QAInstance {
        QAInstance {
            qid: 0,
            scene_id: 0,
            question_tokens: vec![
                "what".into(),
                "color".into(),
                "is".into(),
                "the".into(),
                "frisbee".into(),
            ],
            question_category: QuestionCategory::Other,
            question_type: "what_color".into(),
            answers: vec!["red".into(); 10],
            nouns: vec!["frisbee".into()],
            gt_key_object_ids: vec![1],
        }
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn key_objects_by_identical_embedding() {
        let table = Lexicon::builtin().embeddings().clone();
        let scene = scene_of(&["dog", "frisbee", "grass"]);
        let keys = identify_key_objects(&scene, &strs(&["frisbee"]), &table, 0.6, 3);
        assert_eq!(keys.len(), 1);
        assert_eq!(keys[0].id, 1);
        assert!((keys[0].score - 1.0).abs() < 1e-12);
        assert!(identify_key_objects(&scene, &[], &table, 0.6, 3).is_empty());
    }

    #[test]
    fn sigma_one_keeps_exact_matches_only() {
        let table = Lexicon::builtin().embeddings().clone();
        let scene = scene_of(&["dog", "cat", "dog", "cup"]);
        let keys = identify_key_objects(&scene, &strs(&["puppy", "cat"]), &table, 1.0, 8);
        assert_eq!(keys.iter().map(|k| k.id).collect::<Vec<_>>(), vec![1]);
        let keys = identify_key_objects(&scene, &strs(&["puppy", "cat"]), &table, 0.6, 8);
        assert_eq!(keys.iter().map(|k| k.id).collect::<Vec<_>>(), vec![1, 0, 2]);
        let keys = identify_key_objects(&scene, &strs(&["puppy", "cat"]), &table, 0.6, 2);
        assert_eq!(keys.iter().map(|k| k.id).collect::<Vec<_>>(), vec![1, 0]);
    }

    #[test]
    fn inactive_detections_are_never_key_objects() {
        let table = Lexicon::builtin().embeddings().clone();
        let scene = scene_of(&["dog", "frisbee"]).with_masked(&[1]);
        assert!(identify_key_objects(&scene, &strs(&["frisbee"]), &table, 0.6, 3).is_empty());
    }

    #[test]
    fn ignored_counting_rule() {
        let alpha: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0) / 55.0).collect();
        let ignored = locate_ignored(&alpha, &[true; 10], 40.0);
        assert_eq!(ignored, vec![0, 1, 2, 3]);

        let alpha = vec![0.3, 0.05, 0.2, 0.1, 0.15, 0.08, 0.07, 0.05];
        let ignored = locate_ignored(&alpha, &[true; 8], 40.0);
        assert_eq!(ignored.len(), 3);
        // ties at 0.05: id 1 ranks above id 7, so 7 is the lowest.
        assert_eq!(ignored, vec![7, 1, 6]);

        let all = locate_ignored(&alpha, &[true; 8], 100.0);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn ignored_skips_inactive() {
        let alpha = vec![0.0, 0.5, 0.3, 0.2];
        let ignored = locate_ignored(&alpha, &[false, true, true, true], 100.0);
        assert!(!ignored.contains(&0));
        assert_eq!(ignored.len(), 3);
    }

    #[test]
    fn curate_requires_overlap() {
        let scene = scene_of(&["a", "b", "c", "d", "e", "f", "g", "h"]);
        let keys = [KeyObject { id: 2, score: 1.0 }];
        let (out, report) = curate(&scene, &qa(), &keys, &[5, 7], 16);
        assert_eq!(out, CurateOutcome::NoIgnoredKeys);
        assert!(report.masked_ids.is_empty());

        let keys = [KeyObject { id: 2, score: 1.0 }, KeyObject { id: 5, score: 0.9 }];
        let (out, report) = curate(&scene, &qa(), &keys, &[5, 7], 16);
        assert_eq!(report.masked_ids, vec![5]);
        let sample = out.sample().unwrap();
        assert_eq!(sample.scene.active_count(), 7);
        assert!(!sample.scene.detections[5].active);
        assert_eq!(sample.target.iter().sum::<f64>(), 0.0);
        assert_eq!(sample.target.len(), 16);
        for (a, b) in sample.scene.detections.iter().zip(&scene.detections) {
            assert_eq!(a.feature, b.feature);
        }
    }

    #[test]
    fn curate_never_empties_a_scene() {
        let scene = scene_of(&["a", "b"]);
        let keys = [KeyObject { id: 0, score: 1.0 }, KeyObject { id: 1, score: 1.0 }];
        let (out, report) = curate(&scene, &qa(), &keys, &[0, 1], 4);
        assert_eq!(out, CurateOutcome::WouldEmptyScene);
        assert_eq!(report.masked_ids, vec![0, 1]);
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_loss(1.2, 0.4, 0.0), 1.2);
        assert!((combined_loss(1.2, 0.4, 0.5) - 1.4).abs() < 1e-15);
    }

    #[test]
    fn reg_config_validation() {
        assert!(RegConfig::default().validate().is_ok());
        assert!(RegConfig {
            sigma: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RegConfig {
            top_m: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RegConfig {
            ignored_pct: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RegConfig {
            lambda: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
