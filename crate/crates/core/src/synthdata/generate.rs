use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lexicon::{extract_nouns, Lexicon, CATEGORIES, COLORS, COUNTS, MATERIALS, SYNONYMS, YES_NO};
use super::{
    AnswerVocab, DatasetSplit, Instance, ObjectDetection, QAInstance, QuestionCategory, Scene, SplitName, ANNOTATORS,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_objects: usize,
    pub feature_dim: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Probability of the modal answer per question type in train and val.
    pub bias: f64,
    /// Probability that an annotator gives the scene-true answer.
    pub annotator_agreement: f64,
    pub feature_noise: f64,
    pub category_scale: f64,
    pub attribute_scale: f64,
    /// Fraction of questions that name their object with a synonym.
    pub synonym_rate: f64,
    /// Length of the objectness direction added to the one salient detection
    /// of every scene.
    pub salience_scale: f64,
    /// Probability that the salient detection is the question's target.
    pub salient_target_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            feature_dim: 32,
            train_size: 6000,
            val_size: 1000,
            test_size: 2000,
            bias: 0.8,
            annotator_agreement: 0.9,
            feature_noise: 0.1,
            category_scale: 1.0,
            attribute_scale: 1.0,
            synonym_rate: 0.25,
            salience_scale: 3.0,
            salient_target_rate: 0.7,
        }
    }
}

impl DataConfig {
    /// Validates ranges; returns warnings for legal but degenerate settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.num_objects < 2 {
            return Err(Error::Config(format!(
                "num_objects must be >= 2, got {}",
                self.num_objects
            )));
        }
        if self.num_objects < COUNTS.len() + 1 {
            return Err(Error::Config(format!(
                "num_objects must be >= {} to fit counting questions",
                COUNTS.len() + 1
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(self.bias > 0.0 && self.bias < 1.0) {
            return Err(Error::Config(format!("bias must lie in (0, 1), got {}", self.bias)));
        }
        if self.bias <= 0.5 {
            warnings.push(format!("bias {} <= 0.5: splits carry no language prior", self.bias));
        }
        if !(0.0..=1.0).contains(&self.annotator_agreement) {
            return Err(Error::Config("annotator_agreement must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) {
            return Err(Error::Config("synonym_rate must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.salient_target_rate) {
            return Err(Error::Config("salient_target_rate must lie in [0, 1]".into()));
        }
        if self.salience_scale < 0.0 || !self.salience_scale.is_finite() {
            return Err(Error::Config("salience_scale must be finite and >= 0".into()));
        }
        if self.feature_noise < 0.0 || !self.feature_noise.is_finite() {
            return Err(Error::Config("feature_noise must be finite and >= 0".into()));
        }
        Ok(warnings)
    }
}

/// Question templates. Each carries its own answer prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuestionType {
    WhatColor,
    WhatMaterial,
    IsColor,
    IsMaterial,
    HowMany,
}

pub fn question_types() -> [QuestionType; 5] {
    [
        QuestionType::WhatColor,
        QuestionType::WhatMaterial,
        QuestionType::IsColor,
        QuestionType::IsMaterial,
        QuestionType::HowMany,
    ]
}

impl QuestionType {
    pub fn id(self) -> &'static str {
        match self {
            Self::WhatColor => "what_color",
            Self::WhatMaterial => "what_material",
            Self::IsColor => "is_the_color",
            Self::IsMaterial => "is_the_material",
            Self::HowMany => "how_many",
        }
    }

    pub fn category(self) -> QuestionCategory {
        match self {
            Self::WhatColor | Self::WhatMaterial => QuestionCategory::Other,
            Self::IsColor | Self::IsMaterial => QuestionCategory::YesNo,
            Self::HowMany => QuestionCategory::Number,
        }
    }

    pub fn answers(self) -> &'static [&'static str] {
        match self {
            Self::WhatColor => &COLORS,
            Self::WhatMaterial => &MATERIALS,
            Self::IsColor | Self::IsMaterial => &YES_NO,
            Self::HowMany => &COUNTS,
        }
    }

    fn tokens(self, noun: &str, asked: &str) -> Vec<String> {
        let words: Vec<&str> = match self {
            Self::WhatColor => vec!["what", "color", "is", "the", noun],
            Self::WhatMaterial => vec!["what", "is", "the", noun, "made", "of"],
            Self::IsColor => vec!["is", "the", noun, asked],
            Self::IsMaterial => vec!["is", "the", noun, "made", "of", asked],
            Self::HowMany => vec!["how", "many", noun, "are", "there"],
        };
        words.into_iter().map(str::to_string).collect()
    }
}

/// Answer distributions of one question type.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerPrior {
    pub answers: Vec<&'static str>,
    pub train: Vec<f64>,
    pub test: Vec<f64>,
}

impl AnswerPrior {
    /// The modal answer gets `bias`; the rest share `1 - bias` with weights
    /// `1/1, 1/2, ...` in a seed-chosen order. The out-of-domain prior is
    /// proportional to the inverse of the train prior.
    fn build(qtype: QuestionType, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut answers: Vec<&'static str> = qtype.answers().to_vec();
        answers.shuffle(rng);
        let n = answers.len();
        let weights: Vec<f64> = (1..n).map(|k| 1.0 / k as f64).collect();
        let total: f64 = weights.iter().sum();
        let mut train = vec![bias];
        train.extend(weights.iter().map(|w| (1.0 - bias) * w / total));
        let inv: Vec<f64> = train.iter().map(|p| 1.0 / p).collect();
        let inv_total: f64 = inv.iter().sum();
        let test = inv.iter().map(|x| x / inv_total).collect();
        Self { answers, train, test }
    }

    fn sample(&self, split: SplitName, rng: &mut ChaCha8Rng) -> &'static str {
        let probs = match split {
            SplitName::Train | SplitName::ValIndomain => &self.train,
            SplitName::TestOod => &self.test,
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.answers.iter().zip(probs) {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.answers[self.answers.len() - 1]
    }
}

/// The three splits of one generated benchmark plus generation warnings.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
    pub warnings: Vec<String>,
}

impl Benchmark {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::ValIndomain => &self.val,
            SplitName::TestOod => &self.test,
        }
    }
}

struct Prototypes {
    category: Vec<Vec<f64>>,
    color: Vec<Vec<f64>>,
    material: Vec<Vec<f64>>,
    salience: Vec<f64>,
}

impl Prototypes {
    fn draw(config: &DataConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = config.feature_dim;
        let unit = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut draw = |n: usize, scale: f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| scale * unit.sample(rng)).collect())
                .collect()
        };
        Self {
            category: draw(CATEGORIES.len(), config.category_scale),
            color: draw(COLORS.len(), config.attribute_scale),
            material: draw(MATERIALS.len(), config.attribute_scale),
            salience: draw(1, config.salience_scale).remove(0),
        }
    }
}

fn answer_vocab() -> AnswerVocab {
    let tokens = YES_NO
        .iter()
        .chain(COUNTS.iter())
        .chain(COLORS.iter())
        .chain(MATERIALS.iter())
        .map(|s| s.to_string())
        .collect();
    AnswerVocab::new(tokens)
}

struct Generator<'a> {
    config: &'a DataConfig,
    lexicon: Lexicon,
    prototypes: Prototypes,
    priors: Vec<(QuestionType, AnswerPrior)>,
    noise: Normal<f64>,
}

/// Generates train / in-domain val / out-of-domain test splits.
///
/// Output is a pure function of `(config, seed)`; every instance draws from its
/// own seed stream derived from the split and index.
pub fn generate_benchmark(config: &DataConfig, seed: u64) -> Result<Benchmark> {
    let warnings = config.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let prototypes = Prototypes::draw(config, &mut proto_rng);
    let mut prior_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, 0));
    let priors = question_types()
        .into_iter()
        .map(|q| (q, AnswerPrior::build(q, config.bias, &mut prior_rng)))
        .collect();
    let generator = Generator {
        config,
        lexicon: Lexicon::builtin(),
        prototypes,
        priors,
        noise: Normal::new(0.0, config.feature_noise.max(0.0)).expect("valid normal"),
    };
    let make = |name: SplitName, size: usize, tag: u64| -> DatasetSplit {
        let instances = (0..size)
            .map(|i| generator.instance(name, tag * 10_000_000 + i as u64, derive_seed(seed, 2 + tag, i as u64)))
            .collect();
        DatasetSplit {
            name,
            answer_vocab: answer_vocab(),
            num_objects: config.num_objects,
            feature_dim: config.feature_dim,
            instances,
        }
    };
    Ok(Benchmark {
        train: make(SplitName::Train, config.train_size, 0),
        val: make(SplitName::ValIndomain, config.val_size, 1),
        test: make(SplitName::TestOod, config.test_size, 2),
        warnings,
    })
}

impl Generator<'_> {
    fn instance(&self, split: SplitName, qid: u64, seed: u64) -> Instance {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let k = self.config.num_objects;
        let (qtype, prior) = &self.priors[rng.random_range(0..self.priors.len())];
        let qtype = *qtype;
        let answer = prior.sample(split, rng);

        let target = rng.random_range(0..CATEGORIES.len());
        let mut target_color = rng.random_range(0..COLORS.len());
        let mut target_material = rng.random_range(0..MATERIALS.len());
        let mut n_targets = 1;
        let mut asked = "";
        match qtype {
            QuestionType::WhatColor => target_color = index_in(&COLORS, answer),
            QuestionType::WhatMaterial => target_material = index_in(&MATERIALS, answer),
            QuestionType::HowMany => n_targets = index_in(&COUNTS, answer) + 1,
            QuestionType::IsColor => asked = ask(&COLORS, target_color, answer == "yes", rng),
            QuestionType::IsMaterial => asked = ask(&MATERIALS, target_material, answer == "yes", rng),
        }

        // (category, color, material) per slot; target copies first, then shuffled.
        let mut slots: Vec<(usize, usize, usize)> = Vec::with_capacity(k);
        slots.push((target, target_color, target_material));
        for _ in 1..n_targets {
            slots.push((
                target,
                rng.random_range(0..COLORS.len()),
                rng.random_range(0..MATERIALS.len()),
            ));
        }
        while slots.len() < k {
            let mut c = rng.random_range(0..CATEGORIES.len() - 1);
            if c >= target {
                c += 1;
            }
            slots.push((
                c,
                rng.random_range(0..COLORS.len()),
                rng.random_range(0..MATERIALS.len()),
            ));
        }
        // The salient slot is the first target or one of the distractors.
        let salient = if rng.random::<f64>() < self.config.salient_target_rate {
            0
        } else {
            rng.random_range(n_targets..k)
        };
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(rng);

        let detections: Vec<ObjectDetection> = order
            .iter()
            .enumerate()
            .map(|(id, &slot)| {
                let (c, col, mat) = slots[slot];
                let mut feature = self.feature(c, col, mat, rng);
                let is_salient = slot == salient;
                if is_salient {
                    for (f, s) in feature.iter_mut().zip(&self.prototypes.salience) {
                        *f += s;
                    }
                }
                ObjectDetection {
                    id,
                    category: CATEGORIES[c].to_string(),
                    attributes: vec![COLORS[col].to_string(), MATERIALS[mat].to_string()],
                    feature,
                    bbox: random_box(rng, is_salient),
                    active: true,
                }
            })
            .collect();

        let category = CATEGORIES[target];
        let synonym = SYNONYMS.iter().find(|(_, cat, _)| *cat == category).map(|(s, _, _)| *s);
        let noun = match synonym {
            Some(s) if rng.random::<f64>() < self.config.synonym_rate => s,
            _ => category,
        };
        let question_tokens = qtype.tokens(noun, asked);
        let nouns = extract_nouns(&question_tokens, &self.lexicon);
        let gt_key_object_ids = detections
            .iter()
            .filter(|d| nouns.contains(&d.category))
            .map(|d| d.id)
            .collect();

        let answers = (0..ANNOTATORS)
            .map(|_| {
                if rng.random::<f64>() < self.config.annotator_agreement {
                    answer.to_string()
                } else {
                    let others: Vec<&str> = qtype.answers().iter().copied().filter(|a| *a != answer).collect();
                    others.choose(rng).copied().expect("several answers").to_string()
                }
            })
            .collect();

        Instance {
            scene: Scene {
                scene_id: qid,
                detections,
            },
            qa: QAInstance {
                qid,
                scene_id: qid,
                question_tokens,
                question_category: qtype.category(),
                question_type: qtype.id().to_string(),
                answers,
                nouns,
                gt_key_object_ids,
            },
        }
    }

    fn feature(&self, c: usize, col: usize, mat: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = &self.prototypes;
        (0..self.config.feature_dim)
            .map(|j| p.category[c][j] + p.color[col][j] + p.material[mat][j] + self.noise.sample(rng))
            .collect()
    }
}

/// The true attribute for a "yes" answer, otherwise a different one.
fn ask(list: &[&'static str], truth: usize, yes: bool, rng: &mut ChaCha8Rng) -> &'static str {
    if yes {
        return list[truth];
    }
    let others: Vec<&'static str> = list
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != truth)
        .map(|(_, a)| *a)
        .collect();
    others.choose(rng).copied().expect("several attributes")
}

fn index_in(list: &[&str], token: &str) -> usize {
    list.iter()
        .position(|x| *x == token)
        .expect("answer belongs to its template")
}

fn random_box(rng: &mut ChaCha8Rng, large: bool) -> [f64; 4] {
    let range = if large { 0.4..0.8 } else { 0.05..0.4 };
    let w = rng.random_range(range.clone());
    let h = rng.random_range(range);
    let x1 = rng.random_range(0.0..1.0 - w);
    let y1 = rng.random_range(0.0..1.0 - h);
    [x1, y1, x1 + w, y1 + h]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            train_size: 800,
            val_size: 100,
            test_size: 300,
            ..DataConfig::default()
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        let a = generate_benchmark(&small(), 7).unwrap();
        let b = generate_benchmark(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_benchmark(&small(), 8).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn rejects_tiny_scenes_and_warns_on_weak_bias() {
        let cfg = DataConfig {
            num_objects: 1,
            ..small()
        };
        assert!(generate_benchmark(&cfg, 0).is_err());
        let cfg = DataConfig { bias: 0.5, ..small() };
        let b = generate_benchmark(&cfg, 0).unwrap();
        assert_eq!(b.warnings.len(), 1);
    }

    #[test]
    fn structural_invariants_hold() {
        let b = generate_benchmark(&small(), 3).unwrap();
        let vocab = &b.train.answer_vocab;
        for split in [&b.train, &b.val, &b.test] {
            assert_eq!(&split.answer_vocab, vocab);
            for inst in &split.instances {
                assert_eq!(inst.qa.answers.len(), ANNOTATORS);
                assert!(inst.qa.answers.iter().all(|a| vocab.index_of(a).is_some()));
                assert!(inst.qa.question_tokens.len() <= super::super::MAX_QUESTION_LEN);
                assert_eq!(inst.scene.len(), 8);
                let expected: Vec<usize> = inst
                    .scene
                    .detections
                    .iter()
                    .filter(|d| inst.qa.nouns.contains(&d.category))
                    .map(|d| d.id)
                    .collect();
                assert_eq!(inst.qa.gt_key_object_ids, expected);
                for (i, d) in inst.scene.detections.iter().enumerate() {
                    assert_eq!(d.id, i);
                    let [x1, y1, x2, y2] = d.bbox;
                    assert!(0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0);
                    assert!(d.feature.iter().all(|v| v.is_finite()));
                }
            }
        }
    }

    #[test]
    fn color_question_key_object_is_unique_ball() {
        let b = generate_benchmark(&small(), 11).unwrap();
        let inst = b
            .train
            .instances
            .iter()
            .find(|i| i.qa.question_tokens.join(" ") == "what color is the ball")
            .expect("some ball color question");
        let balls: Vec<usize> = inst
            .scene
            .detections
            .iter()
            .filter(|d| d.category == "ball")
            .map(|d| d.id)
            .collect();
        assert_eq!(balls.len(), 1);
        assert_eq!(inst.qa.gt_key_object_ids, balls);
    }

    #[test]
    fn inverted_prior_flips_the_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in question_types() {
            let p = AnswerPrior::build(q, 0.9, &mut rng);
            let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
            assert_ne!(argmax(&p.train), argmax(&p.test));
            assert!((p.train.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.test.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
