//! Minibatch training loop shared by pretraining, plain finetuning, AttReg and
//! the randomized controls.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attreg::{self, combined_loss, CurateOutcome, KeyObject, RegConfig};
use crate::diffcore::{adam_step, AdamConfig, AdamState, Tape, Var};
use crate::error::{DiffError, Error, Result};
use crate::faitheval;
use crate::model::{AttentionMode, Model};
use crate::rng::derive_seed;
use crate::synthdata::{DatasetSplit, EmbeddingTable, Lexicon};

const SHUFFLE_TAG: u64 = 100;
const RAND_MASK_TAG: u64 = 300;
const RAND_IMG_TAG: u64 = 400;

/// What, besides the original batch, each step trains on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regime {
    Plain,
    AttReg(RegConfig),
    /// Masks `1..=max_masked` random active detections, zero target.
    RandMask {
        max_masked: usize,
        lambda: f64,
    },
    /// Pairs each question with a different random scene, zero target.
    RandImg {
        lambda: f64,
    },
}

/// Periodic measurement of the mean ignored-key-object count on a prefix of
/// the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub reg: RegConfig,
    pub max_instances: usize,
}

impl Probe {
    pub fn from_split(split: &DatasetSplit, reg: RegConfig, max_instances: usize) -> Self {
        Self {
            reg,
            max_instances: max_instances.min(split.instances.len()),
        }
    }

    pub fn measure(&self, model: &Model, split: &DatasetSplit) -> Result<f64> {
        let n = self.max_instances.min(split.instances.len());
        faitheval::ignored_key_count(model, &split.instances[..n], &self.reg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    /// Absolute epoch numbers; they seed the per-epoch shuffles.
    pub epochs: Range<usize>,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
    pub mode: AttentionMode,
    pub probe: Option<Probe>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 0..1,
            optimizer: AdamConfig::default(),
            batch_size: 64,
            seed: 0,
            regime: Regime::Plain,
            mode: AttentionMode::Learned,
            probe: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub l_vqa: f64,
    /// Mean over steps that had at least one extra sample.
    pub l_reg: Option<f64>,
    pub curated: usize,
    /// Curated samples dropped because masking would empty the scene.
    pub skipped: usize,
    /// Mean `|V* ∩ V^o|` seen during the epoch's steps.
    pub train_ignored_keys: Option<f64>,
    /// Probe value after the epoch.
    pub mean_ignored_key_count: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Probe value before the first epoch.
    pub initial_ignored_key_count: Option<f64>,
    pub epochs: Vec<EpochStats>,
    /// `(qid, donor index)` pairs from the first rand_img step.
    pub rand_img_pairs: Vec<(u64, usize)>,
}

/// Uniformly chosen index in `0..n` other than `own`.
pub fn rand_img_donor<R: Rng>(rng: &mut R, n: usize, own: usize) -> usize {
    assert!(n >= 2, "rand_img needs at least two scenes");
    let pick = rng.random_range(0..n - 1);
    if pick >= own {
        pick + 1
    } else {
        pick
    }
}

fn key_object_table(split: &DatasetSplit, reg: &RegConfig, table: &EmbeddingTable) -> Vec<Vec<KeyObject>> {
    split
        .instances
        .iter()
        .map(|inst| attreg::identify_key_objects(&inst.scene, &inst.qa.nouns, table, reg.sigma, reg.top_m))
        .collect()
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

struct StepOutcome {
    l_vqa: f64,
    l_reg: Option<f64>,
    curated: usize,
    skipped: usize,
    ignored_keys: usize,
}

pub fn train(model: &mut Model, split: &DatasetSplit, options: &TrainOptions) -> Result<TrainLog> {
    train_observed(model, split, options, |_, _, _| Ok(()))
}

/// [`train`] with a callback after every epoch.
pub fn train_observed<F>(
    model: &mut Model,
    split: &DatasetSplit,
    options: &TrainOptions,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &Model, &EpochStats) -> Result<()>,
{
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if split.instances.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if split.answer_vocab != model.answer_vocab {
        return Err(Error::VocabMismatch);
    }
    match &options.regime {
        Regime::AttReg(reg) => reg.validate()?,
        Regime::RandMask { max_masked, lambda } => {
            if *max_masked == 0 || (*lambda < 0.0 || lambda.is_nan()) {
                return Err(Error::Config("rand_mask needs max_masked >= 1 and lambda >= 0".into()));
            }
        }
        Regime::RandImg { lambda } => {
            if split.instances.len() < 2 || (*lambda < 0.0 || lambda.is_nan()) {
                return Err(Error::Config(
                    "rand_img needs two or more scenes and lambda >= 0".into(),
                ));
            }
        }
        Regime::Plain => {}
    }

    let lexicon = Lexicon::builtin();
    let keys = match &options.regime {
        Regime::AttReg(reg) => Some(key_object_table(split, reg, lexicon.embeddings())),
        _ => None,
    };
    let mut frozen: Option<Model> = None;

    let mut log = TrainLog::default();
    if let Some(probe) = &options.probe {
        log.initial_ignored_key_count = Some(probe.measure(model, split)?);
    }

    let mut state = AdamState::new();
    let mut order: Vec<usize> = (0..split.instances.len()).collect();
    for epoch in options.epochs.clone() {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            options.seed,
            SHUFFLE_TAG,
            epoch as u64,
        )));

        let reg_active = match &options.regime {
            Regime::AttReg(reg) => epoch >= reg.start_epoch,
            _ => true,
        };
        if let Regime::AttReg(reg) = &options.regime {
            if reg_active && reg.frozen_attention && frozen.is_none() {
                frozen = Some(model.clone());
            }
        }

        let mut sum_vqa = 0.0;
        let mut sum_reg = 0.0;
        let mut reg_steps = 0usize;
        let mut curated = 0;
        let mut skipped = 0;
        let mut ignored_keys = 0usize;
        let mut steps = 0;
        for (step, batch) in order.chunks(options.batch_size).enumerate() {
            let ctx = StepContext {
                split,
                epoch,
                step,
                batch,
                options,
                reg_active,
                keys: keys.as_deref(),
                frozen: frozen.as_ref(),
            };
            let (outcome, grads) = ctx.run(model, &mut log)?;
            adam_step(&mut model.params, &grads, &mut state, &options.optimizer).map_err(|e| match e {
                DiffError::NonFiniteGradient { .. } => diverged(epoch, step, outcome.l_vqa),
                other => other.into(),
            })?;
            sum_vqa += outcome.l_vqa;
            if let Some(r) = outcome.l_reg {
                sum_reg += r;
                reg_steps += 1;
            }
            curated += outcome.curated;
            skipped += outcome.skipped;
            ignored_keys += outcome.ignored_keys;
            steps += 1;
        }
        let is_attreg = matches!(options.regime, Regime::AttReg(_)) && reg_active;
        let mean_ignored = match &options.probe {
            Some(probe) => Some(probe.measure(model, split)?),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            l_vqa: sum_vqa / steps as f64,
            l_reg: (reg_steps > 0).then(|| sum_reg / reg_steps as f64),
            curated,
            skipped,
            train_ignored_keys: is_attreg.then(|| ignored_keys as f64 / split.instances.len() as f64),
            mean_ignored_key_count: mean_ignored,
        };
        on_epoch(epoch, model, &stats)?;
        log.epochs.push(stats);
    }
    Ok(log)
}

struct StepContext<'a> {
    split: &'a DatasetSplit,
    epoch: usize,
    step: usize,
    batch: &'a [usize],
    options: &'a TrainOptions,
    reg_active: bool,
    keys: Option<&'a [Vec<KeyObject>]>,
    frozen: Option<&'a Model>,
}

impl StepContext<'_> {
    fn check(&self, e: Error, loss: f64) -> Error {
        match e {
            Error::Diff(DiffError::NonFinite { .. }) => diverged(self.epoch, self.step, loss),
            other => other,
        }
    }

    fn run(&self, model: &Model, log: &mut TrainLog) -> Result<(StepOutcome, Vec<crate::diffcore::Tensor>)> {
        let options = self.options;
        let mode = options.mode;
        let n_answers = model.answer_vocab.len();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true)?;
        let mut out = StepOutcome {
            l_vqa: f64::NAN,
            l_reg: None,
            curated: 0,
            skipped: 0,
            ignored_keys: 0,
        };

        let mut vqa_losses = Vec::with_capacity(self.batch.len());
        let mut extra_losses: Vec<Var> = Vec::new();
        for &idx in self.batch {
            let inst = &self.split.instances[idx];
            let (vars, loss) = model
                .forward_loss(&mut tape, &bound, &inst.scene, &inst.qa, mode)
                .map_err(|e| self.check(e, f64::NAN))?;
            vqa_losses.push(loss);
            if !self.reg_active {
                continue;
            }
            let extra = match &options.regime {
                Regime::Plain => None,
                Regime::AttReg(reg) => {
                    let attention = match self.frozen {
                        Some(f) => f.infer(&inst.scene, &inst.qa.question_tokens, mode)?.attention,
                        None => tape.value(vars.attention).data().to_vec(),
                    };
                    let ignored = attreg::locate_ignored(&attention, &inst.scene.active_mask(), reg.ignored_pct);
                    let keys = &self.keys.expect("key objects precomputed")[idx];
                    let (outcome, report) = attreg::curate(&inst.scene, &inst.qa, keys, &ignored, n_answers);
                    out.ignored_keys += report.masked_ids.len();
                    match outcome {
                        CurateOutcome::Curated(s) if reg.lambda > 0.0 => Some((s.scene, s.target)),
                        CurateOutcome::Curated(_) | CurateOutcome::NoIgnoredKeys => None,
                        CurateOutcome::WouldEmptyScene => {
                            out.skipped += 1;
                            None
                        }
                    }
                }
                Regime::RandMask { max_masked, lambda } => {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                        options.seed,
                        RAND_MASK_TAG + self.epoch as u64,
                        inst.qa.qid,
                    ));
                    let mut active: Vec<usize> = (0..inst.scene.len())
                        .filter(|&i| inst.scene.detections[i].active)
                        .collect();
                    // keep at least one detection
                    let limit = (*max_masked).min(active.len().saturating_sub(1));
                    if limit == 0 || *lambda == 0.0 {
                        None
                    } else {
                        let count = rng.random_range(1..=limit);
                        active.shuffle(&mut rng);
                        Some((inst.scene.with_masked(&active[..count]), vec![0.0; n_answers]))
                    }
                }
                Regime::RandImg { lambda } => {
                    if *lambda == 0.0 {
                        None
                    } else {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                            options.seed,
                            RAND_IMG_TAG + self.epoch as u64,
                            inst.qa.qid,
                        ));
                        let donor = rand_img_donor(&mut rng, self.split.instances.len(), idx);
                        if log.rand_img_pairs.len() < self.batch.len()
                            && self.step == 0
                            && self.epoch == options.epochs.start
                        {
                            log.rand_img_pairs.push((inst.qa.qid, donor));
                        }
                        Some((self.split.instances[donor].scene.clone(), vec![0.0; n_answers]))
                    }
                }
            };
            if let Some((scene, target)) = extra {
                let vars = model
                    .forward(&mut tape, &bound, &scene, &inst.qa.question_tokens, mode)
                    .map_err(|e| self.check(e, f64::NAN))?;
                extra_losses.push(tape.sigmoid_bce(vars.logits, &target)?);
                out.curated += 1;
            }
        }

        let l_vqa = mean_of(&mut tape, &vqa_losses)?;
        out.l_vqa = tape.value(l_vqa).item();
        let lambda = match &options.regime {
            Regime::Plain => 0.0,
            Regime::AttReg(r) => r.lambda,
            Regime::RandMask { lambda, .. } | Regime::RandImg { lambda } => *lambda,
        };
        let total = if extra_losses.is_empty() {
            l_vqa
        } else {
            let l_reg = mean_of(&mut tape, &extra_losses)?;
            let reg_value = tape.value(l_reg).item();
            out.l_reg = Some(reg_value);
            let weighted = tape.scale(l_reg, lambda)?;
            let total = tape.add(l_vqa, weighted)?;
            debug_assert!((tape.value(total).item() - combined_loss(out.l_vqa, reg_value, lambda)).abs() < 1e-9);
            total
        };
        let total_value = tape.value(total).item();
        if !total_value.is_finite() {
            return Err(diverged(self.epoch, self.step, total_value));
        }
        tape.backward(total).map_err(|e| self.check(e.into(), total_value))?;
        Ok((out, model.collect_grads(&tape, &bound)))
    }
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l)?;
    }
    Ok(tape.scale(total, 1.0 / losses.len() as f64)?)
}
