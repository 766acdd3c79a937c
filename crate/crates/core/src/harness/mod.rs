//! Experiment orchestration: pretraining with validation-based selection,
//! finetuning regimes, evaluation, baselines and result persistence.

mod baselines;
mod experiment;
mod metrics;

pub use baselines::{run_baseline, top_ans_masked, AnswerStatistics, BaselineKind};
pub use experiment::{
    median, read_results, report, run_experiment, split_path, write_results, CorrelationRow, ExperimentConfig,
    ExperimentResults, Failure, GridConfig, GridRow, IgnoredKeyPoint, KeepIntervalRow, MetricsRow, Mode, TvdRow,
    KEEP_INTERVALS,
};
pub use metrics::{accuracy, evaluate, evaluate_with, predictions, CategoryMetrics, MetricsRecord};

use serde::{Deserialize, Serialize};

use crate::attreg::RegConfig;
use crate::diffcore::AdamConfig;
use crate::error::{Error, Result};
use crate::model::{AttentionMode, Model, ModelConfig, QuestionVocab};
use crate::rng::derive_seed;
use crate::synthdata::{DatasetSplit, Lexicon};
use crate::train::{self, Probe, Regime, TrainLog, TrainOptions};

const MODEL_INIT_TAG: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_size: usize,
    /// Training instances used for the per-epoch ignored-key-object probe.
    pub probe_instances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 12,
            finetune_epochs: 8,
            lr_pretrain: 5e-3,
            lr_finetune: 1e-4,
            batch_size: 64,
            probe_instances: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pretrain_epochs == 0 {
            return Err(Error::Config("batch_size and pretrain_epochs must be >= 1".into()));
        }
        for lr in [self.lr_pretrain, self.lr_finetune] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn finetune_range(&self) -> std::ops::Range<usize> {
        self.pretrain_epochs..self.pretrain_epochs + self.finetune_epochs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub l_vqa: f64,
    pub val: MetricsRecord,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<PretrainEpoch>,
}

pub fn init_model(config: &ModelConfig, train: &DatasetSplit, seed: u64) -> Model {
    Model::init(
        config.clone(),
        QuestionVocab::from_lexicon(&Lexicon::builtin()),
        train.answer_vocab.clone(),
        train.feature_dim,
        derive_seed(seed, MODEL_INIT_TAG, 0),
    )
}

/// Plain-loss training from scratch; keeps the epoch with the best in-domain
/// validation accuracy (earliest on ties).
pub fn pretrain(
    model_config: &ModelConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<Pretrained> {
    config.validate()?;
    let mut model = init_model(model_config, train, seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut options = TrainOptions {
        optimizer: AdamConfig::with_lr(config.lr_pretrain),
        batch_size: config.batch_size,
        seed,
        ..TrainOptions::default()
    };
    // One Adam state across all pretraining epochs.
    let log = train_with_callback(
        &mut model,
        train,
        &mut options,
        0..config.pretrain_epochs,
        |epoch, model, stats| {
            let record = evaluate(model, val)?;
            if best.as_ref().is_none_or(|(acc, _, _)| record.overall > *acc) {
                best = Some((record.overall, epoch, model.clone()));
            }
            history.push(PretrainEpoch {
                epoch,
                l_vqa: stats.l_vqa,
                val: record,
            });
            Ok(())
        },
    )?;
    debug_assert_eq!(log.epochs.len(), config.pretrain_epochs);
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(Pretrained {
        model,
        best_epoch,
        history,
    })
}

fn train_with_callback<F>(
    model: &mut Model,
    split: &DatasetSplit,
    options: &mut TrainOptions,
    epochs: std::ops::Range<usize>,
    callback: F,
) -> Result<TrainLog>
where
    F: FnMut(usize, &Model, &train::EpochStats) -> Result<()>,
{
    options.epochs = epochs;
    train::train_observed(model, split, options, callback)
}

/// Finetunes a copy of `pretrained` for the configured finetuning epochs.
pub fn finetune(
    pretrained: &Model,
    train: &DatasetSplit,
    regime: Regime,
    config: &TrainConfig,
    probe: Option<&RegConfig>,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let mut model = pretrained.clone();
    let options = TrainOptions {
        epochs: config.finetune_range(),
        optimizer: AdamConfig::with_lr(config.lr_finetune),
        batch_size: config.batch_size,
        seed,
        regime,
        mode: AttentionMode::Learned,
        probe: probe.map(|r| Probe::from_split(train, r.clone(), config.probe_instances)),
    };
    let log = train::train(&mut model, train, &options)?;
    Ok((model, log))
}

/// AttReg from scratch: the pretraining schedule then the finetuning schedule,
/// with curated samples from epoch 0.
pub fn end_to_end_attreg(
    model_config: &ModelConfig,
    train: &DatasetSplit,
    reg: &RegConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    let reg = RegConfig {
        start_epoch: 0,
        ..reg.clone()
    };
    let mut model = init_model(model_config, train, seed);
    let mut options = TrainOptions {
        epochs: 0..config.pretrain_epochs,
        optimizer: AdamConfig::with_lr(config.lr_pretrain),
        batch_size: config.batch_size,
        seed,
        regime: Regime::AttReg(reg.clone()),
        ..TrainOptions::default()
    };
    let mut log = train::train(&mut model, train, &options)?;
    options.epochs = config.finetune_range();
    options.optimizer = AdamConfig::with_lr(config.lr_finetune);
    let tail = train::train(&mut model, train, &options)?;
    log.epochs.extend(tail.epochs);
    Ok((model, log))
}
