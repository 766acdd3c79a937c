use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::baselines::{run_baseline, BaselineKind};
use super::metrics::{evaluate_with, MetricsRecord};
use super::{end_to_end_attreg, finetune, pretrain, TrainConfig};
use crate::attreg::RegConfig;
use crate::error::{Error, Result};
use crate::faitheval::{self, GroundingSource};
use crate::model::{save_checkpoint, AttentionMode, Model, ModelConfig};
use crate::synthdata::{generate_benchmark, read_split, Benchmark, DataConfig, SplitName};
use crate::train::{Regime, TrainLog};

/// One unit of work in an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Plain,
    Attreg,
    RandMask,
    RandImg,
    /// AttReg active from epoch 0 over the whole schedule.
    EndToEnd,
    /// Re-evaluates the pretrained, plain and attreg models with the attention
    /// module replaced by uniform weights.
    Uniform,
    RandomPredictions,
    RandomPredictionsInverted,
    TopAnsMasked,
    /// Keep-interval sweeps and TVD curves on the pretrained, plain and
    /// attreg models.
    Faitheval,
}

/// One-factor-at-a-time AttReg grids around `reg`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub lambda: Vec<f64>,
    pub top_m: Vec<usize>,
    pub ignored_pct: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GridConfig {
    fn points(&self, base: &RegConfig) -> Vec<(&'static str, String, RegConfig)> {
        let mut out = Vec::new();
        for &v in &self.lambda {
            out.push((
                "lambda",
                v.to_string(),
                RegConfig {
                    lambda: v,
                    ..base.clone()
                },
            ));
        }
        for &v in &self.top_m {
            out.push((
                "top_m",
                v.to_string(),
                RegConfig {
                    top_m: v,
                    ..base.clone()
                },
            ));
        }
        for &v in &self.ignored_pct {
            out.push((
                "ignored_pct",
                v.to_string(),
                RegConfig {
                    ignored_pct: v,
                    ..base.clone()
                },
            ));
        }
        for &v in &self.sigma {
            out.push((
                "sigma",
                v.to_string(),
                RegConfig {
                    sigma: v,
                    ..base.clone()
                },
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    /// Directory holding `train.jsonl`, `val_indomain.jsonl` and
    /// `test_ood.jsonl`; when unset each seed generates its own benchmark.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub grid: GridConfig,
    /// Validation instances used by the faithfulness protocols.
    pub faitheval_instances: usize,
    pub save_checkpoints: bool,
    /// Run seeds on separate threads.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            data_dir: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            reg: RegConfig::default(),
            seeds: vec![0, 1, 2],
            modes: vec![Mode::Plain, Mode::Attreg],
            grid: GridConfig::default(),
            faitheval_instances: 500,
            save_checkpoints: true,
            parallel: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if let Some(dir) = &self.data_dir {
            for name in SplitName::ALL {
                let p = split_path(dir, name);
                if !p.is_file() {
                    return Err(Error::Config(format!("missing split file {}", p.display())));
                }
            }
        } else {
            self.data.validate()?;
        }
        self.train.validate()?;
        self.reg.validate()?;
        for (_, _, reg) in self.grid.points(&self.reg) {
            reg.validate()?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn has(&self, mode: Mode) -> bool {
        self.modes.contains(&mode)
    }
}

pub fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub run: String,
    pub split: SplitName,
    pub metrics: MetricsRecord,
}

/// Probe value after `epoch` completed epochs (absolute).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IgnoredKeyPoint {
    pub seed: u64,
    pub run: String,
    pub epoch: usize,
    pub mean_ignored_key_count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepIntervalRow {
    pub seed: u64,
    pub model: String,
    pub source: GroundingSource,
    pub lo: f64,
    pub hi: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TvdRow {
    pub seed: u64,
    pub model: String,
    pub source: GroundingSource,
    pub rank: usize,
    pub mean_tvd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub seed: u64,
    pub model: String,
    pub source: GroundingSource,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub seed: u64,
    pub axis: String,
    pub value: String,
    pub split: SplitName,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub stage: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub config_hash: String,
    pub rows: Vec<MetricsRow>,
    pub ignored_keys: Vec<IgnoredKeyPoint>,
    pub keep_interval: Vec<KeepIntervalRow>,
    pub tvd: Vec<TvdRow>,
    pub correlations: Vec<CorrelationRow>,
    pub grid: Vec<GridRow>,
    pub failures: Vec<Failure>,
}

impl ExperimentResults {
    pub fn metrics(&self, seed: u64, run: &str, split: SplitName) -> Option<&MetricsRecord> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.run == run && r.split == split)
            .map(|r| &r.metrics)
    }

    /// `run - baseline` overall accuracy on `split` per seed where both exist.
    pub fn paired_deltas(&self, run: &str, baseline: &str, split: SplitName) -> Vec<f64> {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|s| Some(self.metrics(s, run, split)?.overall - self.metrics(s, baseline, split)?.overall))
            .collect()
    }

    /// Ignored-key series for `run` in `seed`, ordered by epoch.
    pub fn ignored_key_series(&self, seed: u64, run: &str) -> Vec<(usize, f64)> {
        self.ignored_keys
            .iter()
            .filter(|p| p.seed == seed && p.run == run)
            .map(|p| (p.epoch, p.mean_ignored_key_count))
            .collect()
    }

    fn extend(&mut self, other: ExperimentResults) {
        self.rows.extend(other.rows);
        self.ignored_keys.extend(other.ignored_keys);
        self.keep_interval.extend(other.keep_interval);
        self.tvd.extend(other.tvd);
        self.correlations.extend(other.correlations);
        self.grid.extend(other.grid);
        self.failures.extend(other.failures);
    }
}

/// Median of a nonempty slice; mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    config_hash: &'a str,
    rows: &'a [MetricsRow],
}

pub const KEEP_INTERVALS: [(f64, f64); 5] = [(0.0, 20.0), (20.0, 40.0), (40.0, 60.0), (60.0, 80.0), (80.0, 100.0)];

fn load_benchmark(config: &ExperimentConfig, seed: u64) -> Result<Benchmark> {
    match &config.data_dir {
        Some(dir) => Ok(Benchmark {
            train: read_split(&split_path(dir, SplitName::Train))?,
            val: read_split(&split_path(dir, SplitName::ValIndomain))?,
            test: read_split(&split_path(dir, SplitName::TestOod))?,
            warnings: Vec::new(),
        }),
        None => generate_benchmark(&config.data, seed),
    }
}

struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    bench: Benchmark,
    out: ExperimentResults,
}

impl SeedRun<'_> {
    fn fail(&mut self, stage: &str, err: &Error) {
        self.out.failures.push(Failure {
            seed: self.seed,
            stage: stage.to_string(),
            error: err.to_string(),
        });
    }

    fn record_all(&mut self, run: &str, model: &Model, mode: AttentionMode) -> Result<()> {
        for name in SplitName::ALL {
            let metrics = evaluate_with(model, self.bench.split(name), mode)?;
            self.push(run, name, metrics);
        }
        Ok(())
    }

    fn push(&mut self, run: &str, split: SplitName, metrics: MetricsRecord) {
        self.out.rows.push(MetricsRow {
            seed: self.seed,
            run: run.to_string(),
            split,
            metrics,
        });
    }

    fn save(&self, run: &str, model: &Model) -> Result<()> {
        if self.config.save_checkpoints {
            save_checkpoint(&self.dir.join(format!("{run}.ckpt.json")), model)?;
        }
        Ok(())
    }

    fn write_epochs(&self, run: &str, log: &TrainLog) -> Result<()> {
        let path = self.dir.join(format!("finetune_{run}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        w.write_record([
            "epoch",
            "l_vqa",
            "l_reg",
            "curated",
            "skipped",
            "train_ignored_keys",
            "mean_ignored_key_count",
        ])?;
        for e in &log.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.l_vqa.to_string(),
                opt(e.l_reg),
                e.curated.to_string(),
                e.skipped.to_string(),
                opt(e.train_ignored_keys),
                opt(e.mean_ignored_key_count),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn finetune_run(&mut self, run: &str, pretrained: &Model, regime: Regime) -> Option<Model> {
        let reg = self.config.reg.clone();
        let result = finetune(
            pretrained,
            &self.bench.train,
            regime,
            &self.config.train,
            Some(&reg),
            self.seed,
        );
        let (model, log) = match result {
            Ok(v) => v,
            Err(e) => {
                self.fail(run, &e);
                return None;
            }
        };
        let start = self.config.train.pretrain_epochs;
        if let Some(v) = log.initial_ignored_key_count {
            self.push_ikc(run, start, v);
        }
        for e in &log.epochs {
            if let Some(v) = e.mean_ignored_key_count {
                self.push_ikc(run, e.epoch + 1, v);
            }
        }
        let io = self
            .write_epochs(run, &log)
            .and_then(|_| self.save(run, &model))
            .and_then(|_| self.record_all(run, &model, AttentionMode::Learned));
        if let Err(e) = io {
            self.fail(run, &e);
        }
        Some(model)
    }

    fn push_ikc(&mut self, run: &str, epoch: usize, value: f64) {
        self.out.ignored_keys.push(IgnoredKeyPoint {
            seed: self.seed,
            run: run.to_string(),
            epoch,
            mean_ignored_key_count: value,
        });
    }

    fn faithfulness(&mut self, name: &str, model: &Model) -> Result<()> {
        let n = self.config.faitheval_instances.min(self.bench.val.len());
        let instances = &self.bench.val.instances[..n];
        for source in [
            GroundingSource::Attention,
            GroundingSource::GradientSaliency,
            GroundingSource::Uniform,
        ] {
            for interval in KEEP_INTERVALS {
                let r = faitheval::keep_interval_eval(model, instances, interval, source, self.seed)?;
                self.out.keep_interval.push(KeepIntervalRow {
                    seed: self.seed,
                    model: name.to_string(),
                    source,
                    lo: r.lo,
                    hi: r.hi,
                    accuracy: r.accuracy,
                    n: r.n,
                });
            }
        }
        for source in [GroundingSource::Attention, GroundingSource::GradientSaliency] {
            let curve = faitheval::region_tvd_curve(model, instances, source, self.seed)?;
            self.out.correlations.push(CorrelationRow {
                seed: self.seed,
                model: name.to_string(),
                source,
                spearman: faitheval::curve_correlation(&curve),
            });
            self.out.tvd.extend(curve.into_iter().map(|r| TvdRow {
                seed: self.seed,
                model: name.to_string(),
                source,
                rank: r.rank,
                mean_tvd: r.mean_tvd,
                n: r.n,
            }));
        }
        Ok(())
    }

    fn execute(&mut self) {
        let config = self.config;
        let pre = match pretrain(
            &config.model,
            &self.bench.train,
            &self.bench.val,
            &config.train,
            self.seed,
        ) {
            Ok(p) => p,
            Err(e) => return self.fail("pretrain", &e),
        };
        let pre_io = write_pretrain_csv(&self.dir.join("pretrain.csv"), &pre.history, pre.best_epoch)
            .and_then(|_| self.save("pretrained", &pre.model))
            .and_then(|_| self.record_all("pretrained", &pre.model, AttentionMode::Learned));
        if let Err(e) = pre_io {
            self.fail("pretrained", &e);
        }

        for kind in [
            BaselineKind::RandomPredictions,
            BaselineKind::RandomPredictionsInverted,
            BaselineKind::TopAnsMasked,
        ] {
            let wanted = match kind {
                BaselineKind::RandomPredictions => Mode::RandomPredictions,
                BaselineKind::RandomPredictionsInverted => Mode::RandomPredictionsInverted,
                _ => Mode::TopAnsMasked,
            };
            if !config.has(wanted) {
                continue;
            }
            for name in SplitName::ALL {
                match run_baseline(
                    kind,
                    &self.bench.train,
                    self.bench.split(name),
                    Some(&pre.model),
                    self.seed,
                ) {
                    Ok(m) => self.push(kind.as_str(), name, m),
                    Err(e) => self.fail(kind.as_str(), &e),
                }
            }
        }

        let plain = config
            .has(Mode::Plain)
            .then(|| self.finetune_run("plain", &pre.model, Regime::Plain))
            .flatten();
        let attreg = config
            .has(Mode::Attreg)
            .then(|| self.finetune_run("attreg", &pre.model, Regime::AttReg(config.reg.clone())))
            .flatten();
        if config.has(Mode::RandMask) {
            let regime = Regime::RandMask {
                max_masked: config.reg.top_m,
                lambda: config.reg.lambda,
            };
            self.finetune_run("rand_mask", &pre.model, regime);
        }
        if config.has(Mode::RandImg) {
            self.finetune_run(
                "rand_img",
                &pre.model,
                Regime::RandImg {
                    lambda: config.reg.lambda,
                },
            );
        }
        for (axis, value, reg) in config.grid.points(&config.reg) {
            let run = format!("attreg[{axis}={value}]");
            if self.finetune_run(&run, &pre.model, Regime::AttReg(reg)).is_some() {
                for split in [SplitName::ValIndomain, SplitName::TestOod] {
                    if let Some(m) = self.out.metrics(self.seed, &run, split) {
                        let accuracy = m.overall;
                        self.out.grid.push(GridRow {
                            seed: self.seed,
                            axis: axis.to_string(),
                            value: value.clone(),
                            split,
                            accuracy,
                        });
                    }
                }
            }
        }
        if config.has(Mode::EndToEnd) {
            match end_to_end_attreg(&config.model, &self.bench.train, &config.reg, &config.train, self.seed) {
                Ok((model, log)) => {
                    let io = self
                        .write_epochs("end_to_end", &log)
                        .and_then(|_| self.save("end_to_end", &model))
                        .and_then(|_| self.record_all("end_to_end", &model, AttentionMode::Learned));
                    if let Err(e) = io {
                        self.fail("end_to_end", &e);
                    }
                }
                Err(e) => self.fail("end_to_end", &e),
            }
        }

        let mut trained: Vec<(&str, &Model)> = vec![("pretrained", &pre.model)];
        trained.extend(plain.as_ref().map(|m| ("plain", m)));
        trained.extend(attreg.as_ref().map(|m| ("attreg", m)));
        if config.has(Mode::Uniform) {
            for (name, model) in &trained {
                let run = format!("{name}+uniform");
                if let Err(e) = self.record_all(&run, model, AttentionMode::Uniform) {
                    self.fail(&run, &e);
                }
            }
        }
        if config.has(Mode::Faitheval) {
            for (name, model) in &trained {
                if let Err(e) = self.faithfulness(name, model) {
                    self.fail(&format!("faitheval:{name}"), &e);
                }
            }
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_pretrain_csv(path: &Path, history: &[super::PretrainEpoch], best: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    w.write_record(["epoch", "l_vqa", "val_overall", "selected"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.l_vqa.to_string(),
            h.val.overall.to_string(),
            (h.epoch == best).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn run_seed(config: &ExperimentConfig, seed: u64, root: &Path) -> ExperimentResults {
    let dir = root.join(format!("seed_{seed}"));
    let mut out = ExperimentResults::default();
    if let Err(e) = fs::create_dir_all(&dir) {
        out.failures.push(Failure {
            seed,
            stage: "setup".into(),
            error: Error::io(&dir, e).to_string(),
        });
        return out;
    }
    let bench = match load_benchmark(config, seed) {
        Ok(b) => b,
        Err(e) => {
            out.failures.push(Failure {
                seed,
                stage: "data".into(),
                error: e.to_string(),
            });
            return out;
        }
    };
    let mut run = SeedRun {
        config,
        seed,
        dir,
        bench,
        out,
    };
    run.execute();
    run.out
}

/// Runs every seed, then writes `metrics.json`, `results.json`,
/// `failures.json` and the `plots/` tables under `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentResults> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let per_seed: Vec<ExperimentResults> = if config.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = config
                .seeds
                .iter()
                .map(|&seed| s.spawn(move || run_seed(config, seed, out_dir)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("seed thread panicked"))
                .collect()
        })
    } else {
        config
            .seeds
            .iter()
            .map(|&seed| run_seed(config, seed, out_dir))
            .collect()
    };
    let mut results = ExperimentResults {
        config_hash: config.hash(),
        ..ExperimentResults::default()
    };
    for r in per_seed {
        results.extend(r);
    }
    write_results(&results, out_dir)?;
    let config_text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out_dir.join("config.toml"), config_text.as_bytes())?;
    Ok(results)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_results(results: &ExperimentResults, out_dir: &Path) -> Result<()> {
    let metrics = MetricsFile {
        config_hash: &results.config_hash,
        rows: &results.rows,
    };
    write_file(&out_dir.join("metrics.json"), &serde_json::to_vec_pretty(&metrics)?)?;
    write_file(&out_dir.join("results.json"), &serde_json::to_vec_pretty(results)?)?;
    write_file(
        &out_dir.join("failures.json"),
        &serde_json::to_vec_pretty(&results.failures)?,
    )?;
    let plots = out_dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    write_csv(&plots.join("fig4b_ignored_keys.csv"), &results.ignored_keys)?;
    write_csv(&plots.join("fig5a_keep_interval.csv"), &results.keep_interval)?;
    write_csv(&plots.join("fig5b_tvd.csv"), &results.tvd)?;
    write_csv(&plots.join("fig5b_correlation.csv"), &results.correlations)?;
    write_csv(&plots.join("fig6_grid.csv"), &results.grid)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(dir: &Path) -> Result<ExperimentResults> {
    let path = dir.join("results.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

/// Median-over-seeds summary tables for one or more result directories,
/// rendered as Markdown.
pub fn report(results: &[ExperimentResults]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "# Experiment {}\n\n",
            &r.config_hash[..r.config_hash.len().min(12)]
        ));
        let mut runs: Vec<&str> = Vec::new();
        for row in &r.rows {
            if !runs.contains(&row.run.as_str()) {
                runs.push(&row.run);
            }
        }
        out.push_str("## Accuracy (median over seeds)\n\n| run | split | overall | yesno | number | other |\n|---|---|---|---|---|---|\n");
        for run in &runs {
            for split in SplitName::ALL {
                let recs: Vec<&MetricsRecord> = r
                    .rows
                    .iter()
                    .filter(|x| x.run == *run && x.split == split)
                    .map(|x| &x.metrics)
                    .collect();
                if recs.is_empty() {
                    continue;
                }
                let col = |f: &dyn Fn(&MetricsRecord) -> f64| {
                    median(&recs.iter().map(|m| f(m)).collect::<Vec<_>>()).map_or("-".into(), pct)
                };
                let cat = |c: crate::synthdata::QuestionCategory| move |m: &MetricsRecord| m.per_category[&c].accuracy;
                out.push_str(&format!(
                    "| {run} | {split} | {} | {} | {} | {} |\n",
                    col(&|m| m.overall),
                    col(&cat(crate::synthdata::QuestionCategory::YesNo)),
                    col(&cat(crate::synthdata::QuestionCategory::Number)),
                    col(&cat(crate::synthdata::QuestionCategory::Other)),
                ));
            }
        }
        out.push_str("\n## Paired deltas (median over seeds, percentage points)\n\n| comparison | split | delta |\n|---|---|---|\n");
        let pairs = [
            ("attreg", "plain"),
            ("rand_mask", "plain"),
            ("rand_img", "plain"),
            ("end_to_end", "attreg"),
            ("pretrained+uniform", "pretrained"),
            ("plain+uniform", "plain"),
            ("attreg+uniform", "attreg"),
            ("random_predictions", "random_predictions_inverted"),
        ];
        for (a, b) in pairs {
            for split in [SplitName::ValIndomain, SplitName::TestOod] {
                if let Some(d) = median(&r.paired_deltas(a, b, split)) {
                    out.push_str(&format!("| {a} - {b} | {split} | {:+.2} |\n", 100.0 * d));
                }
            }
        }
        if !r.ignored_keys.is_empty() {
            out.push_str("\n## Ignored key objects (start -> final, per seed)\n\n| run | seed | start | final |\n|---|---|---|---|\n");
            let mut keys: Vec<(&str, u64)> = r.ignored_keys.iter().map(|p| (p.run.as_str(), p.seed)).collect();
            keys.dedup();
            for (run, seed) in keys {
                let s = r.ignored_key_series(seed, run);
                if let (Some(first), Some(last)) = (s.first(), s.last()) {
                    out.push_str(&format!("| {run} | {seed} | {:.4} | {:.4} |\n", first.1, last.1));
                }
            }
        }
        if !r.correlations.is_empty() {
            out.push_str(
                "\n## Rank vs TVD Spearman correlation\n\n| model | source | seed | rho |\n|---|---|---|---|\n",
            );
            for c in &r.correlations {
                let rho = c.spearman.map_or("-".into(), |v| format!("{v:.3}"));
                out.push_str(&format!(
                    "| {} | {} | {} | {rho} |\n",
                    c.model,
                    c.source.as_str(),
                    c.seed
                ));
            }
        }
        if !r.grid.is_empty() {
            out.push_str(
                "\n## AttReg grid (median over seeds)\n\n| axis | value | split | accuracy |\n|---|---|---|---|\n",
            );
            let mut cells: BTreeMap<(String, String, SplitName), Vec<f64>> = BTreeMap::new();
            for g in &r.grid {
                cells
                    .entry((g.axis.clone(), g.value.clone(), g.split))
                    .or_default()
                    .push(g.accuracy);
            }
            for ((axis, value, split), v) in cells {
                out.push_str(&format!(
                    "| {axis} | {value} | {split} | {} |\n",
                    median(&v).map_or("-".into(), pct)
                ));
            }
        }
        if !r.failures.is_empty() {
            out.push_str("\n## Failures\n\n");
            for f in &r.failures {
                out.push_str(&format!("- seed {} `{}`: {}\n", f.seed, f.stage, f.error));
            }
        }
        out.push('\n');
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
