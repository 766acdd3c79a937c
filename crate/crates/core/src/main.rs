use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use attreg::attreg::RegConfig;
use attreg::error::{Error, Result};
use attreg::faitheval::{self, GroundingSource};
use attreg::harness::{
    self, evaluate_with, read_results, report, run_baseline, run_experiment, split_path, BaselineKind,
    ExperimentConfig, KEEP_INTERVALS,
};
use attreg::model::{load_checkpoint, save_checkpoint, AttentionMode};
use attreg::synthdata::{generate_benchmark, read_split, write_split, DatasetSplit, SplitName};
use attreg::train::Regime;

#[derive(Parser)]
#[command(
    name = "attreg",
    version,
    about = "Attention-regularized VQA on a synthetic changing-priors benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train / val_indomain / test_ood splits as JSON lines.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train from scratch with the plain loss, keeping the best val epoch.
    Pretrain {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint_out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Finetune a checkpoint with the plain loss, AttReg or a control regime.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test_ood")]
        split: String,
        /// Replace the attention module with uniform weights.
        #[arg(long)]
        uniform_attention: bool,
    },
    /// Score a non-training baseline on one split.
    Baseline {
        #[arg(long)]
        kind: String,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "test_ood")]
        split: String,
        /// Required by top_ans_masked.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Faithfulness protocols on a checkpoint.
    Faitheval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, default_value = "val_indomain")]
        split: String,
        #[arg(long, default_value = "attention")]
        source: String,
        #[arg(long, value_enum, default_value_t = FaithMode::KeepInterval)]
        mode: FaithMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use only the first N instances of the split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run a full experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge experiment directories into Markdown summary tables.
    Report {
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaithMode {
    KeepInterval,
    Tvd,
    IgnoredKeys,
}

#[derive(Args)]
struct DataArg {
    /// Directory written by `synth-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML; only its data, model and train sections are used here.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Plain,
    Attreg,
    RandMask,
    RandImg,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint_in: PathBuf,
    #[arg(long)]
    checkpoint_out: PathBuf,
    /// Shorthand for `--regime attreg`.
    #[arg(long)]
    attreg: bool,
    #[arg(long, value_enum)]
    regime: Option<RegimeArg>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    ignored_pct: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    start_epoch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch statistics as JSON.
    #[arg(long)]
    log_out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArg,
}

fn split_arg(s: &str) -> Result<SplitName> {
    SplitName::parse(s).ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
}

fn load(dir: &Path, name: SplitName) -> Result<DatasetSplit> {
    read_split(&split_path(dir, name))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let config = a.config.load()?;
    let train = load(&a.data.data, SplitName::Train)?;
    let pretrained = load_checkpoint(&a.checkpoint_in)?;
    let mut reg = RegConfig {
        start_epoch: config.train.pretrain_epochs,
        ..config.reg.clone()
    };
    reg.sigma = a.sigma.unwrap_or(reg.sigma);
    reg.top_m = a.top_m.unwrap_or(reg.top_m);
    reg.ignored_pct = a.ignored_pct.unwrap_or(reg.ignored_pct);
    reg.lambda = a.lambda.unwrap_or(reg.lambda);
    reg.start_epoch = a.start_epoch.unwrap_or(reg.start_epoch);
    reg.validate()?;
    let kind = match (a.attreg, a.regime) {
        (true, Some(r)) if !matches!(r, RegimeArg::Attreg) => {
            return Err(Error::Config("--attreg conflicts with --regime".into()))
        }
        (true, _) => RegimeArg::Attreg,
        (false, r) => r.unwrap_or(RegimeArg::Plain),
    };
    let regime = match kind {
        RegimeArg::Plain => Regime::Plain,
        RegimeArg::Attreg => Regime::AttReg(reg.clone()),
        RegimeArg::RandMask => Regime::RandMask {
            max_masked: reg.top_m,
            lambda: reg.lambda,
        },
        RegimeArg::RandImg => Regime::RandImg { lambda: reg.lambda },
    };
    let (model, log) = harness::finetune(&pretrained, &train, regime, &config.train, Some(&reg), a.seed)?;
    save_checkpoint(&a.checkpoint_out, &model)?;
    if let Some(p) = a.log_out {
        std::fs::write(&p, serde_json::to_vec_pretty(&log)?).map_err(|e| Error::io(&p, e))?;
    }
    for e in &log.epochs {
        eprintln!(
            "epoch {} l_vqa {:.5} curated {} ignored_keys {}",
            e.epoch,
            e.l_vqa,
            e.curated,
            e.mean_ignored_key_count.map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { out, seed, config } => {
            let config = config.load()?;
            let bench = generate_benchmark(&config.data, seed)?;
            for w in &bench.warnings {
                eprintln!("warning: {w}");
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            for name in SplitName::ALL {
                write_split(&split_path(&out, name), bench.split(name))?;
            }
            Ok(())
        }
        Command::Pretrain {
            data,
            checkpoint_out,
            seed,
            config,
        } => {
            let config = config.load()?;
            let train = load(&data.data, SplitName::Train)?;
            let val = load(&data.data, SplitName::ValIndomain)?;
            let pre = harness::pretrain(&config.model, &train, &val, &config.train, seed)?;
            save_checkpoint(&checkpoint_out, &pre.model)?;
            for h in &pre.history {
                eprintln!("epoch {} l_vqa {:.5} val {:.4}", h.epoch, h.l_vqa, h.val.overall);
            }
            eprintln!("selected epoch {}", pre.best_epoch);
            Ok(())
        }
        Command::Finetune(args) => finetune_cmd(args),
        Command::Eval {
            checkpoint,
            data,
            split,
            uniform_attention,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let split = load(&data.data, split_arg(&split)?)?;
            let mode = if uniform_attention {
                AttentionMode::Uniform
            } else {
                AttentionMode::Learned
            };
            print_json(&evaluate_with(&model, &split, mode)?)
        }
        Command::Baseline {
            kind,
            data,
            split,
            checkpoint,
            seed,
        } => {
            let kind = BaselineKind::parse(&kind).ok_or_else(|| Error::Config(format!("unknown baseline `{kind}`")))?;
            let train = load(&data.data, SplitName::Train)?;
            let split = load(&data.data, split_arg(&split)?)?;
            let model = checkpoint.as_deref().map(load_checkpoint).transpose()?;
            print_json(&run_baseline(kind, &train, &split, model.as_ref(), seed)?)
        }
        Command::Faitheval {
            checkpoint,
            data,
            split,
            source,
            mode,
            seed,
            limit,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let split = load(&data.data, split_arg(&split)?)?;
            let n = limit.unwrap_or(split.len()).min(split.len());
            let instances = &split.instances[..n];
            let source =
                GroundingSource::parse(&source).ok_or_else(|| Error::Config(format!("unknown source `{source}`")))?;
            match mode {
                FaithMode::KeepInterval => {
                    let rows = KEEP_INTERVALS
                        .iter()
                        .map(|&iv| faitheval::keep_interval_eval(&model, instances, iv, source, seed))
                        .collect::<Result<Vec<_>>>()?;
                    print_json(&rows)
                }
                FaithMode::Tvd => {
                    let curve = faitheval::region_tvd_curve(&model, instances, source, seed)?;
                    print_json(&serde_json::json!({
                        "curve": curve,
                        "spearman": faitheval::curve_correlation(&curve),
                    }))
                }
                FaithMode::IgnoredKeys => {
                    let v = faitheval::ignored_key_count(&model, instances, &RegConfig::default())?;
                    print_json(&serde_json::json!({ "mean_ignored_key_count": v }))
                }
            }
        }
        Command::Run { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let results = run_experiment(&config, &out)?;
            for f in &results.failures {
                eprintln!("failed: seed {} {}: {}", f.seed, f.stage, f.error);
            }
            print!("{}", report(&[results]));
            Ok(())
        }
        Command::Report { dirs, out } => {
            let all = dirs.iter().map(|d| read_results(d)).collect::<Result<Vec<_>>>()?;
            let text = report(&all);
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e)),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
