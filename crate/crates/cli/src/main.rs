use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use cxrbench::commands::{self, CommandOutcome};
use cxrbench::config::ExperimentConfig;
use cxrbench::dataset::Label;
use cxrbench::model_zoo::{list_architectures, write_synthetic_weights, Architecture, WEIGHTS_ENV};
use cxrbench::synth::{write_synthetic_dataset, SynthConfig};

/// Benchmark harness for CNN pneumonia classification on chest X-rays.
#[derive(Parser, Debug)]
#[command(name = "cxrbench", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::load_with_overrides(self.config.as_deref(), &self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan the dataset, split it and write the balanced sets.
    Prepare(ConfigArgs),
    /// Train every configured architecture.
    Train(ConfigArgs),
    /// Score the trained checkpoints on the validation split.
    Evaluate(ConfigArgs),
    /// Plots and the results table from existing artifacts.
    Report(ConfigArgs),
    /// Metrics from confusion counts, or the published table recomputed.
    MetricsFromCounts(CountsArgs),
    /// Write the default config to a file or stdout.
    InitConfig {
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Write deterministic stand-in weight files for the backbones.
    SeedWeights {
        /// Target directory; defaults to the configured weights dir.
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Restrict to these architectures.
        #[arg(long = "arch")]
        architectures: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic NORMAL/PNEUMONIA image tree.
    SynthDataset {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = SynthConfig::default().normal)]
        normal: usize,
        #[arg(long, default_value_t = SynthConfig::default().pneumonia)]
        pneumonia: usize,
        #[arg(long, default_value_t = SynthConfig::default().size)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the supported architectures.
    ListModels,
}

#[derive(Args, Debug)]
struct CountsArgs {
    #[arg(long, required_unless_present = "published")]
    tp: Option<u64>,
    #[arg(long, required_unless_present = "published")]
    tn: Option<u64>,
    #[arg(long = "fn", required_unless_present = "published")]
    fn_: Option<u64>,
    #[arg(long, required_unless_present = "published")]
    fp: Option<u64>,
    /// Class counted as positive.
    #[arg(long, default_value = "Pneumonia")]
    positive: String,
    /// Recompute every row of the published results table instead.
    #[arg(long, conflicts_with_all = ["tp", "tn", "fn_", "fp"])]
    published: bool,
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn report_outcome(what: &str, outcome: &CommandOutcome) -> Result<()> {
    for arch in &outcome.completed {
        info!("{what} {arch}: done");
    }
    for (arch, err) in &outcome.failed {
        eprintln!("{what} {arch}: FAILED: {err}");
    }
    if !outcome.is_success() {
        bail!("{} of {} architectures failed", outcome.failed.len(), outcome.failed.len() + outcome.completed.len());
    }
    Ok(())
}

fn metrics_from_counts(args: &CountsArgs) -> Result<()> {
    if args.published {
        let (table, cells) = commands::published_table_check();
        if args.json {
            println!("{}", serde_json::to_string_pretty(&cells)?);
            return Ok(());
        }
        print!("{}", table.render_text());
        let worst = cells
            .iter()
            .filter(|c| !c.erratum)
            .map(|c| c.difference.abs())
            .fold(0.0, f64::max);
        println!("\nlargest deviation from published cells: {worst:.2}");
        for c in cells.iter().filter(|c| c.erratum) {
            println!(
                "known erratum: {} {:?} published {:.2}, recomputed {:.2}",
                c.model, c.metric, c.published, c.computed
            );
        }
        return Ok(());
    }
    let positive: Label = args.positive.parse()?;
    let (tp, tn, fn_, fp) = (
        args.tp.unwrap_or_default(),
        args.tn.unwrap_or_default(),
        args.fn_.unwrap_or_default(),
        args.fp.unwrap_or_default(),
    );
    if tp + tn + fn_ + fp == 0 {
        bail!("all counts are zero");
    }
    let report = commands::metrics_from_counts(tp, tn, fn_, fp, positive);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("positive class: {positive}");
        println!("TP {tp}  TN {tn}  FN {fn_}  FP {fp}");
        println!("accuracy     {:6.2}", report.accuracy);
        println!("sensitivity  {:6.2}", report.sensitivity);
        println!("specificity  {:6.2}", report.specificity);
        println!("precision    {:6.2}", report.precision);
        println!("F1 score     {:6.2}", report.f1);
        for flag in &report.flags {
            println!("warning: {:?}: {}", flag.metric, flag.reason);
        }
    }
    Ok(())
}

fn seed_weights(dir: Option<&Path>, archs: &[String], seed: u64, config: &ConfigArgs) -> Result<()> {
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => config.load()?.weights_dir(),
    };
    let archs: Vec<Architecture> = if archs.is_empty() {
        Architecture::ALL.into_iter().filter(|a| a.is_pretrained_backbone()).collect()
    } else {
        archs.iter().map(|s| s.parse()).collect::<cxrbench::Result<_>>()?
    };
    for arch in archs {
        if !arch.is_pretrained_backbone() {
            info!("{arch} has no pretrained backbone, skipped");
            continue;
        }
        let path = write_synthetic_weights(arch, &dir, seed)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(args) => {
            let cfg = args.load()?;
            let s = commands::cmd_prepare(&cfg)?;
            println!(
                "scanned {} images ({} skipped); train {:?}, validation {:?}",
                s.scanned, s.skipped, s.train_balanced, s.validation_balanced
            );
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let outcome = commands::cmd_train(&cfg)?;
            report_outcome("train", &outcome)?;
        }
        Command::Evaluate(args) => {
            let cfg = args.load()?;
            let (outcome, summaries) = commands::cmd_evaluate(&cfg)?;
            for s in &summaries {
                let m = &s.mean_metrics;
                println!(
                    "{:<20} acc {:6.2}  sens {:6.2}  spec {:6.2}  prec {:6.2}  f1 {:6.2}",
                    s.architecture.name(),
                    m.accuracy,
                    m.sensitivity,
                    m.specificity,
                    m.precision,
                    m.f1
                );
            }
            report_outcome("evaluate", &outcome)?;
        }
        Command::Report(args) => {
            let cfg = args.load()?;
            let summary = commands::cmd_report(&cfg)?;
            print!("{}", summary.table.render_text());
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            info!("{} report files written", summary.files.len());
        }
        Command::MetricsFromCounts(args) => metrics_from_counts(&args)?,
        Command::InitConfig { output } => {
            let text = ExperimentConfig::default().to_toml_string()?;
            match output {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
        }
        Command::SeedWeights {
            dir,
            architectures,
            seed,
            config,
        } => seed_weights(dir.as_deref(), &architectures, seed, &config)?,
        Command::SynthDataset {
            root,
            normal,
            pneumonia,
            size,
            seed,
        } => {
            let files = write_synthetic_dataset(
                &root,
                &SynthConfig {
                    normal,
                    pneumonia,
                    size,
                    seed,
                },
            )?;
            println!("{} images under {}", files.len(), root.display());
        }
        Command::ListModels => {
            for spec in list_architectures() {
                println!(
                    "{:<20} input {:>3}  pretrained {}",
                    spec.name.name(),
                    spec.input_size,
                    spec.pretrained
                );
            }
            println!("weight files are read from ${WEIGHTS_ENV} or the user cache dir");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
