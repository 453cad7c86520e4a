//! Command surface: `build-data`, `train`, `finetune`, `evaluate`, `report`.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors (with the offending
//! key path), 1 for runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glmc::config::SourceKind;
use glmc::datasets::Split;
use glmc::eval::write_confusion_png;
use glmc::longtail::MANIFEST_FILE;
use glmc::maxnorm::finetune_classifier;
use glmc::model::checkpoint;
use glmc::report::Summary;
use glmc::trainer::{load_data, run_experiment, CONFIG_FILE, FINETUNED_CHECKPOINT, FINETUNE_FILE};
use glmc::{ClassFrequencyTable, Delta, ExperimentConfig, GlmcError, HeadMode, SubsetManifest};

#[derive(Parser, Debug)]
#[command(name = "glmc", version, about = "Long-tailed recognition with mixture consistency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config; omitted sections keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a long-tailed subset and write its manifest and index.
    BuildData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
        /// Directory of the binary release (defaults to $GLMC_DATA_ROOT).
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        imbalance_factor: Option<f64>,
        /// Head-class count; defaults to the balanced per-class count.
        #[arg(long)]
        max_count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write its run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// MaxNorm finetuning of the inference classifier of a trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Ball radius, or `auto` for the median row norm of the trained head.
        #[arg(long)]
        delta: Option<Delta>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Defaults to the `config.toml` beside the checkpoint.
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to `finetuned.safetensors` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a dataset directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A directory written by `build-data` (or a run directory).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Overrides the head recorded in the checkpoint.
        #[arg(long, value_enum)]
        head: Option<HeadArg>,
    },
    /// Tabulate several run directories into γ and k-grid summaries.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "summary")]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SourceArg {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl From<SourceArg> for SourceKind {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Cifar10 => SourceKind::Cifar10,
            SourceArg::Cifar100 => SourceKind::Cifar100,
            SourceArg::Synthetic => SourceKind::Synthetic,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum HeadArg {
    LongTail,
    Balanced,
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<GlmcError>() {
        Some(e) if e.is_config_error() => 2,
        _ => 1,
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::BuildData {
            config,
            source,
            root,
            imbalance_factor,
            max_count,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config, None)?;
            if let Some(s) = source {
                cfg.data.source = s.into();
            }
            if root.is_some() {
                cfg.data.root = root;
            }
            if let Some(f) = imbalance_factor {
                cfg.data.imbalance_factor = f;
            }
            if max_count.is_some() {
                cfg.data.max_count = max_count;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.data.subset = None;
            cfg.validate()?;
            build_data(&cfg, &out)
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config, None)?;
            train(&cfg, &out)
        }
        Command::Finetune {
            checkpoint,
            delta,
            epochs,
            config,
            out,
        } => finetune(&checkpoint, delta, epochs, &config, out),
        Command::Evaluate {
            checkpoint,
            data,
            out,
            head,
        } => evaluate(&checkpoint, &data, &out, head),
        Command::Report { runs, out } => {
            let summary = Summary::from_dirs(&runs)?;
            summary.write(&out)?;
            print!("{}", summary.markdown());
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Defaults, then `fallback_file` or `--config`, then `--set` overrides.
fn load_config(args: &ConfigArgs, fallback_file: Option<&Path>) -> Result<ExperimentConfig> {
    let path = args.config.as_deref().or(fallback_file);
    let cfg = ExperimentConfig::load(path, &args.overrides)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn build_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (data, manifest) = load_data(cfg)?;
    manifest.write(out, data.train.ids())?;
    let counts = manifest.table()?.counts().to_vec();
    println!(
        "{} samples over {} classes, counts {:?} -> {}",
        data.train.len(),
        counts.len(),
        counts,
        out.display()
    );
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let summary = run_experiment(cfg, out)?;
    let last = summary.outcome.epochs.last();
    println!(
        "trained {} epochs, final loss {:.4}",
        summary.outcome.epochs.len(),
        last.map_or(f64::NAN, |m| m.total)
    );
    if let Some(r) = &summary.report {
        println!(
            "top-1 {:.4} (many {}, medium {}, few {})",
            r.top1_overall,
            fmt_acc(r.top1_many),
            fmt_acc(r.top1_medium),
            fmt_acc(r.top1_few)
        );
    }
    println!("run directory {}", out.display());
    Ok(())
}

fn finetune(
    checkpoint_path: &Path,
    delta: Option<Delta>,
    epochs: Option<usize>,
    args: &ConfigArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    let run_dir = checkpoint_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let run_config = run_dir.join(CONFIG_FILE);
    let mut cfg = load_config(args, run_config.exists().then_some(run_config.as_path()))?;
    if let Some(d) = delta {
        cfg.finetune.delta = d;
    }
    if let Some(e) = epochs {
        cfg.finetune.epochs = e;
    }
    // train on exactly the subset the checkpoint saw
    if run_dir.join(MANIFEST_FILE).exists() {
        cfg.data.subset = Some(run_dir.clone());
    }
    cfg.validate()?;
    let (data, _) = load_data(&cfg)?;
    let (mut network, info) = checkpoint::load(checkpoint_path)?;
    let report = finetune_classifier(
        &mut network,
        &data.train,
        &cfg.finetune,
        &cfg.rebalance,
        info.inference_head,
        cfg.train.lr,
    )?;
    let out = out.unwrap_or_else(|| run_dir.join(FINETUNED_CHECKPOINT));
    checkpoint::save(&network, &info, &out)?;
    let json = out.with_file_name(FINETUNE_FILE);
    fs::write(&json, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", json.display()))?;
    println!(
        "delta {:.4}, {} steps, final loss {:.4} -> {}",
        report.delta,
        report.steps,
        report.epoch_loss.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn evaluate(checkpoint_path: &Path, data_dir: &Path, out: &Path, head: Option<HeadArg>) -> Result<()> {
    let (network, info) = checkpoint::load(checkpoint_path)?;
    let (manifest, _) = SubsetManifest::read(data_dir)?;
    let test = manifest.source.load(Split::Test)?;
    let table = ClassFrequencyTable::new(info.train_counts.clone())?;
    let mode = match head {
        Some(HeadArg::LongTail) => HeadMode::LongTail,
        Some(HeadArg::Balanced) => HeadMode::Balanced,
        None => info.inference_head,
    };
    let report = glmc::evaluate(&network, &test, &table, mode)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    report.write_json(out)?;
    write_confusion_png(&report.confusion, &out.with_extension("png"))?;
    println!(
        "top-1 {:.4} on {} samples (many {}, medium {}, few {}) -> {}",
        report.top1_overall,
        report.num_samples,
        fmt_acc(report.top1_many),
        fmt_acc(report.top1_medium),
        fmt_acc(report.top1_few),
        out.display()
    );
    Ok(())
}

fn fmt_acc(a: Option<f64>) -> String {
    a.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}
