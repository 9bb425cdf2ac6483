//! Command-line entry point: train / eval / infer / visualize / selftest
//! over JSON run configs. All reports are JSON; all images are PPM/PGM.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hierseg::config::RunConfig;
use hierseg::runner;

#[derive(Parser)]
#[command(name = "hierseg", version, about = "Hierarchical-clustering image segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON run config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's head kind (`per-pixel` or `mask-query`).
    #[arg(long)]
    head: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json, metrics.jsonl, eval.json.
    Train(CommonArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segment one PPM image with a checkpoint.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image (binary P6).
        #[arg(long)]
        input: PathBuf,
    },
    /// Write per-level boundary/leakage overlays and the prediction image.
    Visualize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation-sample index to visualize.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated level list, or `all`.
        #[arg(long, default_value = "all")]
        levels: String,
    },
    /// Run the built-in oracle/invariant suite.
    Selftest,
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(head) = &common.head {
        cfg.head.kind = head.clone();
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn parse_levels(s: &str, max_levels: usize) -> Result<Option<Vec<usize>>> {
    if s == "all" {
        return Ok(None);
    }
    let mut levels = Vec::new();
    for part in s.split(',') {
        let v: usize = part.trim().parse().with_context(|| format!("bad level '{part}'"))?;
        if v >= max_levels {
            bail!("level {v} out of range (model has {max_levels} levels)");
        }
        levels.push(v);
    }
    Ok(Some(levels))
}

fn verbosity() -> u8 {
    match std::env::var("HIERSEG_LOG").as_deref() {
        Ok("quiet") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let verbose = verbosity();
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            let run = runner::train_run(&cfg).context("training failed")?;
            if verbose > 0 {
                for record in &run.report.records {
                    eprintln!("{record}");
                }
                eprintln!(
                    "trained {} steps; mIoU {:.4}; checkpoint {}",
                    run.report.steps_run,
                    run.final_eval.miou.mean_iou,
                    run.checkpoint_path.display()
                );
            }
            println!("{}", serde_json::to_string_pretty(&run.final_eval.to_json())?);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let doc = runner::eval_run(&cfg, &checkpoint).context("evaluation failed")?;
            println!("{}", serde_json::to_string_pretty(&doc)?);
        }
        Command::Infer { common, checkpoint, input } => {
            let cfg = load_config(&common)?;
            let written = runner::infer_run(&cfg, &checkpoint, &input).context("inference failed")?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Visualize { common, checkpoint, index, levels } => {
            let cfg = load_config(&common)?;
            let filter = parse_levels(&levels, cfg.backbone.hierarchical_level)?;
            let written = runner::visualize_run(&cfg, &checkpoint, index, filter.as_deref())
                .context("visualization failed")?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Selftest => {
            let results = hierseg::selftest::run_all();
            let mut all_ok = true;
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_ok &= r.passed;
            }
            if !all_ok {
                bail!("selftest failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
