//! `simplr`: train, evaluate, gradient-check, ablate and profile the toy
//! scale-aware detector.
//!
//! Exit codes: 0 success, 1 a failed check or runtime error, 2 bad usage
//! or configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use simplr::data::{export_scenes, generate_scenes, import_dataset, SceneRecord};
use simplr::harness::ablate::{run_ablation, write_ablation, Grid};
use simplr::harness::gradcheck::{registry, run_checks, write_rows, Scope, TOLERANCE};
use simplr::harness::metrics::evaluate_model;
use simplr::harness::profile::{plot_script, scale_profile, write_profile};
use simplr::harness::train::{moving_average_ends, train, StepLog};
use simplr::harness::RunConfig;
use simplr::model::{load_checkpoint, Model};
use simplr::objective::Task;
use simplr::textconf::KeyValues;

#[derive(Parser)]
#[command(
    name = "simplr",
    version,
    about = "Scale-aware sparse attention toy detector"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// `key = value` run config; unset keys keep the femto defaults
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic scenes, then evaluate on the held-out set
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// dataset file from `export-data`; defaults to the config's eval seeds
        #[arg(long)]
        data: Option<PathBuf>,
        /// refuse checkpoints trained for another task
        #[arg(long)]
        task: Option<String>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one cell per value of a config axis
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `mechanism`, `m`, `s`, `lambda` or `feature_scale`, optionally `=v1,v2,...`
        #[arg(long)]
        grid: String,
    },
    /// Per-size histograms of adaptive scale weights
    ScaleProfile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write synthetic scenes to a dataset file
    ExportData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["train", "eval"], default_value = "eval")]
        split: String,
    },
}

/// Errors that mean "you asked for something invalid" rather than "it ran
/// and failed".
fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<simplr::Error>(),
            Some(simplr::Error::Config(_))
        )
    })
}

fn main() -> ExitCode {
    simplr::parallel::init_from_env();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_usage(&e) { 2 } else { 1 })
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv(&KeyValues::parse(&text)?)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(n) = c.steps {
        cfg.steps = n;
        cfg.warmup = cfg.warmup.min(n.saturating_sub(1));
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(step: &StepLog, total: usize) {
    if step.step.is_multiple_of(50) || step.step + 1 == total {
        eprintln!(
            "step {:>5}/{total}  loss {:.4}  lr {:.2e}  |g| {:.3}",
            step.step, step.total, step.lr, step.grad_norm
        );
    }
}

fn eval_scenes(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<SceneRecord>> {
    Ok(match data {
        Some(p) => import_dataset(p).with_context(|| format!("reading dataset {}", p.display()))?,
        None => generate_scenes(&cfg.eval_seeds(), &cfg.scenes)?,
    })
}

fn write_file(path: &Path, f: impl FnOnce(std::fs::File) -> simplr::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let file =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f(file)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let scenes = generate_scenes(&cfg.train_seeds(), &cfg.scenes)?;
            let total = cfg.steps;
            let outcome = train(
                &cfg,
                &scenes,
                Some(&cfg.out_dir),
                &mut |s: &StepLog, _: &mut Model| {
                    progress(s, total);
                    true
                },
            )?;
            if let Some((start, end)) = moving_average_ends(&outcome.log, 20) {
                eprintln!("20-step mean loss: first {start:.4}, last {end:.4}");
            }
            let mut report = evaluate_model(&outcome.model, &eval_scenes(&cfg, None)?)?;
            report.final_loss = outcome.log.last().map(|s| s.total);
            write_file(&cfg.out_dir.join("metrics.csv"), |f| report.write_csv(f))?;
            println!("ap50 {:.4}  ap75 {:.4}", report.ap50, report.ap75);
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            task,
        } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            if let Some(t) = task {
                let t = Task::parse(&t)?;
                if t != model.config.task {
                    bail!(
                        "checkpoint was trained for {}, not {}",
                        model.config.task.name(),
                        t.name()
                    );
                }
            }
            let report = evaluate_model(&model, &eval_scenes(&cfg, data.as_deref())?)?;
            write_file(&cfg.out_dir.join("metrics.csv"), |f| report.write_csv(f))?;
            report.write_csv(std::io::stdout())?;
            Ok(true)
        }
        Command::Gradcheck { scope, out } => {
            let scope = Scope::parse(&scope)?;
            let rows = run_checks(&registry(), scope, TOLERANCE);
            write_rows(&rows, std::io::stdout())?;
            if let Some(dir) = out {
                write_file(&dir.join("gradcheck.csv"), |f| write_rows(&rows, f))?;
            }
            let failed = rows.iter().filter(|r| !r.passed).count();
            eprintln!("{} checks, {failed} failed", rows.len());
            Ok(failed == 0)
        }
        Command::Ablate { common, grid } => {
            let cfg = load_config(&common)?;
            let grid = Grid::parse(&grid)?;
            let train_scenes = generate_scenes(&cfg.train_seeds(), &cfg.scenes)?;
            let eval = eval_scenes(&cfg, None)?;
            let total = cfg.steps;
            let rows = run_ablation(
                &cfg,
                &grid,
                &train_scenes,
                &eval,
                &mut |axis, value, step| match step {
                    Some(s) if s.step % 100 == 0 || s.step + 1 == total => {
                        eprintln!(
                            "[{axis}={value}] step {:>5}/{total}  loss {:.4}",
                            s.step, s.total
                        )
                    }
                    None => eprintln!("[{axis}={value}] skipped"),
                    _ => {}
                },
            )?;
            write_file(
                &cfg.out_dir.join(format!("ablation_{}.csv", grid.axis())),
                |f| write_ablation(&rows, f),
            )?;
            write_ablation(&rows, std::io::stdout())?;
            Ok(true)
        }
        Command::ScaleProfile {
            common,
            checkpoint,
            data,
        } => {
            let cfg = load_config(&common)?;
            let model = load_checkpoint(&checkpoint)?;
            let profile = scale_profile(&model, &eval_scenes(&cfg, data.as_deref())?)?;
            write_file(&cfg.out_dir.join("scale_profile.csv"), |f| {
                write_profile(&profile, f)
            })?;
            write_file(&cfg.out_dir.join("plot_scale_profile.py"), |mut f| {
                use std::io::Write;
                f.write_all(plot_script("scale_profile.csv").as_bytes())?;
                Ok(())
            })?;
            write_profile(&profile, std::io::stdout())?;
            match profile.small_prefers_smallest() {
                Some(true) => eprintln!("small objects favour the smallest anchor"),
                Some(false) => eprintln!(
                    "note: small objects favour anchor {} rather than the smallest",
                    profile.row(simplr::data::SizeBucket::Small).modal_anchor()
                ),
                None => eprintln!("note: no small objects were matched"),
            }
            Ok(true)
        }
        Command::ExportData { common, split } => {
            let cfg = load_config(&common)?;
            let seeds = if split == "train" {
                cfg.train_seeds()
            } else {
                cfg.eval_seeds()
            };
            let scenes = generate_scenes(&seeds, &cfg.scenes)?;
            let path = cfg.out_dir.join(format!("{split}.splr"));
            std::fs::create_dir_all(&cfg.out_dir)?;
            export_scenes(&scenes, &path)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), path.display());
            Ok(true)
        }
    }
}
