//! Command-line entry point.
//!
//! One binary, six verbs. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or config error. All state flows through flags and config
//! files; environment variables are never consulted. Every verb that
//! trains writes its effective config snapshot before the first step.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, DistillConfig, Precision};
use crate::evalkit::{self, MatrixReport};
use crate::tasks::{write_splits, TaskKind};
use crate::trainer::{data_spec_for, read_run, Pipeline, RunRecord};
use crate::verify::{all_pass, run_all_checks};

#[derive(Parser)]
#[command(
    name = "gated-distill",
    about = "Confidence-gated knowledge distillation on synthetic reasoning tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    verb: VerbCmd,
}

#[derive(Subcommand)]
enum VerbCmd {
    /// Generate dataset splits (train/val/test.jsonl) for a task.
    GenData {
        /// Task name: last_letter or shuffled_objects.
        #[arg(long)]
        task: Option<String>,
        /// Dataset seed (alias for the data_seed config key).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value settings applied after the config file.
        #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory the splits are written into.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a student against the frozen teacher, one run per seed.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Run the ablation grid (full vs. removed ingredients).
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated tasks; defaults to both.
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Compare the four gating strategies under one shared config.
    CompareGating {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        tasks: Option<String>,
        #[arg(long, default_value = "gating")]
        out: PathBuf,
    },
    /// Print gate and confidence trajectories of a completed run.
    GateStats {
        /// Run directory containing metrics.csv and run.json.
        run_dir: PathBuf,
    },
    /// Run the full invariant battery.
    Verify,
}

/// Parses argv and dispatches. Returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; exit 2 on usage errors, 0 on
            // --help/--version.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.verb) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn resolve_config(
    config: Option<&Path>,
    overrides: &[String],
) -> Result<DistillConfig, CliError> {
    let mut cfg = match config {
        Some(path) => DistillConfig::from_file(path)?,
        None => DistillConfig::default(),
    };
    let refs: Vec<&str> = overrides.iter().map(|s| s.as_str()).collect();
    cfg.apply_overrides(&refs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_tasks(arg: Option<&str>) -> Result<Vec<TaskKind>, CliError> {
    match arg {
        None => Ok(vec![TaskKind::LastLetter, TaskKind::ShuffledObjects]),
        Some(list) => list
            .split(',')
            .map(|t| TaskKind::parse(t.trim()).map_err(|e| CliError::Usage(e.to_string())))
            .collect(),
    }
}

fn dispatch(verb: VerbCmd) -> Result<i32, CliError> {
    match verb {
        VerbCmd::GenData {
            task,
            seed,
            config,
            overrides,
            out,
        } => {
            let mut cfg = resolve_config(config.as_deref(), &overrides)?;
            if let Some(t) = task {
                cfg.set("task", &t)?;
            }
            if let Some(s) = seed {
                cfg.set("data_seed", &s.to_string())?;
            }
            let splits = crate::tasks::gen_dataset(&data_spec_for(&cfg)).map_err(runtime)?;
            fs::create_dir_all(&out).map_err(runtime)?;
            fs::write(out.join("config.snapshot"), cfg.snapshot()).map_err(runtime)?;
            write_splits(&out, &splits).map_err(runtime)?;
            println!(
                "wrote {} train / {} val / {} test {} examples to {}",
                splits.train.len(),
                splits.val.len(),
                splits.test.len(),
                cfg.task.name(),
                out.display()
            );
            Ok(0)
        }
        VerbCmd::Distill {
            config,
            overrides,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            fs::create_dir_all(&out).map_err(runtime)?;
            fs::write(out.join("config.snapshot"), cfg.snapshot()).map_err(runtime)?;
            let cache = out.join("teacher");
            let records = match cfg.precision {
                Precision::F32 => Pipeline::<f32>::prepare(&cfg, Some(&cache))
                    .map_err(runtime)?
                    .train_all(Some(&out))
                    .map_err(runtime)?,
                Precision::F64 => Pipeline::<f64>::prepare(&cfg, Some(&cache))
                    .map_err(runtime)?
                    .train_all(Some(&out))
                    .map_err(runtime)?,
            };
            print_runs(&records);
            Ok(0)
        }
        VerbCmd::Ablate {
            config,
            overrides,
            tasks,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            let tasks = parse_tasks(tasks.as_deref())?;
            fs::create_dir_all(&out).map_err(runtime)?;
            fs::write(out.join("config.snapshot"), cfg.snapshot()).map_err(runtime)?;
            let cache = out.join("cache");
            let report =
                evalkit::run_ablation(&cfg, &tasks, Some(&out), Some(&cache)).map_err(runtime)?;
            finish_matrix(report, &out)
        }
        VerbCmd::CompareGating {
            config,
            overrides,
            tasks,
            out,
        } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            let tasks = parse_tasks(tasks.as_deref())?;
            fs::create_dir_all(&out).map_err(runtime)?;
            fs::write(out.join("config.snapshot"), cfg.snapshot()).map_err(runtime)?;
            let cache = out.join("cache");
            let report = evalkit::run_gating_comparison(&cfg, &tasks, Some(&out), Some(&cache))
                .map_err(runtime)?;
            finish_matrix(report, &out)
        }
        VerbCmd::GateStats { run_dir } => {
            let record = read_run(&run_dir).map_err(runtime)?;
            print_gate_stats(&record);
            Ok(0)
        }
        VerbCmd::Verify => {
            let outcomes = run_all_checks();
            for o in &outcomes {
                let mark = if o.passed { "PASS" } else { "FAIL" };
                println!("[{mark}] {:<28} {:>6} ms  {}", o.name, o.millis, o.detail);
            }
            let passed = outcomes.iter().filter(|o| o.passed).count();
            println!("{passed}/{} checks passed", outcomes.len());
            Ok(if all_pass(&outcomes) { 0 } else { 1 })
        }
    }
}

fn print_runs(records: &[RunRecord]) {
    for r in records {
        println!(
            "seed {}: best val {:.4} (epoch {}), test {:.4}",
            r.seed, r.best_val_accuracy, r.best_epoch, r.final_test_accuracy
        );
    }
    let accs: Vec<f64> = records.iter().map(|r| r.final_test_accuracy).collect();
    let (mean, std) = evalkit::mean_std(&accs);
    println!("test accuracy over {} seeds: {mean:.4} \u{00b1} {std:.4}", accs.len());
}

fn finish_matrix(report: MatrixReport, out: &Path) -> Result<i32, CliError> {
    if !report.rows.is_empty() {
        evalkit::emit_report(&report.rows, out).map_err(runtime)?;
        let txt = fs::read_to_string(out.join("report.txt")).map_err(runtime)?;
        print!("{txt}");
    }
    if report.failures.is_empty() {
        Ok(0)
    } else {
        for (variant, task, err) in &report.failures {
            eprintln!("error: variant {variant} on {}: {err}", task.name());
        }
        Err(CliError::Runtime(format!(
            "{} of {} cells failed",
            report.failures.len(),
            report.failures.len() + report.rows.len()
        )))
    }
}

fn print_gate_stats(record: &RunRecord) {
    println!(
        "run: seed {}, task {}, dtype {}, best epoch {}",
        record.seed,
        record.task.name(),
        record.dtype,
        record.best_epoch
    );
    println!(
        "{:<6} {:>8} {:>12} {:>16} {:>12} {:>16}",
        "epoch", "val_acc", "open(clean)", "open(corrupted)", "conf(clean)", "conf(corrupted)"
    );
    for e in &record.epochs {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        println!(
            "{:<6} {:>8.4} {:>12.4} {:>16} {:>12.4} {:>16}",
            e.epoch,
            e.val_accuracy,
            e.clean_gate_open_rate,
            fmt_opt(e.corrupted_gate_open_rate),
            e.clean_mean_confidence,
            fmt_opt(e.corrupted_mean_confidence)
        );
    }
    if record.epochs.iter().all(|e| e.corrupted_gate_open_rate.is_none()) {
        println!("corrupted split: empty (no corrupted examples in the teacher channel)");
    }
    let steps = &record.steps;
    if !steps.is_empty() {
        let first = &steps[0];
        let last = &steps[steps.len() - 1];
        println!(
            "gate-open fraction per step: {:.4} (first) -> {:.4} (last) over {} steps",
            first.gate_open_fraction,
            last.gate_open_fraction,
            steps.len()
        );
        println!(
            "mean confidence per step: {:.4} (first) -> {:.4} (last)",
            first.mean_confidence, last.mean_confidence
        );
    }
}
