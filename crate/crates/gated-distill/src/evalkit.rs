//! Experiment harness: named config variants, the ablation grid, the
//! gating-strategy comparison, and summary reports.
//!
//! A variant is a named list of config overrides applied to a shared base,
//! so the difference between any two runs is auditable by diffing their
//! snapshots. Teachers are cached per task and reused across variants;
//! every variant of a task therefore distills from the same frozen
//! teacher and the same recorded channel.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, DistillConfig, Precision};
use crate::tasks::TaskKind;
use crate::trainer::{Pipeline, RunRecord, TrainerError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report malformed: {0}")]
    BadReport(String),
    #[error("no rows to report")]
    EmptyReport,
}

/// A named delta against the base config.
#[derive(Debug, Clone)]
pub struct VariantSpec {
    pub name: String,
    pub overrides: Vec<String>,
}

impl VariantSpec {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        VariantSpec {
            name: name.into(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// The config this variant runs with.
    pub fn apply(&self, base: &DistillConfig) -> Result<DistillConfig, ConfigError> {
        let mut cfg = base.clone();
        let refs: Vec<&str> = self.overrides.iter().map(|s| s.as_str()).collect();
        cfg.apply_overrides(&refs)?;
        Ok(cfg)
    }

    /// Keys this variant is allowed to change.
    pub fn touched_keys(&self) -> Vec<&str> {
        self.overrides
            .iter()
            .filter_map(|o| o.split_once('=').map(|(k, _)| k.trim()))
            .collect()
    }
}

/// The ablation grid: the full method and one variant per removed
/// ingredient. Removing confidence gating means forcing confidence to 1
/// under the ungated strategy; removing a structural gate means forcing
/// it open while keeping the loss term.
pub fn ablation_variants() -> Vec<VariantSpec> {
    vec![
        VariantSpec::new("full", &[]),
        VariantSpec::new(
            "wo_confidence_gating",
            &["force_confidence_one=true", "gating_strategy=none"],
        ),
        VariantSpec::new("wo_hidden_gate", &["force_hidden_gate_open=true"]),
        VariantSpec::new("wo_attention_gate", &["force_attention_gate_open=true"]),
    ]
}

/// Harder ablations that remove whole loss terms rather than gates, plus
/// the classical baselines. Not part of the default grid.
pub fn extra_variants() -> Vec<VariantSpec> {
    vec![
        VariantSpec::new("wo_hidden_loss", &["lambda2=0"]),
        VariantSpec::new("wo_attention_loss", &["lambda3=0"]),
        VariantSpec::new(
            "vanilla_kd",
            &[
                "force_confidence_one=true",
                "gating_strategy=none",
                "lambda2=0",
                "lambda3=0",
            ],
        ),
        VariantSpec::new("vanilla", &["lambda1=0", "lambda2=0", "lambda3=0"]),
    ]
}

/// One variant per gating strategy, everything else shared.
pub fn gating_variants() -> Vec<VariantSpec> {
    ["none", "fixed_threshold", "sigmoid", "batch_relative"]
        .iter()
        .map(|s| VariantSpec::new(&format!("gating_{s}"), &[&format!("gating_strategy={s}")]))
        .collect()
}

/// A full experiment: variants x tasks, each trained over the base
/// config's seed list.
pub struct ExperimentMatrix {
    pub base: DistillConfig,
    pub variants: Vec<VariantSpec>,
    pub tasks: Vec<TaskKind>,
}

/// Aggregate of one (variant, task) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub task: TaskKind,
    pub seed_count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Everything a matrix run produces: summary rows for the cells that
/// trained, and the errors of those that did not.
pub struct MatrixReport {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<(String, TaskKind, Vec<RunRecord>)>,
    pub failures: Vec<(String, TaskKind, String)>,
}

/// Sample mean and standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (variant, task) cell. Run artifacts land in
/// `<out_root>/<variant>/<task>/seed<k>/`; cached teachers in
/// `<cache_root>/<task>/`. A failing cell is recorded and the rest of the
/// matrix still runs.
pub fn run_matrix(
    matrix: &ExperimentMatrix,
    out_root: Option<&Path>,
    cache_root: Option<&Path>,
) -> Result<MatrixReport, EvalError> {
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for &task in &matrix.tasks {
        let mut base = matrix.base.clone();
        base.task = task;
        for variant in &matrix.variants {
            match run_cell(&base, variant, task, out_root, cache_root) {
                Ok(runs) => {
                    let accs: Vec<f64> = runs.iter().map(|r| r.final_test_accuracy).collect();
                    let (mean, std) = mean_std(&accs);
                    rows.push(SummaryRow {
                        variant: variant.name.clone(),
                        task,
                        seed_count: accs.len(),
                        mean,
                        std,
                    });
                    records.push((variant.name.clone(), task, runs));
                }
                Err(e) => failures.push((variant.name.clone(), task, e.to_string())),
            }
        }
    }
    Ok(MatrixReport {
        rows,
        records,
        failures,
    })
}

fn run_cell(
    base: &DistillConfig,
    variant: &VariantSpec,
    task: TaskKind,
    out_root: Option<&Path>,
    cache_root: Option<&Path>,
) -> Result<Vec<RunRecord>, EvalError> {
    let cfg = variant.apply(base)?;
    // Variant isolation: nothing outside the declared overrides (and the
    // task pin) may differ from the base.
    let touched = variant.touched_keys();
    for key in base.diff_keys(&cfg) {
        if !touched.contains(&key) {
            return Err(EvalError::BadReport(format!(
                "variant {} changed undeclared key {key}",
                variant.name
            )));
        }
    }
    let cache = cache_root.map(|r| r.join(task.name()));
    let out = out_root.map(|r| r.join(&variant.name).join(task.name()));
    if let Some(dir) = &out {
        fs::create_dir_all(dir)?;
    }
    let runs = match cfg.precision {
        Precision::F32 => {
            Pipeline::<f32>::prepare(&cfg, cache.as_deref())?.train_all(out.as_deref())?
        }
        Precision::F64 => {
            Pipeline::<f64>::prepare(&cfg, cache.as_deref())?.train_all(out.as_deref())?
        }
    };
    Ok(runs)
}

/// The default ablation study over the given tasks.
pub fn run_ablation(
    base: &DistillConfig,
    tasks: &[TaskKind],
    out_root: Option<&Path>,
    cache_root: Option<&Path>,
) -> Result<MatrixReport, EvalError> {
    run_matrix(
        &ExperimentMatrix {
            base: base.clone(),
            variants: ablation_variants(),
            tasks: tasks.to_vec(),
        },
        out_root,
        cache_root,
    )
}

/// All four gating strategies under the same base config.
pub fn run_gating_comparison(
    base: &DistillConfig,
    tasks: &[TaskKind],
    out_root: Option<&Path>,
    cache_root: Option<&Path>,
) -> Result<MatrixReport, EvalError> {
    run_matrix(
        &ExperimentMatrix {
            base: base.clone(),
            variants: gating_variants(),
            tasks: tasks.to_vec(),
        },
        out_root,
        cache_root,
    )
}

pub const REPORT_HEADER: &str = "variant,task,seed_count,mean,std";

/// Writes `report.csv` and a human-readable `report.txt` into `dir`.
pub fn emit_report(rows: &[SummaryRow], dir: &Path) -> Result<(), EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    fs::create_dir_all(dir)?;
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    let mut txt = String::new();
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            r.task.name(),
            r.seed_count,
            r.mean,
            r.std
        ));
        txt.push_str(&format!(
            "{:<24} {:<18} {:.4} \u{00b1} {:.4}  ({} seeds)\n",
            r.variant,
            r.task.name(),
            r.mean,
            r.std,
            r.seed_count
        ));
    }
    fs::write(dir.join("report.csv"), csv)?;
    fs::write(dir.join("report.txt"), txt)?;
    Ok(())
}

/// Parses a `report.csv` back into rows.
pub fn parse_report_csv(text: &str) -> Result<Vec<SummaryRow>, EvalError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == REPORT_HEADER => {}
        other => {
            return Err(EvalError::BadReport(format!(
                "unexpected header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(EvalError::BadReport(format!(
                "line {} has {} fields",
                i + 2,
                f.len()
            )));
        }
        let num = |j: usize| -> Result<f64, EvalError> {
            f[j].parse()
                .map_err(|_| EvalError::BadReport(format!("bad number '{}' on line {}", f[j], i + 2)))
        };
        rows.push(SummaryRow {
            variant: f[0].to_string(),
            task: TaskKind::parse(f[1])
                .map_err(|e| EvalError::BadReport(format!("line {}: {e}", i + 2)))?,
            seed_count: f[2]
                .parse()
                .map_err(|_| EvalError::BadReport(format!("bad count on line {}", i + 2)))?,
            mean: num(3)?,
            std: num(4)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::confidence::{make_gates, GatingStrategy};

    #[test]
    fn builtin_variants_touch_only_declared_keys() {
        let base = DistillConfig::default();
        for v in ablation_variants()
            .into_iter()
            .chain(extra_variants())
            .chain(gating_variants())
        {
            let cfg = v.apply(&base).unwrap();
            let touched = v.touched_keys();
            for key in base.diff_keys(&cfg) {
                assert!(
                    touched.contains(&key),
                    "variant {} changed undeclared key {key}",
                    v.name
                );
            }
        }
    }

    #[test]
    fn steep_sigmoid_approaches_fixed_threshold() {
        let conf = [0.05f64, 0.2, 0.35, 0.49, 0.51, 0.62, 0.8, 0.97];
        let hard = make_gates(&conf, GatingStrategy::FixedThreshold, 0.5, 10.0).unwrap();
        let steep = make_gates(&conf, GatingStrategy::Sigmoid, 0.5, 1e6).unwrap();
        for (h, s) in hard.weights.iter().zip(&steep.weights) {
            assert!((h - s).abs() < 1e-3, "hard {h} vs steep sigmoid {s}");
        }
    }

    #[test]
    fn mean_std_oracle() {
        let (m, s) = mean_std(&[0.2, 0.4, 0.6]);
        assert!((m - 0.4).abs() < 1e-12);
        assert!((s - 0.2).abs() < 1e-12);
        let (m1, s1) = mean_std(&[0.7]);
        assert_eq!((m1, s1), (0.7, 0.0));
    }

    #[test]
    fn report_roundtrip() {
        let rows = vec![
            SummaryRow {
                variant: "full".into(),
                task: TaskKind::LastLetter,
                seed_count: 5,
                mean: 0.8125,
                std: 0.04321,
            },
            SummaryRow {
                variant: "wo_confidence_gating".into(),
                task: TaskKind::ShuffledObjects,
                seed_count: 5,
                mean: 0.5,
                std: 0.0,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        emit_report(&rows, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let back = parse_report_csv(&text).unwrap();
        assert_eq!(back, rows);
        let txt = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(txt.contains("0.8125 \u{00b1} 0.0432"));
    }

    #[test]
    fn tiny_matrix_runs_and_reports() {
        let mut base = DistillConfig::default();
        base.apply_overrides(&[
            "train_size=8",
            "val_size=3",
            "test_size=3",
            "num_words=2",
            "teacher_layers=1",
            "teacher_dim=8",
            "teacher_heads=1",
            "student_layers=1",
            "student_dim=8",
            "student_heads=1",
            "teacher_epochs=1",
            "max_epochs=1",
            "batch_size=4",
            "grad_accum_steps=1",
            "seeds=1",
            "max_seq_len=24",
        ])
        .unwrap();
        let out = tempfile::tempdir().unwrap();
        let cache = tempfile::tempdir().unwrap();
        let matrix = ExperimentMatrix {
            base,
            variants: vec![
                VariantSpec::new("full", &[]),
                VariantSpec::new("vanilla", &["lambda1=0", "lambda2=0", "lambda3=0"]),
            ],
            tasks: vec![TaskKind::LastLetter],
        };
        let report = run_matrix(&matrix, Some(out.path()), Some(cache.path())).unwrap();
        assert!(report.failures.is_empty(), "failures: {:?}", report.failures);
        assert_eq!(report.rows.len(), 2);
        assert!(out
            .path()
            .join("full/last_letter/seed1/metrics.csv")
            .exists());
        assert!(out
            .path()
            .join("vanilla/last_letter/seed1/run.json")
            .exists());
        assert!(cache.path().join("last_letter/manifest.json").exists());
        emit_report(&report.rows, out.path()).unwrap();
        let back =
            parse_report_csv(&fs::read_to_string(out.path().join("report.csv")).unwrap()).unwrap();
        assert_eq!(back, report.rows);
    }
}
