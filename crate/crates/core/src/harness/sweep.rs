//! Hyperparameter sweeps: one full run (teacher reused per seed) per value
//! per seed, with per-child output directories and an aggregate table
//! mirroring the ablation layout.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::evaluate::{evaluate, write_report_files};
use crate::harness::train::{
    distill_train, resolve_benchmark, train_teacher, write_resolved_config, DistillOutcome,
};
use crate::losses::DistanceMetric;

/// Which hyperparameter the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Projection-head mix ratio.
    Alpha,
    /// Feature margin: degrees under the cosine metric, raw distance under
    /// squared-l2-mean.
    Margin,
    /// Classifier-level logit l2 weight.
    Beta,
    /// Quality weighting sensitivity.
    QualityH,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "margin" => Ok(SweepAxis::Margin),
            "beta" => Ok(SweepAxis::Beta),
            "h" => Ok(SweepAxis::QualityH),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?}; expected alpha|margin|beta|h"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Margin => "margin",
            SweepAxis::Beta => "beta",
            SweepAxis::QualityH => "h",
        }
    }

    pub fn apply(&self, cfg: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = cfg.clone();
        match self {
            SweepAxis::Alpha => cfg.distill.alpha = value,
            SweepAxis::Margin => match cfg.distill.metric {
                DistanceMetric::Cosine => cfg.distill.margin_deg = value,
                DistanceMetric::SqL2Mean => cfg.distill.margin_sq = value,
            },
            SweepAxis::Beta => cfg.distill.beta = value,
            SweepAxis::QualityH => cfg.distill.quality.h = value,
        }
        cfg
    }
}

/// One child run's headline metrics, or its failure.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub eer: f64,
    pub min_dcf: f64,
    pub accuracy: f64,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub failures: usize,
}

/// Runs the sweep grid. Child failures are recorded and the sweep continues;
/// teacher pretraining is shared across values within one seed since no
/// sweep axis touches the teacher.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<SweepOutcome> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Usage("sweep needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(values.len() * seeds.len());
    let mut failures = 0usize;

    for &seed in seeds {
        let seed_cfg = base.with_seed(seed);
        let benchmark = resolve_benchmark(&seed_cfg)?;
        let teacher = train_teacher(&seed_cfg, &benchmark)?;
        for &value in values {
            let cfg = axis.apply(&seed_cfg, value);
            let child = out_dir.join(format!("{}_{value}_seed_{seed}", axis.name()));
            let result = (|| -> Result<SweepRow> {
                std::fs::create_dir_all(&child)?;
                write_resolved_config(&cfg, &child)?;
                let run = match distill_train(&cfg, &benchmark, &teacher.checkpoint)? {
                    DistillOutcome::Completed(run) => run,
                    DistillOutcome::AbortedNumeric { diagnostic, .. } => {
                        return Err(Error::Numeric {
                            node: 0,
                            op: "distill_train",
                            message: diagnostic,
                        })
                    }
                };
                let mut log = std::fs::File::create(child.join("run.jsonl"))?;
                for e in &run.epochs {
                    let mut line = serde_json::to_value(e)?;
                    line.as_object_mut()
                        .expect("epoch record is an object")
                        .insert("event".into(), "epoch".into());
                    writeln!(log, "{}", serde_json::to_string(&line)?)?;
                }
                drop(log);
                let report = evaluate(&cfg, &benchmark, &run.bundle, run.epochs)?;
                write_report_files(&report, &cfg, &child)?;
                Ok(SweepRow {
                    value,
                    seed,
                    eer: report.eer,
                    min_dcf: report.min_dcf,
                    accuracy: report.accuracy,
                    error: None,
                })
            })();
            match result {
                Ok(row) => rows.push(row),
                Err(e) => {
                    failures += 1;
                    rows.push(SweepRow {
                        value,
                        seed,
                        eer: f64::NAN,
                        min_dcf: f64::NAN,
                        accuracy: f64::NAN,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
    }

    let csv_path = out_dir.join("sweep.csv");
    write_sweep_csv(&csv_path, axis, values, seeds, &rows)?;
    Ok(SweepOutcome {
        rows,
        csv_path,
        failures,
    })
}

fn write_sweep_csv(
    path: &Path,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    rows: &[SweepRow],
) -> Result<()> {
    let mut csv = String::new();
    csv.push_str(&format!("{},metric,mean", axis.name()));
    for s in seeds {
        csv.push_str(&format!(",seed_{s}"));
    }
    csv.push('\n');
    for &value in values {
        for (metric, get) in [
            ("eer", &(|r: &SweepRow| r.eer) as &dyn Fn(&SweepRow) -> f64),
            ("min_dcf", &|r: &SweepRow| r.min_dcf),
            ("accuracy", &|r: &SweepRow| r.accuracy),
        ] {
            let per_seed: Vec<f64> = seeds
                .iter()
                .map(|&s| {
                    rows.iter()
                        .find(|r| r.seed == s && r.value == value)
                        .map(get)
                        .unwrap_or(f64::NAN)
                })
                .collect();
            let finite: Vec<f64> = per_seed.iter().cloned().filter(|v| v.is_finite()).collect();
            let mean = if finite.is_empty() {
                f64::NAN
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            };
            csv.push_str(&format!("{value},{metric},{mean}"));
            for v in &per_seed {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
    }
    std::fs::write(path, csv)?;
    Ok(())
}
