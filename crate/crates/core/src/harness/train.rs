//! Teacher pretraining and distillation training loops.
//!
//! One run is one execution context: batches, initialization, and evaluation
//! trials all derive from the run seed through fixed substreams, so a
//! (config, seed) pair reproduces its outputs bit-exactly. A non-finite loss
//! aborts the run loudly, handing back the last completed epoch's parameters
//! for diagnosis instead of training through corrupted state.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::data::{self, Benchmark, PairedDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::eval::{sample_trial_pairs, score_trials, EpochTrace, TrialPairs};
use crate::harness::config::{DataSource, ExperimentConfig};
use crate::losses::{
    self, classifier_level_per_pair, cross_entropy, kd_kl_per_sample, margin_feature_loss,
    total_loss, DistanceMetric, DistillConfig, DistillMode,
};
use crate::models::{self, streams, ModelBundle};
use crate::numeric::{Tape, Tensor, ValueId};
use crate::quality::{adaptive_weights, quantify_quality, QualitySource, RunningStats};

/// Loads the configured dataset directory or generates the inline synthetic
/// benchmark.
pub fn resolve_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    match &cfg.data {
        DataSource::Synthetic(spec) => data::generate(spec),
        DataSource::Path(dir) => data::load_benchmark(dir),
    }
}

/// Per-epoch teacher pretraining diagnostics.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TeacherEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// A pretrained, frozen teacher: its parameters and training log.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    /// `teacher.*` and `teacher_head.*` parameters only.
    pub checkpoint: Vec<(String, Tensor)>,
    pub epochs: Vec<TeacherEpoch>,
    pub val_accuracy: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains the teacher encoder plus its pretraining head on the teacher-only
/// split, then freezes both. The weak-teacher preset trains the same recipe
/// on a fraction of the split.
pub fn train_teacher(cfg: &ExperimentConfig, benchmark: &Benchmark) -> Result<TeacherRun> {
    cfg.validate()?;
    let split = benchmark
        .teacher_pretrain
        .subsample_fraction(cfg.teacher.data_fraction, cfg.seed)?;
    if split.is_empty() {
        return Err(Error::Config("teacher pretraining split is empty".into()));
    }
    let model_cfg = cfg.model_config(&split.spec);
    let mut bundle = ModelBundle::init(model_cfg, cfg.seed)?;
    // Only the teacher trains here; everything else is rebuilt fresh by the
    // distillation stage.
    bundle.params.freeze_prefix("proj.");
    bundle.params.freeze_prefix("student.");
    bundle.params.freeze_prefix("classifier.");

    let mut optimizer = cfg.teacher.optimizer.build()?;
    let mut epochs = Vec::with_capacity(cfg.teacher.epochs);
    for epoch in 0..cfg.teacher.epochs {
        optimizer.set_learning_rate(cfg.teacher.optimizer.lr_at_epoch(epoch));
        let batches = data::make_batches(&split, &cfg.teacher.batch, epoch_seed(cfg.seed, epoch))?;
        if batches.is_empty() {
            return Err(Error::Config(
                "teacher batch spec yields no complete batches".into(),
            ));
        }
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for batch in &batches {
            let x = split.teacher_batch(batch)?;
            let y = split.batch_labels(batch);
            let mut tape = Tape::new();
            let xi = tape.input(&x);
            let e_t = bundle.encode_teacher_on_tape(&mut tape, xi)?;
            let logits = bundle.teacher_head(&mut tape, e_t)?;
            let loss = cross_entropy(&mut tape, logits, &y)?;
            loss_sum += tape.value(loss).item()?;
            acc_sum += eval::classification_accuracy(tape.value(logits), &y);
            tape.backward(loss, &mut bundle.params)?;
            optimizer.step(&mut bundle.params)?;
        }
        let val_accuracy = teacher_val_accuracy(&bundle, &benchmark.val)?;
        epochs.push(TeacherEpoch {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            train_accuracy: acc_sum / batches.len() as f64,
            val_accuracy,
        });
    }
    bundle.freeze_teacher();
    let val_accuracy = epochs.last().map(|e| e.val_accuracy).unwrap_or(0.0);
    let checkpoint = bundle
        .params
        .iter()
        .filter(|(name, _)| name.starts_with("teacher.") || name.starts_with("teacher_head."))
        .map(|(name, p)| (name.to_string(), p.value.clone()))
        .collect();
    Ok(TeacherRun {
        checkpoint,
        epochs,
        val_accuracy,
    })
}

fn teacher_val_accuracy(bundle: &ModelBundle, val: &PairedDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..val.len()).collect();
    let x = val.teacher_batch(&idx)?;
    let e = bundle.encode_teacher(&x)?;
    let logits = bundle.teacher_head_eval(&e)?;
    Ok(eval::classification_accuracy(&logits, &val.labels()))
}

/// A completed distillation run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub bundle: ModelBundle,
    pub epochs: Vec<EpochTrace>,
}

/// Distillation either completes or aborts on a numeric failure, in which
/// case the last completed epoch's parameters are preserved for diagnosis.
#[derive(Debug)]
pub enum DistillOutcome {
    Completed(TrainedRun),
    AbortedNumeric {
        last_good: ModelBundle,
        epochs: Vec<EpochTrace>,
        diagnostic: String,
    },
}

struct BatchGraph {
    total: ValueId,
    logits: ValueId,
}

/// Assembles the per-batch training graph for the configured mode:
/// student forward, task cross-entropy through the classifier, then the
/// mode's distillation term weighted per sample and scaled by lambda.
///
/// Distances under `sq-l2-mean` (and the hard-l2 baseline) are taken between
/// l2-normalized embeddings so margins are dimension-independent; the cosine
/// metric normalizes internally.
fn build_batch_graph(
    tape: &mut Tape,
    bundle: &ModelBundle,
    distill: &DistillConfig,
    x_student: &Tensor,
    e_teacher: Option<&Tensor>,
    teacher_logits: Option<&Tensor>,
    labels: &[usize],
    weights: &[f64],
) -> Result<BatchGraph> {
    fn teacher_input(tape: &mut Tape, e_teacher: Option<&Tensor>) -> Result<ValueId> {
        let e = e_teacher.ok_or_else(|| {
            Error::Internal("mode requires teacher embeddings but none were computed".into())
        })?;
        Ok(tape.input(e))
    }

    let xs = tape.input(x_student);
    let f_s = bundle.encode_student(tape, xs)?;
    let logits = bundle.classify(tape, f_s)?;
    let task = cross_entropy(tape, logits, labels)?;

    let distill_per_sample = match distill.mode {
        DistillMode::None => None,
        DistillMode::Feature => {
            let e_t = teacher_input(tape, e_teacher)?;
            let f_t = bundle.project(tape, e_t)?;
            let (a, b) = match distill.metric {
                DistanceMetric::Cosine => (f_s, f_t),
                DistanceMetric::SqL2Mean => (
                    tape.l2_normalize_rows(f_s)?,
                    tape.l2_normalize_rows(f_t)?,
                ),
            };
            Some(margin_feature_loss(tape, a, b, distill.metric, distill.margin())?)
        }
        DistillMode::FitnetL2 => {
            let e_t = teacher_input(tape, e_teacher)?;
            let f_t = bundle.project(tape, e_t)?;
            let a = tape.l2_normalize_rows(f_s)?;
            let b = tape.l2_normalize_rows(f_t)?;
            Some(losses::fitnet_l2_per_sample(tape, a, b)?)
        }
        DistillMode::KdKl => {
            let t_logits = teacher_logits.ok_or_else(|| {
                Error::Internal("kd-kl requires teacher logits but none were computed".into())
            })?;
            let ti = tape.input(t_logits);
            Some(kd_kl_per_sample(tape, logits, ti, distill.temperature)?)
        }
        DistillMode::Classifier => {
            let e_t = teacher_input(tape, e_teacher)?;
            let f_t = bundle.project(tape, e_t)?;
            let w = tape.param(&bundle.params, "classifier.w")?;
            Some(classifier_level_per_pair(
                tape,
                f_s,
                f_t,
                labels,
                labels,
                w,
                distill.beta,
            )?)
        }
    };

    let total = match distill_per_sample {
        Some(per) => total_loss(tape, task, per, weights, distill.lambda)?,
        None => task,
    };
    Ok(BatchGraph { total, logits })
}

fn quality_scores(
    source: QualitySource,
    e_teacher: Option<&Tensor>,
    f_student: Option<&Tensor>,
) -> Result<Vec<f64>> {
    let teacher = || -> Result<Vec<f64>> {
        e_teacher
            .map(quantify_quality)
            .ok_or_else(|| Error::Internal("quality source needs teacher embeddings".into()))
    };
    let student = || -> Result<Vec<f64>> {
        f_student
            .map(quantify_quality)
            .ok_or_else(|| Error::Internal("quality source needs student embeddings".into()))
    };
    Ok(match source {
        QualitySource::Teacher => teacher()?,
        QualitySource::Student => student()?,
        QualitySource::Min => {
            let t = teacher()?;
            let s = student()?;
            t.into_iter().zip(s).map(|(a, b)| a.min(b)).collect()
        }
    })
}

/// Runs the distillation loop against a frozen teacher checkpoint.
pub fn distill_train(
    cfg: &ExperimentConfig,
    benchmark: &Benchmark,
    teacher_checkpoint: &[(String, Tensor)],
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let train = benchmark
        .train
        .subsample_fraction(cfg.train_fraction, cfg.seed)?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let model_cfg = cfg.model_config(&train.spec);
    let mut bundle = ModelBundle::init(model_cfg, cfg.seed)?;
    bundle.load_teacher(teacher_checkpoint)?;

    let needs_teacher_embeddings = matches!(
        cfg.distill.mode,
        DistillMode::Feature | DistillMode::FitnetL2 | DistillMode::Classifier
    ) || (cfg.distill.quality.enabled
        && matches!(
            cfg.distill.quality.source,
            QualitySource::Teacher | QualitySource::Min
        ));
    let needs_teacher_logits = cfg.distill.mode == DistillMode::KdKl;

    let mut optimizer = cfg.optimizer.build()?;
    let mut stats = RunningStats::new(cfg.distill.quality.ema_decay)?;

    // Validation trials are fixed once per run and rescored each epoch.
    let val_trial_seed: u64 = models::stream_rng(cfg.seed, streams::EVAL).gen();
    let val_pairs = sample_trial_pairs(
        &benchmark.val.labels(),
        cfg.eval.target_cap,
        cfg.eval.nontarget_cap,
        val_trial_seed,
    )?;

    let mut epochs: Vec<EpochTrace> = Vec::with_capacity(cfg.epochs);
    let mut last_good = bundle.clone();

    for epoch in 0..cfg.epochs {
        optimizer.set_learning_rate(cfg.optimizer.lr_at_epoch(epoch));
        let batches = data::make_batches(&train, &cfg.batch, epoch_seed(cfg.seed, epoch))?;
        if batches.is_empty() {
            return Err(Error::Config(
                "batch spec yields no complete batches; shrink classes_per_batch or samples_per_class"
                    .into(),
            ));
        }
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        let mut weight_sum = 0.0;
        let mut weight_batches = 0usize;

        for batch in &batches {
            let x_s = train.student_batch(batch)?;
            let y = train.batch_labels(batch);
            let e_t = if needs_teacher_embeddings {
                Some(bundle.encode_teacher(&train.teacher_batch(batch)?)?)
            } else {
                None
            };
            let t_logits = if needs_teacher_logits {
                let e = bundle.encode_teacher(&train.teacher_batch(batch)?)?;
                Some(bundle.teacher_head_eval(&e)?)
            } else {
                None
            };

            let step = (|| -> Result<(f64, f64)> {
                let mut tape = Tape::new();
                let weights = if cfg.distill.quality.enabled
                    && cfg.distill.mode != DistillMode::None
                {
                    // Student-side quality needs the raw student embeddings;
                    // a probe forward off the training tape supplies them.
                    let f_probe = match cfg.distill.quality.source {
                        QualitySource::Teacher => None,
                        _ => Some(bundle.encode_student_eval(&x_s)?),
                    };
                    let q = quality_scores(
                        cfg.distill.quality.source,
                        e_t.as_ref(),
                        f_probe.as_ref(),
                    )?;
                    stats.update(&q)?;
                    let w = adaptive_weights(&q, &stats, &cfg.distill.quality)?;
                    weight_sum += w.iter().sum::<f64>() / w.len() as f64;
                    weight_batches += 1;
                    w
                } else {
                    vec![1.0; y.len()]
                };
                let graph = build_batch_graph(
                    &mut tape,
                    &bundle,
                    &cfg.distill,
                    &x_s,
                    e_t.as_ref(),
                    t_logits.as_ref(),
                    &y,
                    &weights,
                )?;
                let loss_value = tape.value(graph.total).item()?;
                let acc = eval::classification_accuracy(tape.value(graph.logits), &y);
                tape.backward(graph.total, &mut bundle.params)?;
                optimizer.step(&mut bundle.params)?;
                Ok((loss_value, acc))
            })();

            match step {
                Ok((loss_value, acc)) => {
                    loss_sum += loss_value;
                    acc_sum += acc;
                }
                Err(e @ Error::Numeric { .. }) => {
                    return Ok(DistillOutcome::AbortedNumeric {
                        last_good,
                        epochs,
                        diagnostic: format!("epoch {epoch}: {e}"),
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let (val_accuracy, val_eer) = validate_epoch(&bundle, benchmark, &val_pairs)?;
        let trace = EpochTrace {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            train_accuracy: acc_sum / batches.len() as f64,
            val_accuracy,
            val_eer,
            mu_q: stats.is_warmed().then(|| stats.mu()),
            sigma_q: stats.is_warmed().then(|| stats.sigma()),
            mean_weight: (weight_batches > 0).then(|| weight_sum / weight_batches as f64),
        };
        epochs.push(trace);
        last_good = bundle.clone();
    }

    Ok(DistillOutcome::Completed(TrainedRun { bundle, epochs }))
}

fn validate_epoch(
    bundle: &ModelBundle,
    benchmark: &Benchmark,
    val_pairs: &TrialPairs,
) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..benchmark.val.len()).collect();
    let x = benchmark.val.student_batch(&idx)?;
    let emb = bundle.encode_student_eval(&x)?;
    let logits = bundle.classify_eval(&emb)?;
    let acc = eval::classification_accuracy(&logits, &benchmark.val.labels());
    let trials = score_trials(std::slice::from_ref(&emb), val_pairs)?;
    let eer = eval::compute_eer(&trials)?;
    Ok((acc, eer))
}

/// File-producing wrapper around [`train_teacher`]: writes the resolved
/// config, the frozen checkpoint, and a JSONL log into `out_dir`.
pub fn run_teacher_to_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<TeacherRun> {
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let benchmark = resolve_benchmark(cfg)?;
    let run = train_teacher(cfg, &benchmark)?;
    let mut params = crate::numeric::ParamSet::new();
    for (name, tensor) in &run.checkpoint {
        params.insert(name, tensor.clone(), false)?;
    }
    models::save_checkpoint(&out_dir.join("teacher.ckpt"), &params)?;
    let mut log = std::fs::File::create(out_dir.join("teacher.jsonl"))?;
    for e in &run.epochs {
        writeln!(
            log,
            "{}",
            serde_json::to_string(&serde_json::json!({"event": "epoch", "epoch": e.epoch,
                "train_loss": e.train_loss, "train_accuracy": e.train_accuracy,
                "val_accuracy": e.val_accuracy}))?
        )?;
    }
    writeln!(
        log,
        "{}",
        serde_json::to_string(
            &serde_json::json!({"event": "final", "val_accuracy": run.val_accuracy})
        )?
    )?;
    Ok(run)
}

/// File-producing wrapper around [`distill_train`]: writes the resolved
/// config, the trained bundle, and the epoch JSONL log. A numeric abort
/// writes `last_good.ckpt` plus a diagnostic line and surfaces the numeric
/// error.
pub fn run_distill_to_dir(
    cfg: &ExperimentConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
) -> Result<TrainedRun> {
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let benchmark = resolve_benchmark(cfg)?;
    let teacher = models::load_checkpoint(teacher_ckpt)?;
    let outcome = distill_train(cfg, &benchmark, &teacher)?;
    let mut log = std::fs::File::create(out_dir.join("run.jsonl"))?;
    match outcome {
        DistillOutcome::Completed(run) => {
            for e in &run.epochs {
                let mut line = serde_json::to_value(e)?;
                line.as_object_mut()
                    .expect("epoch record is an object")
                    .insert("event".into(), "epoch".into());
                writeln!(log, "{}", serde_json::to_string(&line)?)?;
            }
            models::save_checkpoint(&out_dir.join("student.ckpt"), &run.bundle.params)?;
            Ok(run)
        }
        DistillOutcome::AbortedNumeric {
            last_good,
            epochs,
            diagnostic,
        } => {
            for e in &epochs {
                let mut line = serde_json::to_value(e)?;
                line.as_object_mut()
                    .expect("epoch record is an object")
                    .insert("event".into(), "epoch".into());
                writeln!(log, "{}", serde_json::to_string(&line)?)?;
            }
            writeln!(
                log,
                "{}",
                serde_json::to_string(
                    &serde_json::json!({"event": "abort", "diagnostic": diagnostic})
                )?
            )?;
            models::save_checkpoint(&out_dir.join("last_good.ckpt"), &last_good.params)?;
            Err(Error::Numeric {
                node: 0,
                op: "distill_train",
                message: diagnostic,
            })
        }
    }
}

pub(crate) fn write_resolved_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)?;
    std::fs::write(out_dir.join("config.json"), text)?;
    Ok(())
}
