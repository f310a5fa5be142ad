//! Full evaluation of a trained bundle: closed-set accuracy, open-set
//! EER/minDCF, forced-choice cross-modal matching in both directions and
//! both protocols, and the noise-robustness sweep.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::data::{inject_noise, Benchmark, PairedDataset};
use crate::error::Result;
use crate::eval::{
    classification_accuracy, compute_eer, compute_min_dcf, cross_modal_matching,
    sample_trial_pairs, score_trials, EpochTrace, MatchProtocol, MatchingReport, MetricsReport,
    NoisyEer,
};
use crate::harness::config::ExperimentConfig;
use crate::harness::train::{resolve_benchmark, write_resolved_config};
use crate::models::{self, streams, ModelBundle};
use crate::numeric::Tensor;

fn all_idx(ds: &PairedDataset) -> Vec<usize> {
    (0..ds.len()).collect()
}

/// Student embeddings of one split, one tensor per crop. Crops re-encode
/// the same inputs; with deterministic encoders they coincide, matching the
/// single-vector desk-scale protocol.
fn student_crops(
    bundle: &ModelBundle,
    ds: &PairedDataset,
    crops: usize,
) -> Result<Vec<Tensor>> {
    let x = ds.student_batch(&all_idx(ds))?;
    (0..crops.max(1))
        .map(|_| bundle.encode_student_eval(&x))
        .collect()
}

/// Evaluates a trained bundle on a benchmark, echoing the resolved config
/// and the per-epoch traces into the report.
pub fn evaluate(
    cfg: &ExperimentConfig,
    benchmark: &Benchmark,
    bundle: &ModelBundle,
    epochs: Vec<EpochTrace>,
) -> Result<MetricsReport> {
    let mut seed_rng = models::stream_rng(cfg.seed, streams::EVAL);
    let trial_seed: u64 = seed_rng.gen(); // matches the training-time draw
    let open_trial_seed: u64 = seed_rng.gen();
    let matching_seed: u64 = seed_rng.gen();
    let noise_seed: u64 = seed_rng.gen();

    // Closed-set accuracy through the shared classifier.
    let closed = &benchmark.test_closed;
    let closed_emb = bundle.encode_student_eval(&closed.student_batch(&all_idx(closed))?)?;
    let accuracy = classification_accuracy(
        &bundle.classify_eval(&closed_emb)?,
        &closed.labels(),
    );

    // Open-set verification over held-out classes.
    let open = &benchmark.test_open;
    let open_labels = open.labels();
    let pairs = sample_trial_pairs(
        &open_labels,
        cfg.eval.target_cap,
        cfg.eval.nontarget_cap,
        open_trial_seed,
    )?;
    let crops = student_crops(bundle, open, cfg.eval.crops)?;
    let trials = score_trials(&crops, &pairs)?;
    let eer = compute_eer(&trials)?;
    let min_dcf = compute_min_dcf(&trials, cfg.eval.p_tar, cfg.eval.c_miss, cfg.eval.c_fa)?;

    // Cross-modal matching: student embeddings against projected teacher
    // embeddings of the same split.
    let student_emb = &crops[0];
    let teacher_emb = bundle.encode_teacher(&open.teacher_batch(&all_idx(open))?)?;
    let projected = bundle.project_eval(&teacher_emb)?;
    let match_dir = |anchors: &Tensor,
                         a_labels: &[usize],
                         cands: &Tensor,
                         c_labels: &[usize],
                         protocol: MatchProtocol,
                         salt: u64|
     -> Result<f64> {
        cross_modal_matching(
            anchors,
            a_labels,
            cands,
            c_labels,
            &open.class_groups,
            protocol,
            cfg.eval.matching_trials,
            matching_seed ^ salt,
        )
    };
    let matching = MatchingReport {
        student_to_teacher_original: match_dir(
            student_emb,
            &open_labels,
            &projected,
            &open_labels,
            MatchProtocol::Original,
            1,
        )?,
        teacher_to_student_original: match_dir(
            &projected,
            &open_labels,
            student_emb,
            &open_labels,
            MatchProtocol::Original,
            2,
        )?,
        student_to_teacher_hard: match_dir(
            student_emb,
            &open_labels,
            &projected,
            &open_labels,
            MatchProtocol::Hard,
            3,
        )?,
        teacher_to_student_hard: match_dir(
            &projected,
            &open_labels,
            student_emb,
            &open_labels,
            MatchProtocol::Hard,
            4,
        )?,
        trials: cfg.eval.matching_trials,
    };

    // Noise robustness: student inputs distorted at each configured SNR,
    // rescored on the same trial pairs.
    let mut noisy_eer = Vec::with_capacity(cfg.eval.delta_db.len());
    for (i, &delta_db) in cfg.eval.delta_db.iter().enumerate() {
        let mut rng = models::stream_rng(noise_seed, i as u64);
        let mut rows = Vec::with_capacity(open.len());
        for s in &open.samples {
            rows.push(inject_noise(&s.x_student, delta_db, &mut rng)?);
        }
        let noisy = bundle.encode_student_eval(&Tensor::from_rows(&rows)?)?;
        let noisy_trials = score_trials(std::slice::from_ref(&noisy), &pairs)?;
        noisy_eer.push(NoisyEer {
            delta_db,
            eer: compute_eer(&noisy_trials)?,
        });
    }

    let _ = trial_seed; // reserved by the training-time validation trials

    let report = MetricsReport {
        eer,
        min_dcf,
        accuracy,
        matching,
        noisy_eer,
        epochs,
        config_echo: serde_json::to_value(cfg)?,
        seed: cfg.seed,
    };
    report.validate()?;
    Ok(report)
}

/// File-producing wrapper: loads data and a full-bundle checkpoint, runs
/// [`evaluate`], and writes `metrics.json`, `metrics.csv`, and a final JSONL
/// record into `out_dir`.
pub fn run_evaluate_to_dir(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<MetricsReport> {
    std::fs::create_dir_all(out_dir)?;
    write_resolved_config(cfg, out_dir)?;
    let benchmark = resolve_benchmark(cfg)?;
    let model_cfg = cfg.model_config(&benchmark.train.spec);
    let mut bundle = ModelBundle::init(model_cfg, cfg.seed)?;
    let ckpt = models::load_checkpoint(checkpoint)?;
    bundle.load_all(&ckpt)?;
    let report = evaluate(cfg, &benchmark, &bundle, Vec::new())?;
    write_report_files(&report, cfg, out_dir)?;
    Ok(report)
}

pub(crate) fn write_report_files(
    report: &MetricsReport,
    cfg: &ExperimentConfig,
    out_dir: &Path,
) -> Result<()> {
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    let run_id = out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let mode = serde_json::to_value(cfg.distill.mode)?
        .as_str()
        .expect("mode serializes to a string")
        .to_string();
    let mut csv = String::from("run_id,mode,metric,value,seed\n");
    for row in report.csv_rows(&run_id, &mode) {
        csv.push_str(&row);
        csv.push('\n');
    }
    std::fs::write(out_dir.join("metrics.csv"), csv)?;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("run.jsonl"))?;
    let line = serde_json::json!({"event": "final", "metrics": report});
    writeln!(log, "{}", serde_json::to_string(&line)?)?;
    Ok(())
}
