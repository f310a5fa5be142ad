//! Training objectives: task cross-entropy, the two soft-constrained
//! distillation losses (margin-hinged feature distance and shared-classifier
//! mixing), two hard baselines (temperature-softened KL over logits, plain
//! feature l2), and the weighted total-loss composition.
//!
//! All losses are tape builders so their gradients are exact and checkable;
//! per-sample losses come back as rank-1 values that [`total_loss`] combines
//! with (constant) per-sample weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor, ValueId};
use crate::quality::QualityConfig;

/// Which distillation objective a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillMode {
    /// Task loss only: the no-distillation control.
    None,
    /// Margin-hinged distance between student and projected teacher features.
    Feature,
    /// Shared classifier over the mixed 2b feature batch plus optional
    /// logit l2.
    Classifier,
    /// Baseline: temperature-softened KL between teacher-head and student
    /// logits.
    KdKl,
    /// Baseline: hard feature l2 (margin-free).
    FitnetL2,
}

/// Distance family for feature-level alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// `1 - cos(f_s, f_t)`, in [0, 2].
    Cosine,
    /// Mean over dimensions of the squared difference.
    SqL2Mean,
}

/// All method hyperparameters for one distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub metric: DistanceMetric,
    /// Skip-mix ratio of the projection head, in [0, 1].
    pub alpha: f64,
    /// Cosine margin as an angle in degrees; the hinge margin on the
    /// `1 - cos` distance is `1 - cos(margin_deg)`, so a pair aligned within
    /// this angle incurs zero loss.
    pub margin_deg: f64,
    /// Margin on the squared-l2-mean distance (used when `metric` is
    /// `sq-l2-mean`).
    pub margin_sq: f64,
    /// Weight of the logit l2 term in classifier-level distillation.
    pub beta: f64,
    /// Softening temperature of the KL baseline.
    pub temperature: f64,
    /// Scale of the distillation term in the total loss.
    pub lambda: f64,
    pub quality: QualityConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mode: DistillMode::Feature,
            metric: DistanceMetric::Cosine,
            alpha: 0.6,
            margin_deg: 30.0,
            margin_sq: 0.04,
            beta: 0.0,
            temperature: 4.0,
            lambda: 1.0,
            quality: QualityConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if !(0.0..=180.0).contains(&self.margin_deg) {
            return Err(Error::Config(format!(
                "margin_deg must lie in [0,180], got {}",
                self.margin_deg
            )));
        }
        if self.margin_sq < 0.0 {
            return Err(Error::Config(format!(
                "margin_sq must be >= 0, got {}",
                self.margin_sq
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        self.quality.validate()
    }

    /// Hinge margin in distance units under the configured metric.
    pub fn margin(&self) -> f64 {
        match self.metric {
            DistanceMetric::Cosine => 1.0 - self.margin_deg.to_radians().cos(),
            DistanceMetric::SqL2Mean => self.margin_sq,
        }
    }
}

/// Mean softmax cross-entropy of a logit batch against integer labels.
pub fn cross_entropy(tape: &mut Tape, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
    let per_row = tape.softmax_ce_rows(logits, labels)?;
    tape.mean_all(per_row)
}

/// Per-sample distance between paired features under the chosen metric.
pub fn feature_distance(
    tape: &mut Tape,
    f_s: ValueId,
    f_t: ValueId,
    metric: DistanceMetric,
) -> Result<ValueId> {
    match metric {
        DistanceMetric::Cosine => {
            let cos = tape.cosine_rows(f_s, f_t)?;
            let ones = tape.input(&Tensor::new(
                vec![tape.value(cos).len()],
                vec![1.0; tape.value(cos).len()],
            )?);
            let neg = tape.scale(cos, -1.0)?;
            tape.add(ones, neg)
        }
        DistanceMetric::SqL2Mean => tape.sq_l2_mean_rows(f_s, f_t),
    }
}

/// Margin-hinged per-sample feature loss: `max(d - m, 0)`. Samples whose
/// distance is already within the margin contribute zero loss and exactly
/// zero gradient.
pub fn margin_feature_loss(
    tape: &mut Tape,
    f_s: ValueId,
    f_t: ValueId,
    metric: DistanceMetric,
    margin: f64,
) -> Result<ValueId> {
    let d = feature_distance(tape, f_s, f_t, metric)?;
    tape.hinge(d, margin)
}

/// Per-pair classifier-level distillation loss.
///
/// The pair's student and teacher features both pass through the shared
/// classifier; the pair contributes the average of its two cross-entropy
/// terms (this equals cross-entropy over the concatenated 2b batch when
/// averaged) plus `beta` times the mean-squared distance of its two logit
/// rows.
pub fn classifier_level_per_pair(
    tape: &mut Tape,
    f_s: ValueId,
    f_t: ValueId,
    labels_s: &[usize],
    labels_t: &[usize],
    classifier_w: ValueId,
    beta: f64,
) -> Result<ValueId> {
    if labels_s.len() != labels_t.len() {
        return Err(Error::Data(format!(
            "paired label lists differ in length: {} vs {}",
            labels_s.len(),
            labels_t.len()
        )));
    }
    if let Some(i) = labels_s.iter().zip(labels_t).position(|(a, b)| a != b) {
        return Err(Error::Data(format!(
            "label mismatch within pair {i}: student {} vs teacher {}",
            labels_s[i], labels_t[i]
        )));
    }
    if beta < 0.0 {
        return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
    }
    let logits_s = tape.matmul_nt(f_s, classifier_w)?;
    let logits_t = tape.matmul_nt(f_t, classifier_w)?;
    let ce_s = tape.softmax_ce_rows(logits_s, labels_s)?;
    let ce_t = tape.softmax_ce_rows(logits_t, labels_t)?;
    let ce_sum = tape.add(ce_s, ce_t)?;
    let ce_pair = tape.scale(ce_sum, 0.5)?;
    if beta == 0.0 {
        return Ok(ce_pair);
    }
    let l2 = tape.sq_l2_mean_rows(logits_s, logits_t)?;
    let l2w = tape.scale(l2, beta)?;
    tape.add(ce_pair, l2w)
}

/// Scalar classifier-level loss: cross-entropy over the mixed 2b batch plus
/// `beta` times the mean logit l2.
pub fn classifier_level_loss(
    tape: &mut Tape,
    f_s: ValueId,
    f_t: ValueId,
    labels_s: &[usize],
    labels_t: &[usize],
    classifier_w: ValueId,
    beta: f64,
) -> Result<ValueId> {
    let per_pair = classifier_level_per_pair(tape, f_s, f_t, labels_s, labels_t, classifier_w, beta)?;
    tape.mean_all(per_pair)
}

/// Per-sample softened-KL baseline: `T^2 * KL(softmax(t/T) || softmax(s/T))`.
pub fn kd_kl_per_sample(
    tape: &mut Tape,
    student_logits: ValueId,
    teacher_logits: ValueId,
    temperature: f64,
) -> Result<ValueId> {
    tape.kl_softened_rows(teacher_logits, student_logits, temperature)
}

/// Mean softened-KL baseline over the batch.
pub fn kd_kl_baseline(
    tape: &mut Tape,
    student_logits: ValueId,
    teacher_logits: ValueId,
    temperature: f64,
) -> Result<ValueId> {
    let per = kd_kl_per_sample(tape, student_logits, teacher_logits, temperature)?;
    tape.mean_all(per)
}

/// Per-sample hard-alignment baseline: squared-l2-mean distance, no margin.
/// Identical to [`margin_feature_loss`] with a zero margin under
/// `sq-l2-mean`.
pub fn fitnet_l2_per_sample(tape: &mut Tape, f_s: ValueId, f_t: ValueId) -> Result<ValueId> {
    margin_feature_loss(tape, f_s, f_t, DistanceMetric::SqL2Mean, 0.0)
}

/// Mean hard-alignment baseline over the batch.
pub fn fitnet_l2_baseline(tape: &mut Tape, f_s: ValueId, f_t: ValueId) -> Result<ValueId> {
    let per = fitnet_l2_per_sample(tape, f_s, f_t)?;
    tape.mean_all(per)
}

/// Total loss: `task + lambda * mean_i(w_i * distill_i)`.
///
/// Weights are constants on the tape (no gradient flows through them); they
/// must be non-negative and aligned with the per-sample distillation losses.
pub fn total_loss(
    tape: &mut Tape,
    task: ValueId,
    distill_per_sample: ValueId,
    weights: &[f64],
    lambda: f64,
) -> Result<ValueId> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = tape.value(distill_per_sample).len();
    if weights.len() != n {
        return Err(Error::Internal(format!(
            "{} weights for {n} per-sample losses",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|&w| !(w >= 0.0)) {
        return Err(Error::Internal(format!(
            "negative or non-finite weight {} at index {i}; weights are clamped upstream",
            weights[i]
        )));
    }
    let w = tape.input(&Tensor::new(vec![n], weights.to_vec())?);
    let weighted = tape.mul(w, distill_per_sample)?;
    let mean = tape.mean_all(weighted)?;
    let scaled = tape.scale(mean, lambda)?;
    tape.add(task, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::ParamSet;

    fn rows(tape: &mut Tape, rows: usize, cols: usize, data: Vec<f64>) -> ValueId {
        tape.input(&Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn mode_and_metric_serialize_to_the_documented_strings() {
        assert_eq!(serde_json::to_string(&DistillMode::KdKl).unwrap(), "\"kd-kl\"");
        assert_eq!(
            serde_json::to_string(&DistillMode::FitnetL2).unwrap(),
            "\"fitnet-l2\""
        );
        assert_eq!(
            serde_json::to_string(&DistanceMetric::SqL2Mean).unwrap(),
            "\"sq-l2-mean\""
        );
        assert_eq!(
            serde_json::to_string(&DistanceMetric::Cosine).unwrap(),
            "\"cosine\""
        );
    }

    #[test]
    fn uniform_logits_cost_log_c() {
        let mut tape = Tape::new();
        let logits = rows(&mut tape, 2, 4, vec![0.0; 8]);
        let ce = cross_entropy(&mut tape, logits, &[1, 3]).unwrap();
        assert!((tape.value(ce).item().unwrap() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_zero_logits_hand_case() {
        // logits [2,0], label 0 → -ln(e^2/(e^2+1)) = ln(1+e^-2) ≈ 0.1269
        let mut tape = Tape::new();
        let logits = rows(&mut tape, 1, 2, vec![2.0, 0.0]);
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        let expect = (1.0 + (-2.0_f64).exp()).ln();
        assert!((tape.value(ce).item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_drive_loss_to_zero() {
        let mut tape = Tape::new();
        let logits = rows(&mut tape, 1, 3, vec![60.0, 0.0, 0.0]);
        let ce = cross_entropy(&mut tape, logits, &[0]).unwrap();
        assert!(tape.value(ce).item().unwrap() < 1e-12);
    }

    #[test]
    fn identical_features_have_zero_distance_under_both_metrics() {
        for metric in [DistanceMetric::Cosine, DistanceMetric::SqL2Mean] {
            let mut tape = Tape::new();
            let f = rows(&mut tape, 2, 3, vec![0.4, -1.0, 2.0, 1.0, 1.0, 1.0]);
            let d = feature_distance(&mut tape, f, f, metric).unwrap();
            for v in tape.value(d).data() {
                assert!(v.abs() < 1e-15, "{metric:?}: {v}");
            }
        }
    }

    #[test]
    fn orthogonal_unit_vectors_have_cosine_distance_one() {
        let mut tape = Tape::new();
        let a = rows(&mut tape, 1, 2, vec![1.0, 0.0]);
        let b = rows(&mut tape, 1, 2, vec![0.0, 1.0]);
        let d = feature_distance(&mut tape, a, b, DistanceMetric::Cosine).unwrap();
        assert_eq!(tape.value(d).data(), &[1.0]);
    }

    #[test]
    fn sq_l2_mean_hand_case() {
        let mut tape = Tape::new();
        let a = rows(&mut tape, 1, 2, vec![0.0, 0.0]);
        let b = rows(&mut tape, 1, 2, vec![0.2, 0.2]);
        let d = feature_distance(&mut tape, a, b, DistanceMetric::SqL2Mean).unwrap();
        assert!((tape.value(d).data()[0] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn margin_loss_hand_case_and_zero_region() {
        // d = 0.13, m = 0.09 → 0.04; and d <= m → exactly 0 with zero grad.
        let a = 0.13_f64.sqrt(); // both dims at `a` give sq-l2-mean 0.13
        let mut params = ParamSet::new();
        params
            .insert(
                "fs",
                Tensor::matrix(2, 2, vec![0.0, 0.0, 0.3, 0.4]).unwrap(),
                true,
            )
            .unwrap();
        let ft = Tensor::matrix(2, 2, vec![a, a, 0.3, 0.4]).unwrap();
        let mut tape = Tape::new();
        let fs = tape.param(&params, "fs").unwrap();
        let fti = tape.input(&ft);
        let loss =
            margin_feature_loss(&mut tape, fs, fti, DistanceMetric::SqL2Mean, 0.09).unwrap();
        let v = tape.value(loss).data().to_vec();
        assert!((v[0] - 0.04).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
        let scalar = tape.mean_all(loss).unwrap();
        tape.backward(scalar, &mut params).unwrap();
        let g = params.get("fs").unwrap().value.grad().unwrap();
        assert_eq!(&g[2..], &[0.0, 0.0]); // inside the margin: exact zero
        assert!(g[0] != 0.0);
    }

    #[test]
    fn margin_loss_is_non_increasing_in_margin() {
        let mut tape = Tape::new();
        let a = rows(&mut tape, 1, 3, vec![1.0, 0.2, -0.5]);
        let b = rows(&mut tape, 1, 3, vec![0.1, 1.2, 0.7]);
        let mut last = f64::INFINITY;
        for m in [0.0, 0.1, 0.5, 1.0, 2.0] {
            let l = margin_feature_loss(&mut tape, a, b, DistanceMetric::Cosine, m).unwrap();
            let v = tape.value(l).data()[0];
            assert!(v <= last + 1e-15);
            last = v;
        }
    }

    #[test]
    fn classifier_level_reduces_to_mixed_batch_ce_at_beta_zero() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, 3, 2, vec![0.7, -0.3, 0.1, 0.9, -0.5, 0.4]);
        let fs = rows(&mut tape, 2, 2, vec![1.0, 0.0, 0.3, -0.8]);
        let ft = rows(&mut tape, 2, 2, vec![0.9, 0.1, 0.2, -0.7]);
        let y = [0usize, 2];
        let loss = classifier_level_loss(&mut tape, fs, ft, &y, &y, w, 0.0).unwrap();

        // Oracle: CE over the concatenated batch of 4 rows.
        let cat = tape.concat_rows(fs, ft).unwrap();
        let logits = tape.matmul_nt(cat, w).unwrap();
        let ce = cross_entropy(&mut tape, logits, &[0, 2, 0, 2]).unwrap();
        let (a, b) = (
            tape.value(loss).item().unwrap(),
            tape.value(ce).item().unwrap(),
        );
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }

    #[test]
    fn classifier_level_hand_case_single_pair() {
        // Identical features, logits [2,0], label 0, beta=1:
        // CE ≈ 0.1269 and zero logit-l2 term.
        let mut tape = Tape::new();
        let w = rows(&mut tape, 2, 2, vec![2.0, 0.0, 0.0, 0.0]);
        let f = rows(&mut tape, 1, 2, vec![1.0, 0.5]);
        let loss = classifier_level_loss(&mut tape, f, f, &[0], &[0], w, 1.0).unwrap();
        let expect = (1.0 + (-2.0_f64).exp()).ln();
        assert!((tape.value(loss).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn classifier_level_is_symmetric_under_block_swap() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, 3, 2, vec![0.7, -0.3, 0.1, 0.9, -0.5, 0.4]);
        let fs = rows(&mut tape, 2, 2, vec![1.0, 0.0, 0.3, -0.8]);
        let ft = rows(&mut tape, 2, 2, vec![0.2, 0.6, -0.4, 0.5]);
        let y = [1usize, 0];
        let a = classifier_level_loss(&mut tape, fs, ft, &y, &y, w, 0.7).unwrap();
        let b = classifier_level_loss(&mut tape, ft, fs, &y, &y, w, 0.7).unwrap();
        assert_eq!(
            tape.value(a).item().unwrap(),
            tape.value(b).item().unwrap()
        );
    }

    #[test]
    fn pair_label_mismatch_is_a_data_error() {
        let mut tape = Tape::new();
        let w = rows(&mut tape, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let f = rows(&mut tape, 1, 2, vec![1.0, 0.5]);
        assert!(matches!(
            classifier_level_loss(&mut tape, f, f, &[0], &[1], w, 0.0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn kd_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let l = rows(&mut tape, 2, 3, vec![2.0, -1.0, 0.0, 5.0, 5.0, 5.0]);
        let kd = kd_kl_baseline(&mut tape, l, l, 3.0).unwrap();
        assert!(tape.value(kd).item().unwrap().abs() < 1e-14);
    }

    #[test]
    fn kd_hand_case_closed_form() {
        // student [0,0], teacher [ln2, 0], T=1:
        // KL((2/3,1/3) || (1/2,1/2)) = (2/3)ln(4/3) + (1/3)ln(2/3)
        let mut tape = Tape::new();
        let s = rows(&mut tape, 1, 2, vec![0.0, 0.0]);
        let t = rows(&mut tape, 1, 2, vec![2.0_f64.ln(), 0.0]);
        let kd = kd_kl_baseline(&mut tape, s, t, 1.0).unwrap();
        let expect = (2.0 / 3.0) * (4.0_f64 / 3.0).ln() + (1.0 / 3.0) * (2.0_f64 / 3.0).ln();
        assert!((tape.value(kd).item().unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn high_temperature_drives_both_distributions_to_uniform() {
        // At T=1e6 the softened distributions coincide to first order, so the
        // raw (unscaled) divergence vanishes; the temperature-squared loss
        // converges to its quadratic limit over centered logits.
        let mut tape = Tape::new();
        let s = rows(&mut tape, 1, 2, vec![0.0, 0.0]);
        let t = rows(&mut tape, 1, 2, vec![2.0_f64.ln(), 0.0]);
        let temp = 1e6;
        let kd = kd_kl_baseline(&mut tape, s, t, temp).unwrap();
        let scaled = tape.value(kd).item().unwrap();
        let raw = scaled / (temp * temp);
        assert!(raw <= 1e-6, "raw softened KL {raw}");
        // Quadratic limit: (1/(2C)) * sum((t - mean t) - (s - mean s))^2.
        // Tolerance is loose: the tiny divergence is computed by cancellation
        // and then amplified by the squared temperature.
        let ln2 = 2.0_f64.ln();
        let limit = (1.0 / 4.0) * ((ln2 / 2.0).powi(2) + (ln2 / 2.0).powi(2));
        assert!(
            (scaled - limit).abs() < 5e-3,
            "scaled {scaled} vs limit {limit}"
        );
    }

    #[test]
    fn kd_is_nonnegative_and_zero_under_constant_shift() {
        let mut tape = Tape::new();
        let s = rows(&mut tape, 1, 3, vec![0.2, -1.0, 0.5]);
        let t = rows(&mut tape, 1, 3, vec![0.2 + 7.0, -1.0 + 7.0, 0.5 + 7.0]);
        let kd = kd_kl_baseline(&mut tape, s, t, 2.0).unwrap();
        let v = tape.value(kd).item().unwrap();
        assert!(v.abs() < 1e-12, "shifted logits should have zero KD, got {v}");
    }

    #[test]
    fn fitnet_equals_zero_margin_feature_loss_bitwise() {
        let mut tape = Tape::new();
        let a = rows(&mut tape, 2, 3, vec![0.4, -1.0, 2.0, 0.1, 0.1, 0.2]);
        let b = rows(&mut tape, 2, 3, vec![0.0, 1.0, 1.5, 0.1, 0.1, 0.2]);
        let fit = fitnet_l2_baseline(&mut tape, a, b).unwrap();
        let margin0 = margin_feature_loss(&mut tape, a, b, DistanceMetric::SqL2Mean, 0.0).unwrap();
        let m = tape.mean_all(margin0).unwrap();
        assert_eq!(
            tape.value(fit).item().unwrap().to_bits(),
            tape.value(m).item().unwrap().to_bits()
        );
    }

    #[test]
    fn total_loss_hand_case_and_lambda_zero() {
        let mut tape = Tape::new();
        let task = tape.input(&Tensor::scalar(0.5).unwrap());
        let distill = tape.input(&Tensor::vector(&[0.1, 0.3]).unwrap()); // mean 0.2
        let total = total_loss(&mut tape, task, distill, &[1.0, 1.0], 1.0).unwrap();
        assert!((tape.value(total).item().unwrap() - 0.7).abs() < 1e-15);
        let off = total_loss(&mut tape, task, distill, &[1.0, 1.0], 0.0).unwrap();
        assert_eq!(tape.value(off).item().unwrap(), 0.5);
    }

    #[test]
    fn weighted_total_shifts_linearly_with_weights() {
        let mut tape = Tape::new();
        let task = tape.input(&Tensor::scalar(0.0).unwrap());
        let distill = tape.input(&Tensor::vector(&[1.0, 1.0]).unwrap());
        let w = [4.0 / 3.0, 2.0 / 3.0]; // one-sigma up and down at h=1/3
        let total = total_loss(&mut tape, task, distill, &w, 1.0).unwrap();
        assert!((tape.value(total).item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_are_an_internal_error() {
        let mut tape = Tape::new();
        let task = tape.input(&Tensor::scalar(0.0).unwrap());
        let distill = tape.input(&Tensor::vector(&[1.0]).unwrap());
        assert!(matches!(
            total_loss(&mut tape, task, distill, &[-0.1], 1.0),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn default_config_round_trips_through_json() {
        let cfg = DistillConfig::default();
        let s = serde_json::to_string(&cfg).unwrap();
        let back: DistillConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert!((cfg.margin() - (1.0 - 30f64.to_radians().cos())).abs() < 1e-15);
    }
}
