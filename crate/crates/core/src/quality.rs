//! Per-sample input quality from feature norms, and its conversion into
//! adaptive distillation weights.
//!
//! Quality is the Euclidean norm of a raw (pre-normalization) encoder
//! feature. A running mean and standard deviation, maintained as
//! exponential moving averages over batch statistics, standardize the norms;
//! the weight of sample `i` is `w_base + (q_i - mu_q) * h / sigma_q`, clamped
//! at zero so a low-quality sample can at worst drop out of distillation but
//! never invert its gradient. Weights apply to the distillation term only,
//! never the task loss, and are treated as constants by the gradient tape.
//!
//! Stats update with the incoming batch before that batch's weights are
//! computed, so the first batch both warms up the statistics and receives
//! weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Which modality's feature norms drive the quality score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualitySource {
    Teacher,
    Student,
    /// Elementwise minimum of the teacher and student norms.
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityConfig {
    pub enabled: bool,
    /// Base weight at exactly average quality.
    pub w_base: f64,
    /// Sensitivity: a one-sigma quality excursion moves the weight by `h`.
    pub h: f64,
    /// EMA decay of the running mean/std.
    pub ema_decay: f64,
    pub source: QualitySource,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            enabled: false,
            w_base: 1.0,
            h: 1.0 / 3.0,
            ema_decay: 0.9,
            source: QualitySource::Teacher,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) {
            return Err(Error::Config(format!("quality h must be > 0, got {}", self.h)));
        }
        if self.w_base < 0.0 {
            return Err(Error::Config(format!(
                "quality w_base must be >= 0, got {}",
                self.w_base
            )));
        }
        if !(0.0 < self.ema_decay && self.ema_decay < 1.0) {
            return Err(Error::Config(format!(
                "quality ema_decay must lie in (0,1), got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }
}

/// Running mean and standard deviation of quality scores.
///
/// The first batch initializes both from plain batch statistics (warmup);
/// subsequent batches blend in with `d*old + (1-d)*batch`.
#[derive(Debug, Clone)]
pub struct RunningStats {
    mu_q: f64,
    sigma_q: f64,
    decay: f64,
    warmed: bool,
    floor_warnings: u32,
}

/// Floor applied when a batch has zero spread.
const SIGMA_FLOOR: f64 = 1e-8;

impl RunningStats {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0 < decay && decay < 1.0) {
            return Err(Error::Config(format!(
                "ema decay must lie in (0,1), got {decay}"
            )));
        }
        Ok(RunningStats {
            mu_q: 0.0,
            sigma_q: 0.0,
            decay,
            warmed: false,
            floor_warnings: 0,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu_q
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_q
    }

    pub fn is_warmed(&self) -> bool {
        self.warmed
    }

    /// Batches whose spread hit the sigma floor so far.
    pub fn floor_warnings(&self) -> u32 {
        self.floor_warnings
    }

    /// Folds one batch of quality scores into the running statistics.
    pub fn update(&mut self, q: &[f64]) -> Result<()> {
        if q.is_empty() {
            return Err(Error::Usage("stats update with empty batch".into()));
        }
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let var = q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / q.len() as f64;
        let mut std = var.sqrt();
        if std < SIGMA_FLOOR {
            std = SIGMA_FLOOR;
            self.floor_warnings += 1;
        }
        if self.warmed {
            self.mu_q = self.decay * self.mu_q + (1.0 - self.decay) * mean;
            self.sigma_q = self.decay * self.sigma_q + (1.0 - self.decay) * std;
        } else {
            self.mu_q = mean;
            self.sigma_q = std;
            self.warmed = true;
        }
        if self.sigma_q < SIGMA_FLOOR {
            self.sigma_q = SIGMA_FLOOR;
        }
        Ok(())
    }
}

/// Per-row Euclidean norms of raw encoder features.
pub fn quantify_quality(features: &Tensor) -> Vec<f64> {
    let (m, n) = (features.rows(), features.cols());
    let d = features.data();
    (0..m)
        .map(|i| d[i * n..(i + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Maps standardized quality scores to clamped non-negative weights:
/// `max(0, w_base + (q - mu) * h / sigma)`.
pub fn adaptive_weights(q: &[f64], stats: &RunningStats, cfg: &QualityConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !stats.is_warmed() {
        return Err(Error::Usage(
            "adaptive weights requested before stats warmup".into(),
        ));
    }
    Ok(q.iter()
        .map(|&qi| (cfg.w_base + (qi - stats.mu_q) * cfg.h / stats.sigma_q).max(0.0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> QualityConfig {
        QualityConfig {
            enabled: true,
            ..QualityConfig::default()
        }
    }

    fn warmed(mu: f64, sigma: f64) -> RunningStats {
        let mut s = RunningStats::new(0.9).unwrap();
        s.update(&[mu - sigma, mu + sigma]).unwrap();
        assert!((s.mu() - mu).abs() < 1e-12);
        assert!((s.sigma() - sigma).abs() < 1e-12);
        s
    }

    #[test]
    fn three_four_five_norm() {
        let f = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(quantify_quality(&f), vec![5.0]);
    }

    #[test]
    fn zero_vector_has_zero_quality() {
        let f = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert_eq!(quantify_quality(&f), vec![0.0]);
    }

    #[test]
    fn quality_is_homogeneous_in_feature_scale() {
        let f = Tensor::matrix(1, 3, vec![1.0, -2.0, 2.0]).unwrap();
        let g = Tensor::matrix(1, 3, vec![2.0, -4.0, 4.0]).unwrap();
        assert!((quantify_quality(&g)[0] - 2.0 * quantify_quality(&f)[0]).abs() < 1e-12);
    }

    #[test]
    fn constant_stream_is_a_fixed_point_of_the_mean() {
        let mut s = RunningStats::new(0.9).unwrap();
        for _ in 0..50 {
            s.update(&[5.0, 5.0, 5.0]).unwrap();
        }
        assert!((s.mu() - 5.0).abs() < 1e-12);
        assert!(s.floor_warnings() > 0); // zero-spread batches hit the floor
    }

    #[test]
    fn ema_step_matches_hand_computation() {
        let mut s = RunningStats::new(0.9).unwrap();
        s.update(&[0.0]).unwrap(); // warmup: mu = 0
        assert_eq!(s.mu(), 0.0);
        s.update(&[10.0]).unwrap();
        assert!((s.mu() - 1.0).abs() < 1e-12); // 0.9*0 + 0.1*10
    }

    #[test]
    fn stats_are_deterministic_over_a_repeated_stream() {
        let batches = [vec![1.0, 2.0], vec![0.5, 3.5], vec![2.0, 2.5, 0.1]];
        let run = || {
            let mut s = RunningStats::new(0.9).unwrap();
            for b in &batches {
                s.update(b).unwrap();
            }
            (s.mu().to_bits(), s.sigma().to_bits())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn centered_quality_gets_exactly_the_base_weight() {
        let s = warmed(5.0, 1.0);
        let w = adaptive_weights(&[5.0], &s, &cfg()).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn one_sigma_above_mean_adds_exactly_h() {
        let s = warmed(5.0, 2.0);
        let w = adaptive_weights(&[7.0], &s, &cfg()).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn four_sigma_below_mean_clamps_to_zero() {
        let s = warmed(5.0, 1.0);
        // raw: 1 + (-4)*(1/3) = -1/3 → clamped
        let w = adaptive_weights(&[1.0], &s, &cfg()).unwrap();
        assert_eq!(w, vec![0.0]);
    }

    #[test]
    fn weights_before_warmup_are_a_usage_error() {
        let s = RunningStats::new(0.9).unwrap();
        assert!(matches!(
            adaptive_weights(&[1.0], &s, &cfg()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn empty_batch_update_is_a_usage_error() {
        let mut s = RunningStats::new(0.9).unwrap();
        assert!(matches!(s.update(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn stationary_stream_mean_weight_settles_at_base() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        let mut s = RunningStats::new(0.9).unwrap();
        let c = cfg();
        let mut mean_w = 0.0;
        for batch in 0..500 {
            let q: Vec<f64> = (0..32).map(|_| 3.0 + rng.gen_range(-1.0..1.0)).collect();
            s.update(&q).unwrap();
            let w = adaptive_weights(&q, &s, &c).unwrap();
            mean_w = w.iter().sum::<f64>() / w.len() as f64;
            let _ = batch;
        }
        assert!(
            (mean_w - c.w_base).abs() <= 0.02 * c.w_base,
            "mean weight {mean_w}"
        );
    }
}
