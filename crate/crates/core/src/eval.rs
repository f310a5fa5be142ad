//! Verification and classification metrics: equal error rate, minimum
//! detection cost, closed-set accuracy, and forced-choice cross-modal
//! matching.
//!
//! Scores follow the higher-is-more-similar convention (cosine similarity
//! of embeddings). Threshold sweeps visit every observed score plus one
//! sentinel above the maximum, so both the accept-everything and
//! reject-everything operating points are reachable. At a threshold `t`,
//! the false-rejection rate is the fraction of target scores strictly below
//! `t` and the false-acceptance rate is the fraction of nontarget scores at
//! or above `t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Scores of same-class (target) and different-class (nontarget) trials.
#[derive(Debug, Clone, Default)]
pub struct TrialSet {
    pub target: Vec<f64>,
    pub nontarget: Vec<f64>,
}

impl TrialSet {
    fn validate(&self) -> Result<()> {
        if self.target.is_empty() || self.nontarget.is_empty() {
            return Err(Error::Usage(
                "trial set needs both target and nontarget scores".into(),
            ));
        }
        if !self
            .target
            .iter()
            .chain(&self.nontarget)
            .all(|v| v.is_finite())
        {
            return Err(Error::Data("non-finite trial score".into()));
        }
        Ok(())
    }

    /// Candidate thresholds: every distinct score ascending, then a sentinel
    /// above the maximum (the reject-everything operating point).
    fn thresholds(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.target.iter().chain(&self.nontarget).cloned().collect();
        t.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        t.dedup();
        let max = *t.last().expect("non-empty");
        t.push(max + 1.0 + max.abs());
        t
    }
}

fn rates_at(sorted_targets: &[f64], sorted_nontargets: &[f64], threshold: f64) -> (f64, f64) {
    let below_t = sorted_targets.partition_point(|&v| v < threshold);
    let frr = below_t as f64 / sorted_targets.len() as f64;
    let below_n = sorted_nontargets.partition_point(|&v| v < threshold);
    let far = (sorted_nontargets.len() - below_n) as f64 / sorted_nontargets.len() as f64;
    (frr, far)
}

/// Equal error rate: the midpoint of the false-acceptance and
/// false-rejection rates at the threshold minimizing their gap, ties broken
/// toward the lower threshold.
pub fn compute_eer(trials: &TrialSet) -> Result<f64> {
    trials.validate()?;
    let mut targets = trials.target.clone();
    let mut nontargets = trials.nontarget.clone();
    targets.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    nontargets.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut best_gap = f64::INFINITY;
    let mut best = 0.0;
    for t in trials.thresholds() {
        let (frr, far) = rates_at(&targets, &nontargets, t);
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = (far + frr) / 2.0;
        }
    }
    Ok(best)
}

/// Minimum detection cost over the same threshold sweep:
/// `c_miss * P_miss * p_tar + c_fa * P_fa * (1 - p_tar)`.
pub fn compute_min_dcf(trials: &TrialSet, p_tar: f64, c_miss: f64, c_fa: f64) -> Result<f64> {
    if !(0.0 < p_tar && p_tar < 1.0) {
        return Err(Error::Config(format!(
            "p_tar must lie strictly inside (0,1), got {p_tar}"
        )));
    }
    if c_miss <= 0.0 || c_fa <= 0.0 {
        return Err(Error::Config("detection costs must be positive".into()));
    }
    trials.validate()?;
    let mut targets = trials.target.clone();
    let mut nontargets = trials.nontarget.clone();
    targets.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    nontargets.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut best = f64::INFINITY;
    for t in trials.thresholds() {
        let (p_miss, p_fa) = rates_at(&targets, &nontargets, t);
        let c = c_miss * p_miss * p_tar + c_fa * p_fa * (1.0 - p_tar);
        if c < best {
            best = c;
        }
    }
    Ok(best)
}

/// Fraction of rows whose argmax logit matches the label; argmax ties break
/// toward the lowest class index.
pub fn classification_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (m, c) = (logits.rows(), logits.cols());
    debug_assert_eq!(m, labels.len());
    let mut correct = 0usize;
    for i in 0..m {
        let row = logits.row(i);
        let mut arg = 0usize;
        for j in 1..c {
            if row[j] > row[arg] {
                arg = j;
            }
        }
        if arg == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / m.max(1) as f64
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data(
            "cosine score undefined for zero-norm embedding".into(),
        ));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index pairs defining a verification trial list, before scoring.
#[derive(Debug, Clone)]
pub struct TrialPairs {
    pub target: Vec<(usize, usize)>,
    pub nontarget: Vec<(usize, usize)>,
}

/// Seeded enumeration of same-class and cross-class index pairs, capped by
/// uniform subsampling without replacement. Singleton classes contribute no
/// target pairs; an empty target side is a usage error.
pub fn sample_trial_pairs(
    labels: &[usize],
    target_cap: usize,
    nontarget_cap: usize,
    seed: u64,
) -> Result<TrialPairs> {
    let n = labels.len();
    let mut target = Vec::new();
    let mut nontarget = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if labels[i] == labels[j] {
                target.push((i, j));
            } else {
                nontarget.push((i, j));
            }
        }
    }
    if target.is_empty() {
        return Err(Error::Usage(
            "no target pairs: every class is a singleton".into(),
        ));
    }
    if nontarget.is_empty() {
        return Err(Error::Usage("need at least 2 classes for trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7215);
    subsample(&mut target, target_cap, &mut rng);
    subsample(&mut nontarget, nontarget_cap, &mut rng);
    Ok(TrialPairs { target, nontarget })
}

/// Partial Fisher-Yates: keeps a uniform sample of `cap` items in place.
fn subsample<T>(items: &mut Vec<T>, cap: usize, rng: &mut ChaCha8Rng) {
    if items.len() <= cap {
        return;
    }
    for i in 0..cap {
        let j = rng.gen_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(cap);
}

/// Scores trial pairs by cosine similarity, averaged over all crop
/// combinations when more than one embedding per sample is supplied.
pub fn score_trials(crops: &[Tensor], pairs: &TrialPairs) -> Result<TrialSet> {
    if crops.is_empty() {
        return Err(Error::Usage("need at least one embedding crop".into()));
    }
    let score = |i: usize, j: usize| -> Result<f64> {
        let mut acc = 0.0;
        for ci in crops {
            for cj in crops {
                acc += cosine(ci.row(i), cj.row(j))?;
            }
        }
        Ok(acc / (crops.len() * crops.len()) as f64)
    };
    let mut out = TrialSet::default();
    for &(i, j) in &pairs.target {
        out.target.push(score(i, j)?);
    }
    for &(i, j) in &pairs.nontarget {
        out.nontarget.push(score(i, j)?);
    }
    Ok(out)
}

/// Convenience wrapper: enumerate, cap, and score trials over one embedding
/// batch.
pub fn build_trials(
    embeddings: &Tensor,
    labels: &[usize],
    target_cap: usize,
    nontarget_cap: usize,
    seed: u64,
) -> Result<TrialSet> {
    let pairs = sample_trial_pairs(labels, target_cap, nontarget_cap, seed)?;
    score_trials(std::slice::from_ref(embeddings), &pairs)
}

/// Distractor selection rule for forced-choice matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchProtocol {
    /// Distractor from any other class.
    Original,
    /// Distractor from another class in the same nuisance group.
    Hard,
}

/// Forced-choice cross-modal matching: for each trial draw an anchor from
/// one modality and two candidates from the other (one sharing the anchor's
/// label, one distractor per protocol); the higher cosine similarity wins.
/// Returns the fraction of correct choices. If the hard protocol finds no
/// other class in the anchor's group, the trial falls back to the original
/// distractor pool.
pub fn cross_modal_matching(
    anchors: &Tensor,
    anchor_labels: &[usize],
    candidates: &Tensor,
    candidate_labels: &[usize],
    class_groups: &[u8],
    protocol: MatchProtocol,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if anchors.rows() != anchor_labels.len() || candidates.rows() != candidate_labels.len() {
        return Err(Error::Config("labels do not match embedding rows".into()));
    }
    if trials == 0 {
        return Err(Error::Usage("need at least one matching trial".into()));
    }
    let mut classes: Vec<usize> = candidate_labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Usage(
            "forced-choice matching needs at least 2 candidate classes".into(),
        ));
    }
    let by_class = |label: usize| -> Vec<usize> {
        (0..candidate_labels.len())
            .filter(|&i| candidate_labels[i] == label)
            .collect()
    };
    let pools: std::collections::BTreeMap<usize, Vec<usize>> =
        classes.iter().map(|&c| (c, by_class(c))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x3A7C);
    let mut correct = 0usize;
    for _ in 0..trials {
        let a = rng.gen_range(0..anchors.rows());
        let label = anchor_labels[a];
        let positives = pools.get(&label).filter(|p| !p.is_empty()).ok_or_else(|| {
            Error::Usage(format!("anchor class {label} has no candidates"))
        })?;
        let pos = positives[rng.gen_range(0..positives.len())];

        let group = class_groups
            .get(label)
            .copied()
            .ok_or_else(|| Error::Config(format!("class {label} has no nuisance group")))?;
        let eligible: Vec<usize> = match protocol {
            MatchProtocol::Original => classes.iter().cloned().filter(|&c| c != label).collect(),
            MatchProtocol::Hard => {
                let same_group: Vec<usize> = classes
                    .iter()
                    .cloned()
                    .filter(|&c| c != label && class_groups.get(c) == Some(&group))
                    .collect();
                if same_group.is_empty() {
                    classes.iter().cloned().filter(|&c| c != label).collect()
                } else {
                    same_group
                }
            }
        };
        let d_class = eligible[rng.gen_range(0..eligible.len())];
        let d_pool = &pools[&d_class];
        let neg = d_pool[rng.gen_range(0..d_pool.len())];

        let s_pos = cosine(anchors.row(a), candidates.row(pos))?;
        let s_neg = cosine(anchors.row(a), candidates.row(neg))?;
        if s_pos > s_neg {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials as f64)
}

/// Forced-choice matching accuracies in both directions under both
/// protocols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub student_to_teacher_original: f64,
    pub teacher_to_student_original: f64,
    pub student_to_teacher_hard: f64,
    pub teacher_to_student_hard: f64,
    pub trials: usize,
}

/// Open-set EER under one injected-noise condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyEer {
    pub delta_db: f64,
    pub eer: f64,
}

/// One epoch of training-time diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_eer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sigma_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_weight: Option<f64>,
}

/// Full evaluation of one trained run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub accuracy: f64,
    pub matching: MatchingReport,
    pub noisy_eer: Vec<NoisyEer>,
    pub epochs: Vec<EpochTrace>,
    pub config_echo: serde_json::Value,
    pub seed: u64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.eer,
            self.accuracy,
            self.matching.student_to_teacher_original,
            self.matching.teacher_to_student_original,
            self.matching.student_to_teacher_hard,
            self.matching.teacher_to_student_hard,
        ];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Internal("metric rate outside [0,1]".into()));
        }
        if self.min_dcf < 0.0 {
            return Err(Error::Internal("negative minDCF".into()));
        }
        Ok(())
    }

    /// Long-format CSV rows: `run id, mode, metric, value, seed`.
    pub fn csv_rows(&self, run_id: &str, mode: &str) -> Vec<String> {
        let mut rows = vec![
            format!("{run_id},{mode},eer,{},{}", self.eer, self.seed),
            format!("{run_id},{mode},min_dcf,{},{}", self.min_dcf, self.seed),
            format!("{run_id},{mode},accuracy,{},{}", self.accuracy, self.seed),
            format!(
                "{run_id},{mode},matching_s2t_original,{},{}",
                self.matching.student_to_teacher_original, self.seed
            ),
            format!(
                "{run_id},{mode},matching_t2s_original,{},{}",
                self.matching.teacher_to_student_original, self.seed
            ),
            format!(
                "{run_id},{mode},matching_s2t_hard,{},{}",
                self.matching.student_to_teacher_hard, self.seed
            ),
            format!(
                "{run_id},{mode},matching_t2s_hard,{},{}",
                self.matching.teacher_to_student_hard, self.seed
            ),
        ];
        for n in &self.noisy_eer {
            rows.push(format!(
                "{run_id},{mode},eer_delta_db_{},{},{}",
                n.delta_db, n.eer, self.seed
            ));
        }
        rows
    }
}
