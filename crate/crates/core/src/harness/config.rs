//! Experiment configuration: a single JSON document with dotted-path
//! overrides, fully-resolved echoing, and a content hash for grouping runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BatchSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::models::{EncoderConfig, ModelConfig};
use crate::numeric::{Optimizer, OptimizerKind};

/// Where the benchmark comes from: generated inline or loaded from a
/// directory written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Encoder widths for both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub teacher_hidden: Vec<usize>,
    pub teacher_embed: usize,
    pub student_hidden: Vec<usize>,
    pub student_embed: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            teacher_hidden: vec![64],
            teacher_embed: 32,
            student_hidden: vec![64],
            student_embed: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum coefficient.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-5,
            lr_decay: 0.75,
            lr_decay_every: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn build(&self) -> Result<Optimizer> {
        match self.kind {
            OptimizerKind::SgdMomentum => {
                Optimizer::sgd_momentum(self.learning_rate, self.momentum, self.weight_decay)
            }
            OptimizerKind::Adam => Optimizer::adam(
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                self.weight_decay,
            ),
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.lr_decay_every == 0 {
            return self.learning_rate;
        }
        self.learning_rate * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0,1]".into()));
        }
        Ok(())
    }
}

/// Teacher pretraining settings. The weak-teacher preset keeps the same
/// recipe on a quarter of the pretraining split (`data_fraction = 0.25`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub data_fraction: f64,
    pub optimizer: OptimizerConfig,
    pub batch: BatchSpec,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            epochs: 20,
            data_fraction: 1.0,
            optimizer: OptimizerConfig::default(),
            batch: BatchSpec {
                classes_per_batch: 50,
                samples_per_class: 4,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub target_cap: usize,
    pub nontarget_cap: usize,
    pub matching_trials: usize,
    pub delta_db: Vec<f64>,
    /// Embedding crops per sample when scoring trials.
    pub crops: usize,
    pub p_tar: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            target_cap: 2000,
            nontarget_cap: 4000,
            matching_trials: 2000,
            delta_db: vec![15.0, 10.0, 5.0],
            crops: 1,
            p_tar: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Everything one run needs. Serializable; together with the code version it
/// determines all outputs bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelDims,
    pub optimizer: OptimizerConfig,
    pub teacher: TeacherConfig,
    pub epochs: usize,
    pub batch: BatchSpec,
    /// Fraction of the student training split to use (small-data runs).
    pub train_fraction: f64,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::default(),
            model: ModelDims::default(),
            optimizer: OptimizerConfig::default(),
            teacher: TeacherConfig::default(),
            epochs: 30,
            batch: BatchSpec {
                classes_per_batch: 20,
                samples_per_class: 2,
            },
            train_fraction: 1.0,
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            seed: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if self.model.teacher_embed == 0
            || self.model.student_embed == 0
            || self.model.teacher_hidden.iter().any(|&h| h == 0)
            || self.model.student_hidden.iter().any(|&h| h == 0)
        {
            return Err(Error::Config("model dims must all be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.teacher.optimizer.validate()?;
        if self.epochs == 0 || self.teacher.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0,1]".into()));
        }
        if !(0.0 < self.teacher.data_fraction && self.teacher.data_fraction <= 1.0) {
            return Err(Error::Config("teacher.data_fraction must lie in (0,1]".into()));
        }
        self.distill.validate()?;
        if self.eval.target_cap == 0 || self.eval.nontarget_cap == 0 {
            return Err(Error::Config("eval trial caps must be >= 1".into()));
        }
        if self.eval.crops == 0 {
            return Err(Error::Config("eval.crops must be >= 1".into()));
        }
        Ok(())
    }

    /// Model shape against a concrete dataset spec: input dims come from the
    /// observations, the classifier covers the training classes, and the
    /// projection mix ratio comes from the distillation config.
    pub fn model_config(&self, data_spec: &SyntheticSpec) -> ModelConfig {
        ModelConfig {
            teacher: EncoderConfig {
                input_dim: data_spec.teacher_obs_dim,
                hidden: self.model.teacher_hidden.clone(),
                embed_dim: self.model.teacher_embed,
            },
            student: EncoderConfig {
                input_dim: data_spec.student_obs_dim,
                hidden: self.model.student_hidden.clone(),
                embed_dim: self.model.student_embed,
            },
            alpha: self.distill.alpha,
            num_classes: data_spec.num_classes,
        }
    }

    /// Sets the run seed everywhere it matters: training streams and, for
    /// inline synthetic data, the generation seed, so one seed names one
    /// full replicate.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        if let DataSource::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
        cfg
    }
}

/// Reads a config JSON document, or the built-in defaults when no path is
/// given.
pub fn load_config_value(path: Option<&Path>) -> Result<serde_json::Value> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("malformed config {}: {e}", p.display())))
        }
        None => Ok(serde_json::to_value(ExperimentConfig::default())?),
    }
}

/// Applies `key.path=value` overrides onto a config document. Values parse
/// as JSON when possible and fall back to strings.
pub fn apply_set_overrides(doc: &mut serde_json::Value, sets: &[String]) -> Result<()> {
    for set in sets {
        let (path, raw) = set.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key.path=value, got {set:?}"))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let segments: Vec<&str> = path.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("empty path segment in {set:?}")));
        }
        let (last, intermediate) = segments.split_last().expect("split_once guarantees one");
        let mut node = &mut *doc;
        for seg in intermediate {
            let obj = node.as_object_mut().ok_or_else(|| {
                Error::Config(format!("path {path:?} does not address an object"))
            })?;
            node = obj
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("path {path:?} does not address an object")))?;
        obj.insert(last.to_string(), value);
    }
    Ok(())
}

/// Deserializes and validates a config document into the typed form.
pub fn resolve_config(doc: serde_json::Value) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_value(doc)
        .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Content hash of a config with the replicate-identity fields (seeds)
/// removed, so runs differing only by seed group together.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut value = serde_json::to_value(cfg)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("seed");
        if let Some(data) = obj.get_mut("data").and_then(|d| d.as_object_mut()) {
            if let Some(spec) = data.get_mut("synthetic").and_then(|s| s.as_object_mut()) {
                spec.remove("seed");
            }
        }
    }
    let canonical = serde_json::to_string(&value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest[..6].iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let doc = serde_json::to_value(&cfg).unwrap();
        let back = resolve_config(doc).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn dotted_overrides_reach_nested_fields() {
        let mut doc = serde_json::to_value(ExperimentConfig::default()).unwrap();
        apply_set_overrides(
            &mut doc,
            &[
                "distill.margin_deg=10".to_string(),
                "distill.quality.enabled=true".to_string(),
                "data.synthetic.num_classes=12".to_string(),
                "epochs=3".to_string(),
            ],
        )
        .unwrap();
        let cfg = resolve_config(doc).unwrap();
        assert_eq!(cfg.distill.margin_deg, 10.0);
        assert!(cfg.distill.quality.enabled);
        assert_eq!(cfg.epochs, 3);
        match &cfg.data {
            DataSource::Synthetic(s) => assert_eq!(s.num_classes, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_hash_ignores_seeds_but_not_substance() {
        let cfg = ExperimentConfig::default();
        let h1 = config_hash(&cfg).unwrap();
        let h2 = config_hash(&cfg.with_seed(999)).unwrap();
        assert_eq!(h1, h2);
        let mut other = cfg.clone();
        other.distill.margin_deg = 11.0;
        assert_ne!(h1, config_hash(&other).unwrap());
    }

    #[test]
    fn bad_override_paths_are_config_errors() {
        let mut doc = serde_json::to_value(ExperimentConfig::default()).unwrap();
        assert!(apply_set_overrides(&mut doc, &["no_equals_sign".into()]).is_err());
        assert!(apply_set_overrides(&mut doc, &["epochs.deep=1".into()]).is_err());
    }

    #[test]
    fn lr_schedule_decays_stepwise() {
        let opt = OptimizerConfig::default();
        assert_eq!(opt.lr_at_epoch(0), 1e-3);
        assert_eq!(opt.lr_at_epoch(2), 1e-3);
        assert!((opt.lr_at_epoch(3) - 0.75e-3).abs() < 1e-12);
        assert!((opt.lr_at_epoch(7) - 1e-3 * 0.75 * 0.75).abs() < 1e-12);
    }
}
