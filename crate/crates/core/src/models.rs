//! The four networks of the framework: a frozen teacher encoder, a trainable
//! projection head with a skip-mix, a trainable student encoder, and a
//! bias-free classifier shared between the two modalities.
//!
//! All encoders are ReLU multi-layer perceptrons. The projection head is a
//! two-layer MLP (teacher dim → teacher dim → student dim) mixed with its
//! input through `alpha`: the projected teacher feature is
//! `alpha * resize(e_t) + (1 - alpha) * mlp(e_t)`. When the teacher and
//! student embedding widths differ, the skip path goes through a fixed,
//! seeded, row-orthonormalized resize so the mix is well-typed; that resize
//! is frozen and never receives gradients.
//!
//! Parameters live in one [`ParamSet`] under the prefixes `teacher.`,
//! `teacher_head.`, `proj.`, `student.`, and `classifier.`; freezing is by
//! prefix. Checkpoints serialize the full set in name order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamSet, Tape, Tensor, ValueId};

/// Magic bytes opening every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"XMDCKPT1";

/// RNG stream ids carving independent substreams out of one seed.
pub mod streams {
    pub const TEACHER_INIT: u64 = 1;
    pub const TEACHER_HEAD_INIT: u64 = 2;
    pub const PROJ_INIT: u64 = 3;
    pub const PROJ_SKIP_INIT: u64 = 4;
    pub const STUDENT_INIT: u64 = 5;
    pub const CLASSIFIER_INIT: u64 = 6;
    pub const BATCHES: u64 = 7;
    pub const EVAL: u64 = 8;
}

/// Seeded RNG on an independent substream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Shape of one ReLU MLP encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!(
                "encoder dims must all be >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// (fan-in, fan-out) per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embed_dim));
        dims
    }
}

/// Full model-stack shape: both encoders, the projection mix, class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    /// Skip-mix ratio of the projection head, in [0, 1].
    pub alpha: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.teacher.validate()?;
        self.student.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "projection alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// weights, zero biases.
fn init_mlp(
    params: &mut ParamSet,
    prefix: &str,
    dims: &[(usize, usize)],
    trainable: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let scale = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        params.insert(
            &format!("{prefix}.l{layer}.w"),
            Tensor::matrix(fan_in, fan_out, w)?,
            trainable,
        )?;
        params.insert(
            &format!("{prefix}.l{layer}.b"),
            Tensor::zeros(vec![fan_out]),
            trainable,
        )?;
    }
    Ok(())
}

/// MLP forward on the tape: affine + ReLU per layer, final layer linear.
fn mlp_forward(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    layers: usize,
    x: ValueId,
) -> Result<ValueId> {
    let mut h = x;
    for layer in 0..layers {
        let w = tape.param(params, &format!("{prefix}.l{layer}.w"))?;
        let b = tape.param(params, &format!("{prefix}.l{layer}.b"))?;
        h = tape.matmul(h, w)?;
        h = tape.add_row_bias(h, b)?;
        if layer + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Rows-orthonormalized random matrix for the frozen skip resize.
/// Rows beyond the column rank stay as drawn, only normalized.
fn orthonormal_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    for i in 0..rows {
        for j in 0..i.min(cols) {
            let dot: f64 = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
            for k in 0..cols {
                m[i][k] -= dot * m[j][k];
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for v in &mut m[i] {
                *v /= norm;
            }
        }
    }
    m.into_iter().flatten().collect()
}

/// Frozen teacher encoder + trainable projection head, student encoder, and
/// shared classifier over one parameter set.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl ModelBundle {
    /// Initializes every network from independent substreams of `seed`.
    /// The teacher starts trainable (it must be pretrained first) except for
    /// nothing; call [`ModelBundle::freeze_teacher`] once pretraining is done.
    /// The projection skip resize is frozen from construction.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();

        let mut rng = stream_rng(seed, streams::TEACHER_INIT);
        init_mlp(&mut params, "teacher", &cfg.teacher.layer_dims(), true, &mut rng)?;

        let mut rng = stream_rng(seed, streams::TEACHER_HEAD_INIT);
        let scale = 1.0 / (cfg.teacher.embed_dim as f64).sqrt();
        let head: Vec<f64> = (0..cfg.num_classes * cfg.teacher.embed_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        params.insert(
            "teacher_head.w",
            Tensor::matrix(cfg.num_classes, cfg.teacher.embed_dim, head)?,
            true,
        )?;

        let mut rng = stream_rng(seed, streams::PROJ_INIT);
        let t = cfg.teacher.embed_dim;
        let s = cfg.student.embed_dim;
        init_mlp(&mut params, "proj", &[(t, t), (t, s)], true, &mut rng)?;
        if t != s {
            let mut skip_rng = stream_rng(seed, streams::PROJ_SKIP_INIT);
            params.insert(
                "proj.skip.w",
                Tensor::matrix(s, t, orthonormal_rows(s, t, &mut skip_rng))?,
                false,
            )?;
        }

        let mut rng = stream_rng(seed, streams::STUDENT_INIT);
        init_mlp(&mut params, "student", &cfg.student.layer_dims(), true, &mut rng)?;

        let mut rng = stream_rng(seed, streams::CLASSIFIER_INIT);
        let scale = 1.0 / (cfg.student.embed_dim as f64).sqrt();
        let w: Vec<f64> = (0..cfg.num_classes * cfg.student.embed_dim)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        params.insert(
            "classifier.w",
            Tensor::matrix(cfg.num_classes, cfg.student.embed_dim, w)?,
            true,
        )?;

        Ok(ModelBundle { cfg, params })
    }

    /// Freezes the teacher encoder and its pretraining head.
    pub fn freeze_teacher(&mut self) {
        self.params.freeze_prefix("teacher.");
        self.params.freeze_prefix("teacher_head.");
    }

    /// Replaces teacher parameters with checkpointed values and freezes them.
    pub fn load_teacher(&mut self, ckpt: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in ckpt {
            if !(name.starts_with("teacher.") || name.starts_with("teacher_head.")) {
                continue;
            }
            let p = self.params.get_mut(name)?;
            if p.value.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} for {name:?} does not match model shape {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = tensor.clone();
        }
        self.freeze_teacher();
        Ok(())
    }

    /// Replaces every parameter from a full-bundle checkpoint.
    pub fn load_all(&mut self, ckpt: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in ckpt {
            let p = self.params.get_mut(name)?;
            if p.value.shape() != tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint shape {:?} for {name:?} does not match model shape {:?}",
                    tensor.shape(),
                    p.value.shape()
                )));
            }
            p.value = tensor.clone();
        }
        self.freeze_teacher();
        Ok(())
    }

    pub fn student_layers(&self) -> usize {
        self.cfg.student.hidden.len() + 1
    }

    pub fn teacher_layers(&self) -> usize {
        self.cfg.teacher.hidden.len() + 1
    }

    /// Student encoder forward on a tape (trainable path).
    pub fn encode_student(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        mlp_forward(tape, &self.params, "student", self.student_layers(), x)
    }

    /// Teacher encoder forward on a tape. Used during pretraining while the
    /// teacher is still trainable; after freezing, gradients stop at the
    /// parameter leaves by the frozen contract.
    pub fn encode_teacher_on_tape(&self, tape: &mut Tape, x: ValueId) -> Result<ValueId> {
        mlp_forward(tape, &self.params, "teacher", self.teacher_layers(), x)
    }

    /// Projection head on a tape: `alpha * resize(e_t) + (1-alpha) * mlp(e_t)`.
    /// Gradient flows into the projection MLP only; the resize is frozen.
    pub fn project(&self, tape: &mut Tape, e_t: ValueId) -> Result<ValueId> {
        let alpha = self.cfg.alpha;
        let skip = if self.cfg.teacher.embed_dim == self.cfg.student.embed_dim {
            e_t
        } else {
            let w = tape.param(&self.params, "proj.skip.w")?;
            tape.matmul_nt(e_t, w)?
        };
        let h = mlp_forward(tape, &self.params, "proj", 2, e_t)?;
        let a = tape.scale(skip, alpha)?;
        let b = tape.scale(h, 1.0 - alpha)?;
        tape.add(a, b)
    }

    /// Shared classifier logits on a tape: `f · wᵀ`, no bias.
    pub fn classify(&self, tape: &mut Tape, f: ValueId) -> Result<ValueId> {
        let w = tape.param(&self.params, "classifier.w")?;
        if self.cfg.student.embed_dim != tape.value(f).cols() {
            return Err(Error::Config(format!(
                "classifier expects {}-dim features, got {}",
                self.cfg.student.embed_dim,
                tape.value(f).cols()
            )));
        }
        tape.matmul_nt(f, w)
    }

    /// Teacher pretraining head logits on a tape.
    pub fn teacher_head(&self, tape: &mut Tape, e_t: ValueId) -> Result<ValueId> {
        let w = tape.param(&self.params, "teacher_head.w")?;
        tape.matmul_nt(e_t, w)
    }

    fn eval_via_tape(
        &self,
        x: &Tensor,
        f: impl Fn(&Self, &mut Tape, ValueId) -> Result<ValueId>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xi = tape.input(x);
        let out = f(self, &mut tape, xi)?;
        Ok(tape.value(out).clone())
    }

    /// Teacher embedding of a batch, off any gradient path.
    pub fn encode_teacher(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.cfg.teacher.input_dim {
            return Err(Error::Config(format!(
                "teacher expects {}-dim inputs, got {}",
                self.cfg.teacher.input_dim,
                x.cols()
            )));
        }
        self.eval_via_tape(x, Self::encode_teacher_on_tape)
    }

    /// Student embedding of a batch, off any gradient path.
    pub fn encode_student_eval(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.cfg.student.input_dim {
            return Err(Error::Config(format!(
                "student expects {}-dim inputs, got {}",
                self.cfg.student.input_dim,
                x.cols()
            )));
        }
        self.eval_via_tape(x, Self::encode_student)
    }

    /// Projected teacher embedding of a batch, off any gradient path.
    pub fn project_eval(&self, e_t: &Tensor) -> Result<Tensor> {
        self.eval_via_tape(e_t, Self::project)
    }

    /// Classifier logits of a feature batch, off any gradient path.
    pub fn classify_eval(&self, f: &Tensor) -> Result<Tensor> {
        self.eval_via_tape(f, Self::classify)
    }

    /// Teacher-head logits of a teacher-embedding batch, off any gradient path.
    pub fn teacher_head_eval(&self, e_t: &Tensor) -> Result<Tensor> {
        self.eval_via_tape(e_t, Self::teacher_head)
    }
}

/// Writes every parameter (name order) as: name length (u16 LE), UTF-8 name,
/// rank (u8), dims (u32 LE each), data (f64 LE each).
pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, p) in params.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("parameter name too long: {name:?}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = p.value.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Config(format!("parameter rank too large: {name:?}")));
        }
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(Error::Format {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            }),
            Err(e) => Err(e.into()),
        }
    }

    /// Returns false at a clean end of stream, true if a byte is pending
    /// (pushed back into `pending`).
    fn at_eof(&mut self, pending: &mut Option<u8>) -> Result<bool> {
        let mut one = [0u8; 1];
        match self.inner.read(&mut one)? {
            0 => Ok(true),
            _ => {
                self.offset += 1;
                *pending = Some(one[0]);
                Ok(false)
            }
        }
    }
}

/// Reads a checkpoint back as (name, tensor) pairs in stored order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut r = CountingReader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(CHECKPOINT_MAGIC)
            ),
        });
    }
    let mut out = Vec::new();
    loop {
        let mut pending = None;
        if r.at_eof(&mut pending)? {
            break;
        }
        let mut len_bytes = [0u8; 2];
        len_bytes[0] = pending.expect("pending byte after non-eof");
        r.read_exact_at(&mut len_bytes[1..], "name length")?;
        let name_len = u16::from_le_bytes(len_bytes) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact_at(&mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| Error::Format {
            offset: r.offset,
            message: "parameter name is not UTF-8".into(),
        })?;
        let mut rank = [0u8; 1];
        r.read_exact_at(&mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut dim = [0u8; 4];
            r.read_exact_at(&mut dim, "dimension")?;
            shape.push(u32::from_le_bytes(dim) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = [0u8; 8];
            r.read_exact_at(&mut v, "tensor data")?;
            data.push(f64::from_le_bytes(v));
        }
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format {
            offset: r.offset,
            message: format!("invalid tensor for {name:?}: {e}"),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            teacher: EncoderConfig {
                input_dim: 6,
                hidden: vec![8],
                embed_dim: 5,
            },
            student: EncoderConfig {
                input_dim: 4,
                hidden: vec![7],
                embed_dim: 3,
            },
            alpha: 0.6,
            num_classes: 4,
        }
    }

    #[test]
    fn zero_weight_teacher_maps_any_input_to_zero() {
        let mut bundle = ModelBundle::init(small_cfg(), 1).unwrap();
        for prefix_layer in ["teacher.l0.w", "teacher.l0.b", "teacher.l1.w", "teacher.l1.b"] {
            let p = bundle.params.get_mut(prefix_layer).unwrap();
            let zeros = Tensor::zeros(p.value.shape().to_vec());
            p.value = zeros;
        }
        let x = Tensor::matrix(2, 6, vec![3.0; 12]).unwrap();
        let e = bundle.encode_teacher(&x).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn teacher_embedding_is_deterministic() {
        let bundle = ModelBundle::init(small_cfg(), 9).unwrap();
        let x = Tensor::matrix(1, 6, vec![0.5, -2.0, 1.0, 0.0, 3.0, -1.0]).unwrap();
        let a = bundle.encode_teacher(&x).unwrap();
        let b = bundle.encode_teacher(&x).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn alpha_one_returns_the_resized_embedding_exactly() {
        let mut cfg = small_cfg();
        cfg.alpha = 1.0;
        let bundle = ModelBundle::init(cfg, 3).unwrap();
        let e_t = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let f_t = bundle.project_eval(&e_t).unwrap();

        let mut tape = Tape::new();
        let e = tape.input(&e_t);
        let w = tape.param(&bundle.params, "proj.skip.w").unwrap();
        let resized = tape.matmul_nt(e, w).unwrap();
        assert_eq!(f_t.data(), tape.value(resized).data());
    }

    #[test]
    fn alpha_one_with_equal_dims_is_the_identity() {
        let mut cfg = small_cfg();
        cfg.student.embed_dim = cfg.teacher.embed_dim;
        cfg.alpha = 1.0;
        let bundle = ModelBundle::init(cfg, 3).unwrap();
        assert!(!bundle.params.contains("proj.skip.w"));
        let e_t = Tensor::matrix(1, 5, vec![1.0, -2.0, 0.5, 0.0, 4.0]).unwrap();
        let f_t = bundle.project_eval(&e_t).unwrap();
        assert_eq!(f_t.data(), e_t.data());
    }

    #[test]
    fn skip_mix_is_the_stated_convex_combination() {
        // alpha=0.6, resize(e)=[1,0], mlp(e)=[0,1] → [0.6, 0.4]
        let cfg = ModelConfig {
            teacher: EncoderConfig {
                input_dim: 2,
                hidden: vec![2],
                embed_dim: 2,
            },
            student: EncoderConfig {
                input_dim: 2,
                hidden: vec![2],
                embed_dim: 2,
            },
            alpha: 0.6,
            num_classes: 2,
        };
        let mut bundle = ModelBundle::init(cfg, 5).unwrap();
        // Force the projection MLP to the constant map e ↦ [0, 1]:
        // zero weights, bias [0,1] on the output layer.
        for name in ["proj.l0.w", "proj.l0.b", "proj.l1.w"] {
            let p = bundle.params.get_mut(name).unwrap();
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        bundle.params.get_mut("proj.l1.b").unwrap().value =
            Tensor::vector(&[0.0, 1.0]).unwrap();
        let e_t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let f_t = bundle.project_eval(&e_t).unwrap();
        assert_eq!(f_t.data(), &[0.6, 0.4]);
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let mut cfg = small_cfg();
        cfg.alpha = 1.2;
        assert!(matches!(ModelBundle::init(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn identity_classifier_passes_one_hot_features_through() {
        let mut cfg = small_cfg();
        cfg.num_classes = 3;
        cfg.student.embed_dim = 3;
        let mut bundle = ModelBundle::init(cfg, 2).unwrap();
        bundle.params.get_mut("classifier.w").unwrap().value =
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let f = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let logits = bundle.classify_eval(&f).unwrap();
        assert_eq!(logits.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_classifier_gives_uniform_logits() {
        let mut bundle = ModelBundle::init(small_cfg(), 2).unwrap();
        let p = bundle.params.get_mut("classifier.w").unwrap();
        p.value = Tensor::zeros(p.value.shape().to_vec());
        let f = Tensor::matrix(2, 3, vec![0.3, -2.0, 5.0, 1.0, 1.0, 1.0]).unwrap();
        let logits = bundle.classify_eval(&f).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_resize_rows_are_orthonormal() {
        let bundle = ModelBundle::init(small_cfg(), 11).unwrap();
        let w = &bundle.params.get("proj.skip.w").unwrap().value;
        let (rows, cols) = (w.rows(), w.cols());
        for i in 0..rows {
            for j in 0..=i {
                let dot: f64 = (0..cols).map(|k| w.at(i, k) * w.at(j, k)).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "rows {i},{j}: {dot}");
            }
        }
        assert!(!bundle.params.get("proj.skip.w").unwrap().trainable);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let bundle = ModelBundle::init(small_cfg(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.ckpt");
        save_checkpoint(&path, &bundle.params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), bundle.params.len());
        for (name, tensor) in &loaded {
            assert!(bundle.params.get(name).unwrap().value.bits_eq(tensor));
        }
        // Full save → load → save produces identical bytes.
        let mut bundle2 = ModelBundle::init(small_cfg(), 999).unwrap();
        bundle2.load_all(&loaded).unwrap();
        let path2 = dir.path().join("bundle2.ckpt");
        save_checkpoint(&path2, &bundle2.params).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("XMDCKPT1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error_with_offset() {
        let bundle = ModelBundle::init(small_cfg(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&path, &bundle.params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
