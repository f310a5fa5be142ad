//! Synthetic paired-modality benchmark with controllable shared/specific
//! structure, dB-calibrated noise injection, class-balanced batching, and a
//! fixed-endianness binary dataset format.
//!
//! Generation is linear-Gaussian so desk oracles can verify its claims. Each
//! class has a shared latent center; each sample perturbs it, appends
//! independent modality-specific latents scaled by the specificity ratio,
//! and mixes through fixed seeded matrices into the two observation spaces:
//!
//! ```text
//! x_t = A_t · [z ; sqrt(rho) * s_t] + eps_t
//! x_s = A_s · [z ; sqrt(rho) * s_s] + eps_s
//! ```
//!
//! Both observations of one pair share the same `z` draw, the same label,
//! and the same per-sample noise level, drawn log-uniformly from the
//! configured range; that hidden noise level is the ground-truth quality the
//! feature-norm proxy is supposed to track.
//!
//! Splits are deterministic functions of the seed: a teacher-only enlarged
//! pretraining split, train/val/closed-test splits over the training
//! classes, and an open-set split over held-out classes that never appear
//! in training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Magic bytes opening every dataset file.
pub const DATA_MAGIC: &[u8; 8] = b"XMDDATA1";

/// Generation parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Training classes.
    pub num_classes: usize,
    /// Paired training samples per class.
    pub samples_per_class: usize,
    /// Validation samples per class (training classes).
    pub val_per_class: usize,
    /// Closed-set test samples per class (training classes).
    pub test_per_class: usize,
    /// Held-out classes for open-set verification, disjoint from training.
    pub open_classes: usize,
    /// Samples per open-set class.
    pub open_per_class: usize,
    /// Multiplier on `samples_per_class` for the teacher-only pretraining
    /// split.
    pub teacher_factor: usize,
    /// Shared latent dimension `k`.
    pub shared_dim: usize,
    /// Modality-specific latent dimension `s`.
    pub specific_dim: usize,
    /// Teacher observation dimension.
    pub teacher_obs_dim: usize,
    /// Student observation dimension.
    pub student_obs_dim: usize,
    /// Specificity ratio in [0,1]: energy scale of modality-specific latents.
    pub specificity: f64,
    /// Per-sample noise sigma range (log-uniform draw).
    pub sigma_lo: f64,
    pub sigma_hi: f64,
    /// Within-class spread of the shared latent.
    pub class_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 100,
            samples_per_class: 40,
            val_per_class: 10,
            test_per_class: 10,
            open_classes: 20,
            open_per_class: 20,
            teacher_factor: 4,
            shared_dim: 8,
            specific_dim: 8,
            teacher_obs_dim: 48,
            student_obs_dim: 32,
            specificity: 0.6,
            sigma_lo: 0.1,
            sigma_hi: 1.0,
            class_spread: 0.35,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 || self.specific_dim == 0 {
            return Err(Error::Config("latent dims must be >= 1".into()));
        }
        let latent = self.shared_dim + self.specific_dim;
        if self.teacher_obs_dim < latent || self.student_obs_dim < latent {
            return Err(Error::Config(format!(
                "observation dims ({}, {}) must be >= shared+specific ({latent})",
                self.teacher_obs_dim, self.student_obs_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.specificity) {
            return Err(Error::Config(format!(
                "specificity must lie in [0,1], got {}",
                self.specificity
            )));
        }
        if !(self.sigma_lo > 0.0) || self.sigma_lo > self.sigma_hi {
            return Err(Error::Config(format!(
                "need 0 < sigma_lo <= sigma_hi, got [{}, {}]",
                self.sigma_lo, self.sigma_hi
            )));
        }
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "need >= 2 training classes with >= 1 sample".into(),
            ));
        }
        if self.class_spread < 0.0 {
            return Err(Error::Config("class_spread must be >= 0".into()));
        }
        Ok(())
    }

    /// Training classes plus held-out open-set classes.
    pub fn total_classes(&self) -> usize {
        self.num_classes + self.open_classes
    }
}

/// One paired training item. `noise_sigma` is the hidden generative noise
/// level, retained for diagnostics only.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub x_teacher: Vec<f64>,
    pub x_student: Vec<f64>,
    pub label: usize,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    TeacherPretrain,
    Train,
    Val,
    TestClosed,
    TestOpen,
}

impl Split {
    pub fn file_stem(&self) -> &'static str {
        match self {
            Split::TeacherPretrain => "teacher_pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::TestClosed => "test_closed",
            Split::TestOpen => "test_open",
        }
    }

    pub fn all() -> [Split; 5] {
        [
            Split::TeacherPretrain,
            Split::Train,
            Split::Val,
            Split::TestClosed,
            Split::TestOpen,
        ]
    }
}

/// One split of the benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub spec: SyntheticSpec,
    pub split: Split,
    pub samples: Vec<PairedSample>,
    /// Nuisance group per global class id: the sign of the first shared
    /// latent coordinate of the class center. Drives the hard matching
    /// protocol.
    pub class_groups: Vec<u8>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct labels present, sorted.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.samples.iter().map(|s| s.label).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Teacher inputs of the listed samples as a rank-2 batch.
    pub fn teacher_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.samples[i].x_teacher.clone()).collect();
        Tensor::from_rows(&rows)
    }

    /// Student inputs of the listed samples as a rank-2 batch.
    pub fn student_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.samples[i].x_student.clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Keeps a seeded per-class fraction of the samples (used by the
    /// small-data and weak-teacher presets). Fraction 1.0 is the identity.
    pub fn subsample_fraction(&self, fraction: f64, seed: u64) -> Result<PairedDataset> {
        if !(0.0 < fraction && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must lie in (0,1], got {fraction}"
            )));
        }
        if (fraction - 1.0).abs() < 1e-12 {
            return Ok(self.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0xF2AC);
        let mut keep = Vec::new();
        for class in self.class_ids() {
            let mut members: Vec<usize> = (0..self.samples.len())
                .filter(|&i| self.samples[i].label == class)
                .collect();
            shuffle(&mut members, &mut rng);
            let take = ((members.len() as f64) * fraction).floor().max(1.0) as usize;
            keep.extend_from_slice(&members[..take.min(members.len())]);
        }
        keep.sort_unstable();
        Ok(PairedDataset {
            spec: self.spec.clone(),
            split: self.split,
            samples: keep.iter().map(|&i| self.samples[i].clone()).collect(),
            class_groups: self.class_groups.clone(),
        })
    }
}

/// All five splits of one generated benchmark.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub teacher_pretrain: PairedDataset,
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test_closed: PairedDataset,
    pub test_open: PairedDataset,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &PairedDataset {
        match split {
            Split::TeacherPretrain => &self.teacher_pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TestClosed => &self.test_closed,
            Split::TestOpen => &self.test_open,
        }
    }
}

/// Standard normal draw via Box-Muller. Hand-rolled so the byte stream
/// behind every dataset is pinned by this crate alone.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fisher-Yates with a seeded RNG (rand's shuffle is version-stable only by
/// convention; this pins the exact byte stream we rely on for determinism).
fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

struct Mixer {
    centers: Vec<Vec<f64>>, // per global class: shared latent center
    a_teacher: Vec<f64>,    // (d_T x (k+s)) row-major
    a_student: Vec<f64>,    // (d_S x (k+s)) row-major
}

fn build_mixer(spec: &SyntheticSpec) -> Mixer {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let k = spec.shared_dim;
    let latent = k + spec.specific_dim;
    let centers: Vec<Vec<f64>> = (0..spec.total_classes())
        .map(|_| (0..k).map(|_| normal(&mut rng)).collect())
        .collect();
    let scale = 1.0 / (latent as f64).sqrt();
    let a_teacher: Vec<f64> = (0..spec.teacher_obs_dim * latent)
        .map(|_| normal(&mut rng) * scale)
        .collect();
    let a_student: Vec<f64> = (0..spec.student_obs_dim * latent)
        .map(|_| normal(&mut rng) * scale)
        .collect();
    Mixer {
        centers,
        a_teacher,
        a_student,
    }
}

fn mix(a: &[f64], obs_dim: usize, latent: &[f64]) -> Vec<f64> {
    let l = latent.len();
    (0..obs_dim)
        .map(|i| {
            let row = &a[i * l..(i + 1) * l];
            row.iter().zip(latent).map(|(m, v)| m * v).sum()
        })
        .collect()
}

fn generate_split(
    spec: &SyntheticSpec,
    mixer: &Mixer,
    split: Split,
    classes: std::ops::Range<usize>,
    per_class: usize,
    stream: u64,
    class_groups: &[u8],
) -> PairedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let k = spec.shared_dim;
    let s = spec.specific_dim;
    let rho_scale = spec.specificity.sqrt();
    let ln_lo = spec.sigma_lo.ln();
    let ln_hi = spec.sigma_hi.ln();
    let mut samples = Vec::with_capacity(classes.len() * per_class);
    for class in classes {
        for _ in 0..per_class {
            let sigma = if ln_hi > ln_lo {
                (ln_lo + rng.gen_range(0.0..1.0) * (ln_hi - ln_lo)).exp()
            } else {
                spec.sigma_lo
            };
            let z: Vec<f64> = (0..k)
                .map(|j| mixer.centers[class][j] + spec.class_spread * normal(&mut rng))
                .collect();
            let mut latent_t = Vec::with_capacity(k + s);
            latent_t.extend_from_slice(&z);
            for _ in 0..s {
                latent_t.push(rho_scale * normal(&mut rng));
            }
            let mut latent_s = Vec::with_capacity(k + s);
            latent_s.extend_from_slice(&z);
            for _ in 0..s {
                latent_s.push(rho_scale * normal(&mut rng));
            }
            let mut x_teacher = mix(&mixer.a_teacher, spec.teacher_obs_dim, &latent_t);
            for v in &mut x_teacher {
                *v += sigma * normal(&mut rng);
            }
            let mut x_student = mix(&mixer.a_student, spec.student_obs_dim, &latent_s);
            for v in &mut x_student {
                *v += sigma * normal(&mut rng);
            }
            samples.push(PairedSample {
                x_teacher,
                x_student,
                label: class,
                noise_sigma: sigma,
            });
        }
    }
    PairedDataset {
        spec: spec.clone(),
        split,
        samples,
        class_groups: class_groups.to_vec(),
    }
}

/// Generates all five splits deterministically from the spec's seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mixer = build_mixer(spec);
    let class_groups: Vec<u8> = mixer
        .centers
        .iter()
        .map(|c| u8::from(c[0] >= 0.0))
        .collect();
    let closed = 0..spec.num_classes;
    let open = spec.num_classes..spec.total_classes();
    Ok(Benchmark {
        teacher_pretrain: generate_split(
            spec,
            &mixer,
            Split::TeacherPretrain,
            closed.clone(),
            spec.samples_per_class * spec.teacher_factor,
            1,
            &class_groups,
        ),
        train: generate_split(
            spec,
            &mixer,
            Split::Train,
            closed.clone(),
            spec.samples_per_class,
            2,
            &class_groups,
        ),
        val: generate_split(
            spec,
            &mixer,
            Split::Val,
            closed.clone(),
            spec.val_per_class,
            3,
            &class_groups,
        ),
        test_closed: generate_split(
            spec,
            &mixer,
            Split::TestClosed,
            closed,
            spec.test_per_class,
            4,
            &class_groups,
        ),
        test_open: generate_split(
            spec,
            &mixer,
            Split::TestOpen,
            open,
            spec.open_per_class,
            5,
            &class_groups,
        ),
    })
}

/// Adds seeded Gaussian-shaped noise rescaled so the signal-to-noise ratio
/// in decibels equals `delta_db` exactly, where power is the mean square of
/// entries.
pub fn inject_noise(x: &[f64], delta_db: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let power = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    if power == 0.0 {
        return Err(Error::Data(
            "cannot calibrate noise against a zero-power input".into(),
        ));
    }
    let noise_power = power / 10f64.powf(delta_db / 10.0);
    let g: Vec<f64> = x.iter().map(|_| normal(rng)).collect();
    let g_power = g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64;
    if g_power == 0.0 {
        return Err(Error::Internal("degenerate zero noise draw".into()));
    }
    let scale = (noise_power / g_power).sqrt();
    Ok(x.iter().zip(&g).map(|(v, n)| v + scale * n).collect())
}

/// Class-balanced batch composition: `classes_per_batch` distinct classes,
/// `samples_per_class` paired samples from each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub classes_per_batch: usize,
    pub samples_per_class: usize,
}

impl BatchSpec {
    pub fn batch_size(&self) -> usize {
        self.classes_per_batch * self.samples_per_class
    }
}

/// One epoch of seeded class-balanced batches (sample indices into the
/// dataset). Every sample is used at most once; leftovers that cannot fill a
/// complete batch are dropped.
pub fn make_batches(
    dataset: &PairedDataset,
    spec: &BatchSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if spec.classes_per_batch == 0 || spec.samples_per_class == 0 {
        return Err(Error::Config("batch spec dims must be >= 1".into()));
    }
    let class_ids = dataset.class_ids();
    if spec.classes_per_batch > class_ids.len() {
        return Err(Error::Config(format!(
            "batch wants {} classes but the dataset has {}",
            spec.classes_per_batch,
            class_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xBA7C);
    let mut pools: Vec<Vec<usize>> = class_ids
        .iter()
        .map(|&c| {
            (0..dataset.samples.len())
                .filter(|&i| dataset.samples[i].label == c)
                .collect()
        })
        .collect();
    for pool in &mut pools {
        shuffle(pool, &mut rng);
    }
    let mut batches = Vec::new();
    loop {
        let mut eligible: Vec<usize> = (0..pools.len())
            .filter(|&c| pools[c].len() >= spec.samples_per_class)
            .collect();
        if eligible.len() < spec.classes_per_batch {
            break;
        }
        shuffle(&mut eligible, &mut rng);
        let mut batch = Vec::with_capacity(spec.batch_size());
        for &c in eligible.iter().take(spec.classes_per_batch) {
            for _ in 0..spec.samples_per_class {
                batch.push(pools[c].pop().expect("pool checked non-empty"));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    spec: SyntheticSpec,
    split: Split,
    class_groups: Vec<u8>,
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

/// Writes the binary dataset plus its `.meta.json` sidecar echoing the
/// generation parameters.
pub fn save_dataset(dataset: &PairedDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATA_MAGIC)?;
    let d_t = dataset.spec.teacher_obs_dim;
    let d_s = dataset.spec.student_obs_dim;
    w.write_all(&(dataset.samples.len() as u32).to_le_bytes())?;
    w.write_all(&(d_t as u32).to_le_bytes())?;
    w.write_all(&(d_s as u32).to_le_bytes())?;
    w.write_all(&(dataset.spec.total_classes() as u32).to_le_bytes())?;
    for s in &dataset.samples {
        if s.x_teacher.len() != d_t || s.x_student.len() != d_s {
            return Err(Error::Internal("sample dims do not match spec".into()));
        }
        w.write_all(&(s.label as u32).to_le_bytes())?;
        w.write_all(&s.noise_sigma.to_le_bytes())?;
        for v in &s.x_teacher {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &s.x_student {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    let meta = DatasetMeta {
        spec: dataset.spec.clone(),
        split: dataset.split,
        class_groups: dataset.class_groups.clone(),
    };
    let f = File::create(meta_path(path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &meta)?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
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

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.take(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Reads a dataset written by [`save_dataset`]. Corruption and truncation
/// surface as format errors carrying the byte offset; nothing partial is
/// ever returned.
pub fn load_dataset(path: &Path) -> Result<PairedDataset> {
    let meta_file = meta_path(path);
    let meta: DatasetMeta = match File::open(&meta_file) {
        Ok(f) => serde_json::from_reader(BufReader::new(f))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::Format {
                offset: 0,
                message: format!("missing dataset sidecar {}", meta_file.display()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.take(&mut magic, "magic")?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(DATA_MAGIC)
            ),
        });
    }
    let n = r.u32("sample count")? as usize;
    let d_t = r.u32("teacher dim")? as usize;
    let d_s = r.u32("student dim")? as usize;
    let num_classes = r.u32("class count")? as usize;
    if d_t != meta.spec.teacher_obs_dim
        || d_s != meta.spec.student_obs_dim
        || num_classes != meta.spec.total_classes()
    {
        return Err(Error::Format {
            offset: r.offset,
            message: "header disagrees with sidecar spec".into(),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label = r.u32("label")? as usize;
        if label >= num_classes {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("sample {i}: label {label} out of range {num_classes}"),
            });
        }
        let noise_sigma = r.f64("noise sigma")?;
        let mut x_teacher = Vec::with_capacity(d_t);
        for _ in 0..d_t {
            x_teacher.push(r.f64("teacher vector")?);
        }
        let mut x_student = Vec::with_capacity(d_s);
        for _ in 0..d_s {
            x_student.push(r.f64("student vector")?);
        }
        if !x_teacher.iter().chain(&x_student).all(|v| v.is_finite()) {
            return Err(Error::Format {
                offset: r.offset,
                message: format!("sample {i}: non-finite observation"),
            });
        }
        samples.push(PairedSample {
            x_teacher,
            x_student,
            label,
            noise_sigma,
        });
    }
    Ok(PairedDataset {
        spec: meta.spec,
        split: meta.split,
        samples,
        class_groups: meta.class_groups,
    })
}

/// Writes all five splits of a benchmark into a directory using the
/// canonical file names, returning the written paths.
pub fn save_benchmark(benchmark: &Benchmark, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for split in Split::all() {
        let path = dir.join(format!("{}.xmd", split.file_stem()));
        save_dataset(benchmark.split(split), &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads a benchmark previously written by [`save_benchmark`].
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let load = |split: Split| load_dataset(&dir.join(format!("{}.xmd", split.file_stem())));
    Ok(Benchmark {
        teacher_pretrain: load(Split::TeacherPretrain)?,
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test_closed: load(Split::TestClosed)?,
        test_open: load(Split::TestOpen)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 50,
            samples_per_class: 20,
            val_per_class: 4,
            test_per_class: 4,
            open_classes: 6,
            open_per_class: 6,
            teacher_factor: 2,
            shared_dim: 8,
            specific_dim: 8,
            teacher_obs_dim: 32,
            student_obs_dim: 32,
            specificity: 0.5,
            sigma_lo: 0.2,
            sigma_hi: 0.2,
            class_spread: 0.3,
            seed: 11,
        }
    }

    #[test]
    fn shape_contract_holds() {
        let bench = generate(&tiny_spec()).unwrap();
        assert_eq!(bench.train.len(), 1000);
        for s in &bench.train.samples {
            assert_eq!(s.x_teacher.len(), 32);
            assert_eq!(s.x_student.len(), 32);
            assert!(s.label < 50);
        }
        assert_eq!(bench.teacher_pretrain.len(), 2000);
        assert_eq!(bench.test_open.len(), 36);
    }

    #[test]
    fn same_seed_gives_byte_identical_dataset_files() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.xmd"), dir.path().join("b.xmd"));
        save_dataset(&generate(&spec).unwrap().train, &p1).unwrap();
        save_dataset(&generate(&spec).unwrap().train, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(
            std::fs::read(meta_path(&p1)).unwrap(),
            std::fs::read(meta_path(&p2)).unwrap()
        );
    }

    #[test]
    fn open_split_classes_are_disjoint_from_training() {
        let bench = generate(&tiny_spec()).unwrap();
        let train: std::collections::BTreeSet<_> = bench.train.class_ids().into_iter().collect();
        let open: std::collections::BTreeSet<_> =
            bench.test_open.class_ids().into_iter().collect();
        assert!(train.is_disjoint(&open));
        assert_eq!(open.len(), 6);
    }

    // Least-squares probe oracle: with no modality-specific energy the
    // student observation is a linear function of the teacher observation up
    // to noise, so the probe residual collapses to the noise scale. With
    // specificity on, the residual stays far above it.
    #[test]
    fn zero_specificity_makes_modalities_linearly_predictable() {
        let residual = |rho: f64| -> f64 {
            let spec = SyntheticSpec {
                specificity: rho,
                sigma_lo: 1e-3,
                sigma_hi: 1e-3,
                num_classes: 30,
                samples_per_class: 40,
                ..tiny_spec()
            };
            let ds = generate(&spec).unwrap().train;
            let n = ds.len();
            let (dt, dsdim) = (spec.teacher_obs_dim, spec.student_obs_dim);
            // Normal equations for W: x_s ≈ W x_t, solved per output dim by
            // Gaussian elimination with ridge damping.
            let mut gram = vec![0.0; dt * dt];
            for s in &ds.samples {
                for i in 0..dt {
                    for j in 0..dt {
                        gram[i * dt + j] += s.x_teacher[i] * s.x_teacher[j];
                    }
                }
            }
            for i in 0..dt {
                gram[i * dt + i] += 1e-9 * n as f64;
            }
            let mut rhs = vec![0.0; dt * dsdim];
            for s in &ds.samples {
                for i in 0..dt {
                    for o in 0..dsdim {
                        rhs[i * dsdim + o] += s.x_teacher[i] * s.x_student[o];
                    }
                }
            }
            let w = solve_multi(&gram, &rhs, dt, dsdim);
            let mut resid = 0.0;
            for s in &ds.samples {
                for o in 0..dsdim {
                    let pred: f64 = (0..dt).map(|i| w[i * dsdim + o] * s.x_teacher[i]).sum();
                    let d = s.x_student[o] - pred;
                    resid += d * d;
                }
            }
            resid / (n * dsdim) as f64
        };

        let clean = residual(0.0);
        let specific = residual(0.6);
        // Residual per dim at rho=0 is on the order of the 1e-6 noise power.
        assert!(clean < 1e-4, "rho=0 residual {clean}");
        assert!(
            specific > 50.0 * clean,
            "rho=0.6 residual {specific} vs rho=0 {clean}"
        );

        fn solve_multi(a: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            for col in 0..n {
                let mut pivot = col;
                for r in col + 1..n {
                    if a[r * n + col].abs() > a[pivot * n + col].abs() {
                        pivot = r;
                    }
                }
                for j in 0..n {
                    a.swap(col * n + j, pivot * n + j);
                }
                for j in 0..m {
                    b.swap(col * m + j, pivot * m + j);
                }
                let p = a[col * n + col];
                for r in 0..n {
                    if r == col || a[r * n + col] == 0.0 {
                        continue;
                    }
                    let f = a[r * n + col] / p;
                    for j in 0..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                    for j in 0..m {
                        b[r * m + j] -= f * b[col * m + j];
                    }
                }
            }
            let mut x = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    x[i * m + j] = b[i * m + j] / a[i * n + i];
                }
            }
            x
        }
    }

    #[test]
    fn injected_noise_hits_the_requested_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..4096).map(|i| ((i as f64) * 0.37).sin() * 2.0).collect();
        let p_sig = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        for &db in &[0.0, 10.0, 5.0] {
            let noisy = inject_noise(&x, db, &mut rng).unwrap();
            let p_noise = x
                .iter()
                .zip(&noisy)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                / x.len() as f64;
            let measured = 10.0 * (p_sig / p_noise).log10();
            assert!((measured - db).abs() < 0.1, "requested {db}, got {measured}");
        }
        // Short vectors keep the wider 1 dB band.
        let short: Vec<f64> = (0..32).map(|i| (i as f64 * 0.61).cos()).collect();
        let noisy = inject_noise(&short, 15.0, &mut rng).unwrap();
        let p_sig = short.iter().map(|v| v * v).sum::<f64>() / 32.0;
        let p_noise = short
            .iter()
            .zip(&noisy)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            / 32.0;
        let measured = 10.0 * (p_sig / p_noise).log10();
        assert!((measured - 15.0).abs() < 1.0, "dim-32 SNR {measured}");
    }

    #[test]
    fn zero_power_input_is_a_data_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!(matches!(
            inject_noise(&[0.0; 8], 10.0, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn batches_are_class_balanced_and_cover_each_sample_at_most_once() {
        let bench = generate(&tiny_spec()).unwrap();
        let spec = BatchSpec {
            classes_per_batch: 10,
            samples_per_class: 2,
        };
        let batches = make_batches(&bench.train, &spec, 99).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for batch in &batches {
            assert_eq!(batch.len(), 20);
            let mut per_class = std::collections::BTreeMap::new();
            for &i in batch {
                assert!(seen.insert(i), "sample {i} reused");
                *per_class.entry(bench.train.samples[i].label).or_insert(0) += 1;
            }
            assert_eq!(per_class.len(), 10);
            assert!(per_class.values().all(|&c| c == 2));
        }
        assert!(!batches.is_empty());
    }

    #[test]
    fn batch_sequences_are_seed_deterministic() {
        let bench = generate(&tiny_spec()).unwrap();
        let spec = BatchSpec {
            classes_per_batch: 5,
            samples_per_class: 2,
        };
        let a = make_batches(&bench.train, &spec, 4).unwrap();
        let b = make_batches(&bench.train, &spec, 4).unwrap();
        assert_eq!(a, b);
        let c = make_batches(&bench.train, &spec, 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_classes_per_batch_is_a_config_error() {
        let bench = generate(&tiny_spec()).unwrap();
        let spec = BatchSpec {
            classes_per_batch: 51,
            samples_per_class: 1,
        };
        assert!(matches!(
            make_batches(&bench.train, &spec, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let bench = generate(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.xmd");
        save_dataset(&bench.train, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded, bench.train);
        // Byte-identity through a second save.
        let path2 = dir.path().join("again.xmd");
        save_dataset(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error_with_no_partial_dataset() {
        let bench = generate(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.xmd");
        save_dataset(&bench.train, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_dataset(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corrupted_magic_names_the_expected_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xmd");
        let bench = generate(&tiny_spec()).unwrap();
        save_dataset(&bench.train, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        match load_dataset(&path) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("XMDDATA1"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subsample_fraction_keeps_class_balance() {
        let bench = generate(&tiny_spec()).unwrap();
        let quarter = bench.train.subsample_fraction(0.25, 3).unwrap();
        assert_eq!(quarter.len(), 50 * 5);
        let full = bench.train.subsample_fraction(1.0, 3).unwrap();
        assert_eq!(full, bench.train);
    }
}
