//! Synthetic phase-coupled dual-sequence task.
//!
//! For class `c` (0-based) of `K` the two streams of a sample are
//!
//! ```text
//! H_i = z·cos(2πf·t_i + θ)        + ε_i
//! V_i = z·cos(2πf·t_i + θ + φ_c)  + η_i       φ_c = 2πc/K,  t_i = i/(n−1)
//! ```
//!
//! with `z ~ N(0, I_d)`, `θ ~ U[0, 2π)` and i.i.d. `N(0, σ²)` noise. Each
//! stream alone is a randomly phased sinusoid whose law does not depend on
//! `c`; only the phase offset between the streams identifies the class.
//!
//! # Draw order
//!
//! Sample `k` of split `s` (train 0, valid 1, test 2) has class `k mod K`
//! and its own [`RngStream`] seeded with `derive_seed(seed, [s, k])`. From
//! that stream: `d` Gaussians for `z`, one uniform for `θ`, then
//! `n·d` noise Gaussians for `H` (step-major) followed by `n·d` for `V`.
//!
//! # Files
//!
//! A dataset directory holds `meta.json` and `train.jsonl`, `valid.jsonl`,
//! `test.jsonl`. Each record line is `{"label":c,"h":[[..d..]×n],"v":[..]}`;
//! doubles use 17 significant digits.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngStream, Vector};
use crate::textfmt;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub steps: usize,
    pub frequency: f64,
    pub noise_sigma: f64,
    pub train_per_class: usize,
    pub valid_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            num_classes: 4,
            dim: 8,
            steps: 15,
            frequency: 2.0,
            noise_sigma: 0.1,
            train_per_class: 200,
            valid_per_class: 50,
            test_per_class: 50,
            seed: 1,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("dim must be at least 1".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("steps must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if !self.frequency.is_finite() {
            return Err(Error::Config("frequency must be finite".into()));
        }
        Ok(())
    }

    /// Phase offset between the streams for class `c` (0-based).
    pub fn phase_offset(&self, class: usize) -> f64 {
        2.0 * PI * class as f64 / self.num_classes as f64
    }

    pub fn split_size(&self, split: Split) -> usize {
        self.num_classes
            * match split {
                Split::Train => self.train_per_class,
                Split::Valid => self.valid_per_class,
                Split::Test => self.test_per_class,
            }
    }

    pub fn sample_seed(&self, split: Split, index: usize) -> u64 {
        derive_seed(self.seed, &[split.id(), index as u64])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

/// Two aligned streams of `n` vectors of dimension `d`, plus a class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub label: usize,
    #[serde(rename = "h")]
    pub h_seq: Vec<Vector>,
    #[serde(rename = "v")]
    pub v_seq: Vec<Vector>,
}

impl SamplePair {
    pub fn steps(&self) -> usize {
        self.h_seq.len()
    }

    pub fn dim(&self) -> usize {
        self.h_seq.first().map_or(0, |v| v.len())
    }

    pub fn check_dims(&self, steps: usize, dim: usize) -> std::result::Result<(), String> {
        if self.h_seq.len() != steps || self.v_seq.len() != steps {
            return Err(format!(
                "expected {steps} steps, found h={} v={}",
                self.h_seq.len(),
                self.v_seq.len()
            ));
        }
        for (i, (h, v)) in self.h_seq.iter().zip(&self.v_seq).enumerate() {
            if h.len() != dim || v.len() != dim {
                return Err(format!(
                    "step {i}: expected dim {dim}, found h={} v={}",
                    h.len(),
                    v.len()
                ));
            }
        }
        Ok(())
    }
}

/// Deterministic rendering of one sample from explicit latents; `noise`
/// supplies the ε/η draws when σ > 0.
pub fn render_sample(
    task: &TaskConfig,
    class: usize,
    z: &[f64],
    theta: f64,
    mut noise: Option<&mut RngStream>,
) -> SamplePair {
    let n = task.steps;
    let omega = 2.0 * PI * task.frequency;
    let phi = task.phase_offset(class);
    let t = |i: usize| i as f64 / (n - 1) as f64;
    let mut draw = |len: usize| -> Vec<f64> {
        match noise.as_deref_mut() {
            Some(s) if task.noise_sigma > 0.0 => {
                (0..len).map(|_| task.noise_sigma * s.gaussian()).collect()
            }
            _ => vec![0.0; len],
        }
    };
    let stream = |phase: f64, eps: Vec<f64>| -> Vec<Vector> {
        (0..n)
            .map(|i| {
                let a = (omega * t(i) + theta + phase).cos();
                Vector(
                    z.iter()
                        .enumerate()
                        .map(|(k, zk)| zk * a + eps[i * z.len() + k])
                        .collect(),
                )
            })
            .collect()
    };
    let eps = draw(n * z.len());
    let eta = draw(n * z.len());
    SamplePair {
        label: class,
        h_seq: stream(0.0, eps),
        v_seq: stream(phi, eta),
    }
}

/// Draws one sample of class `class` (0-based) from `stream`.
pub fn generate_sample(task: &TaskConfig, class: usize, stream: &mut RngStream) -> Result<SamplePair> {
    if class >= task.num_classes {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            task.num_classes
        )));
    }
    let z: Vec<f64> = (0..task.dim).map(|_| stream.gaussian()).collect();
    let theta = 2.0 * PI * stream.uniform();
    Ok(render_sample(task, class, &z, theta, Some(stream)))
}

pub fn generate_split(task: &TaskConfig, split: Split) -> Result<Vec<SamplePair>> {
    task.validate()?;
    (0..task.split_size(split))
        .map(|k| {
            let mut stream = RngStream::new(task.sample_seed(split, k));
            generate_sample(task, k % task.num_classes, &mut stream)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    task: TaskConfig,
    records: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SplitCounts {
    train: usize,
    valid: usize,
    test: usize,
}

/// A loaded dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskConfig,
    pub train: Vec<SamplePair>,
    pub valid: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn generate(task: &TaskConfig) -> Result<Self> {
        Ok(Dataset {
            task: task.clone(),
            train: generate_split(task, Split::Train)?,
            valid: generate_split(task, Split::Valid)?,
            test: generate_split(task, Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &[SamplePair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Writes the three record files and `meta.json` into `out_dir`, creating it
/// if needed.
pub fn generate_dataset(task: &TaskConfig, out_dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(task)?;
    write_dataset(&ds, out_dir)?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for split in Split::ALL {
        let path = out_dir.join(split.file_name());
        let mut text = String::new();
        for s in ds.split(split) {
            text.push_str(&textfmt::to_line(s)?);
            text.push('\n');
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    let meta = Metadata {
        format_version: DATASET_FORMAT_VERSION,
        task: ds.task.clone(),
        records: SplitCounts {
            train: ds.train.len(),
            valid: ds.valid.len(),
            test: ds.test.len(),
        },
    };
    textfmt::write_pretty(&meta, &out_dir.join(META_FILE))
}

pub fn load_task(dir: &Path) -> Result<TaskConfig> {
    Ok(load_metadata(dir)?.task)
}

fn load_metadata(dir: &Path) -> Result<Metadata> {
    let path = dir.join(META_FILE);
    let meta: Metadata = textfmt::read_document(&path)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: meta.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    meta.task.validate()?;
    Ok(meta)
}

/// Parses one record file, validating each record against `task`.
pub fn load_records(path: &Path, task: &TaskConfig) -> Result<Vec<SamplePair>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let sample: SamplePair = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("malformed record: {e}"),
        })?;
        let record = out.len();
        sample.check_dims(task.steps, task.dim).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg: format!("record {record}: {msg}"),
        })?;
        if sample.label >= task.num_classes {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("record {record}: label {} out of range", sample.label),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

/// Loads a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = load_metadata(dir)?;
    let load = |split: Split, expected: usize| -> Result<Vec<SamplePair>> {
        let path = dir.join(split.file_name());
        let records = load_records(&path, &meta.task)?;
        if records.len() != expected {
            return Err(Error::Config(format!(
                "{}: expected {expected} records, found {}",
                path.display(),
                records.len()
            )));
        }
        Ok(records)
    };
    Ok(Dataset {
        train: load(Split::Train, meta.records.train)?,
        valid: load(Split::Valid, meta.records.valid)?,
        test: load(Split::Test, meta.records.test)?,
        task: meta.task,
    })
}

pub fn dataset_exists(dir: &Path) -> bool {
    dir.join(META_FILE).exists()
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(split.file_name())
}

/// How the two streams are presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Both streams per step into a fused (glf/slf) cell.
    Joint,
    /// Horizontal stream only.
    NoneH,
    /// Vertical stream only.
    NoneV,
    /// Per-step concatenation `[H_i ; V_i]`.
    Feat1,
    /// Temporal concatenation `H_1..H_n, V_1..V_n`.
    Feat2,
    /// Two single-stream models whose probabilities are averaged.
    Score,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 6] = [
        FusionStrategy::Joint,
        FusionStrategy::NoneH,
        FusionStrategy::NoneV,
        FusionStrategy::Feat1,
        FusionStrategy::Feat2,
        FusionStrategy::Score,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Joint => "joint",
            FusionStrategy::NoneH => "none_h",
            FusionStrategy::NoneV => "none_v",
            FusionStrategy::Feat1 => "feat1",
            FusionStrategy::Feat2 => "feat2",
            FusionStrategy::Score => "score",
        }
    }

    pub fn accepts(self, kind: CellKind) -> bool {
        match self {
            FusionStrategy::Joint => kind != CellKind::Conventional,
            _ => kind == CellKind::Conventional,
        }
    }

    /// Encoder input width and length for a task of dimension `dim` and `steps`.
    pub fn encoder_shape(self, dim: usize, steps: usize) -> (usize, usize) {
        match self {
            FusionStrategy::Feat1 => (2 * dim, steps),
            FusionStrategy::Feat2 => (dim, 2 * steps),
            _ => (dim, steps),
        }
    }

    /// Number of independent sub-models.
    pub fn branches(self) -> usize {
        if self == FusionStrategy::Score {
            2
        } else {
            1
        }
    }

    pub fn check(self, kind: CellKind) -> Result<()> {
        if self.accepts(kind) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "fusion `{self}` cannot be used with cell `{kind}` (joint needs glf/slf, the others conv)"
            )))
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fusion `{s}` (valid: joint, none_h, none_v, feat1, feat2, score)"
                ))
            })
    }
}

/// One encoder's input: `streams[s][i]` is stream `s` at step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub streams: Vec<Vec<Vector>>,
}

impl EncoderInput {
    pub fn steps(&self) -> usize {
        self.streams.first().map_or(0, |s| s.len())
    }

    pub fn at(&self, i: usize) -> Vec<&[f64]> {
        self.streams.iter().map(|s| s[i].as_ref()).collect()
    }
}

/// Builds the encoder input(s) for `strategy`; score-level fusion yields two
/// single-stream inputs (H for the first sub-model, V for the second).
pub fn assemble_fusion_input(
    sample: &SamplePair,
    strategy: FusionStrategy,
    kind: CellKind,
) -> Result<Vec<EncoderInput>> {
    strategy.check(kind)?;
    let single = |seq: Vec<Vector>| EncoderInput { streams: vec![seq] };
    Ok(match strategy {
        FusionStrategy::Joint => vec![EncoderInput {
            streams: vec![sample.h_seq.clone(), sample.v_seq.clone()],
        }],
        FusionStrategy::NoneH => vec![single(sample.h_seq.clone())],
        FusionStrategy::NoneV => vec![single(sample.v_seq.clone())],
        FusionStrategy::Feat1 => vec![single(
            sample
                .h_seq
                .iter()
                .zip(&sample.v_seq)
                .map(|(h, v)| Vector::concat(&[h, v]))
                .collect(),
        )],
        FusionStrategy::Feat2 => vec![single(
            sample.h_seq.iter().chain(&sample.v_seq).cloned().collect(),
        )],
        FusionStrategy::Score => vec![single(sample.h_seq.clone()), single(sample.v_seq.clone())],
    })
}

/// Brute-force nearest-phase classifier, independent of any learned model.
///
/// Fits `H_i ≈ a·cos(ωt_i) + b·sin(ωt_i)` per component by least squares,
/// predicts `V` under every candidate offset φ_c and returns the class with
/// the smallest squared residual (ties toward the lowest class).
pub fn nearest_phase_classify(task: &TaskConfig, sample: &SamplePair) -> usize {
    let n = task.steps;
    let omega = 2.0 * PI * task.frequency;
    let basis: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            ((omega * t).cos(), (omega * t).sin())
        })
        .collect();
    let (mut scc, mut sss, mut scs) = (0.0, 0.0, 0.0);
    for &(c, s) in &basis {
        scc += c * c;
        sss += s * s;
        scs += c * s;
    }
    let det = scc * sss - scs * scs;

    let d = sample.dim();
    let mut coef = vec![(0.0, 0.0); d];
    for (k, ck) in coef.iter_mut().enumerate() {
        let (mut yc, mut ys) = (0.0, 0.0);
        for (i, &(c, s)) in basis.iter().enumerate() {
            yc += sample.h_seq[i][k] * c;
            ys += sample.h_seq[i][k] * s;
        }
        *ck = ((sss * yc - scs * ys) / det, (scc * ys - scs * yc) / det);
    }

    let mut best = (0, f64::INFINITY);
    for class in 0..task.num_classes {
        let (sp, cp) = task.phase_offset(class).sin_cos();
        let mut err = 0.0;
        for (i, &(c, s)) in basis.iter().enumerate() {
            for (k, &(a, b)) in coef.iter().enumerate() {
                // z·cos(α) = a·c + b·s and z·sin(α) = a·s − b·c, α = ωt + θ
                let zc = a * c + b * s;
                let zs = a * s - b * c;
                let pred = cp * zc - sp * zs;
                err += (sample.v_seq[i][k] - pred).powi(2);
            }
        }
        if err < best.1 {
            best = (class, err);
        }
    }
    best.0
}
