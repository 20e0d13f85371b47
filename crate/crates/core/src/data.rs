//! Synthetic correlated multimodal datasets and their on-disk format.
//!
//! Every sample shares a latent `z ~ N(0, I_d)` across modalities. Token `i`
//! of modality `u` is `A_u z + noise_scale * eps + D_u eta`, where `eta` is a
//! per-token distractor latent that carries no label information. The label is
//! `clamp(w . z, -3, 3)` for regression or the argmax of a fixed linear map of
//! `z` for classification. Because the model is linear-Gaussian, the
//! posterior mean of the regression label has a closed form
//! ([`bayes_oracle_regression`]) that serves as an independent reference.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, FormatError, Result};
use crate::rng;
use crate::tape::Matrix;

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

const MAGIC: &[u8; 4] = b"CYIN";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Regression,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Regression => "regression",
            Task::Classification => "classification",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidSpec(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_modalities: usize,
    pub seq_len: usize,
    pub feat_dims: Vec<usize>,
    pub latent_dim: usize,
    pub task: Task,
    #[serde(default)]
    pub num_classes: usize,
    pub noise_scale: f64,
    #[serde(default)]
    pub distractor_dim: usize,
    pub num_samples: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_modalities: 3,
            seq_len: 6,
            feat_dims: vec![8, 8, 8],
            latent_dim: 4,
            task: Task::Regression,
            num_classes: 0,
            noise_scale: 0.1,
            distractor_dim: 2,
            num_samples: 2000,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_modalities < 2 {
            return bad(format!("num_modalities must be >= 2, got {}", self.num_modalities));
        }
        if self.num_modalities > u16::MAX as usize {
            return bad(format!("num_modalities must fit in u16, got {}", self.num_modalities));
        }
        if self.seq_len < 1 {
            return bad("seq_len must be >= 1".into());
        }
        if self.feat_dims.len() != self.num_modalities {
            return bad(format!(
                "feat_dims has {} entries but num_modalities is {}",
                self.feat_dims.len(),
                self.num_modalities
            ));
        }
        if let Some(u) = self.feat_dims.iter().position(|&c| c < 1) {
            return bad(format!("feat_dims[{u}] must be >= 1"));
        }
        if self.latent_dim < 1 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be a finite nonnegative real, got {}", self.noise_scale));
        }
        if self.task == Task::Classification && self.num_classes < 2 {
            return bad(format!("classification needs num_classes >= 2, got {}", self.num_classes));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Regression(f64),
    Class(u32),
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Regression(y) => y,
            Label::Class(c) => c as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    /// One `L x C_u` token matrix per modality.
    pub modalities: Vec<Matrix>,
    pub label: Label,
    pub sample_id: u64,
}

/// A dataset held in memory together with its describing spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<MultimodalSample>,
}

impl Dataset {
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        Ok(Self { spec: spec.clone(), samples: generate_dataset(spec)? })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Deterministic head/tail split: the first `fraction` of samples train.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.samples.len() as f64) * fraction).round() as usize;
        let cut = cut.min(self.samples.len());
        let mut head = self.spec.clone();
        head.num_samples = cut;
        let mut tail = self.spec.clone();
        tail.num_samples = self.samples.len() - cut;
        (
            Dataset { spec: head, samples: self.samples[..cut].to_vec() },
            Dataset { spec: tail, samples: self.samples[cut..].to_vec() },
        )
    }
}

/// The fixed maps behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    /// `C_u x d` signal maps.
    pub signal: Vec<Matrix>,
    /// `C_u x distractor_dim` distractor maps.
    pub distractor: Vec<Matrix>,
    /// Regression readout `w`, length `d`.
    pub readout: Vec<f64>,
    /// `V x d` class map (empty for regression).
    pub class_map: Matrix,
    pub noise_scale: f64,
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

pub fn generator_params(spec: &DatasetSpec) -> Result<GeneratorParams> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, "generator", 0);
    let d = spec.latent_dim;
    let signal = spec
        .feat_dims
        .iter()
        .map(|&c| normal_matrix(&mut r, c, d, 1.0 / (d as f64).sqrt()))
        .collect();
    let distractor = spec
        .feat_dims
        .iter()
        .map(|&c| {
            if spec.distractor_dim == 0 {
                Array2::zeros((c, 0))
            } else {
                normal_matrix(&mut r, c, spec.distractor_dim, 1.0 / (spec.distractor_dim as f64).sqrt())
            }
        })
        .collect();
    let raw: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let readout = raw.iter().map(|v| 1.5 * v / norm).collect();
    let class_map = match spec.task {
        Task::Regression => Array2::zeros((0, d)),
        Task::Classification => normal_matrix(&mut r, spec.num_classes, d, 1.0),
    };
    Ok(GeneratorParams { signal, distractor, readout, class_map, noise_scale: spec.noise_scale })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<MultimodalSample>> {
    let params = generator_params(spec)?;
    let mut r = rng::stream(spec.seed, "samples", 0);
    let d = spec.latent_dim;
    let mut out = Vec::with_capacity(spec.num_samples);
    for id in 0..spec.num_samples {
        let z: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let label = match spec.task {
            Task::Regression => {
                let t: f64 = params.readout.iter().zip(&z).map(|(w, z)| w * z).sum();
                Label::Regression(t.clamp(LABEL_MIN, LABEL_MAX))
            }
            Task::Classification => {
                let scores = params.class_map.dot(&ndarray::Array1::from(z.clone()));
                let best = scores
                    .iter()
                    .enumerate()
                    .fold((0usize, f64::NEG_INFINITY), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc });
                Label::Class(best.0 as u32)
            }
        };
        let zv = ndarray::Array1::from(z);
        let modalities = (0..spec.num_modalities)
            .map(|u| {
                let a = &params.signal[u];
                let dm = &params.distractor[u];
                let base = a.dot(&zv);
                let mut tokens = Array2::zeros((spec.seq_len, spec.feat_dims[u]));
                for i in 0..spec.seq_len {
                    let eta: ndarray::Array1<f64> =
                        (0..spec.distractor_dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                    let distract = dm.dot(&eta);
                    for c in 0..spec.feat_dims[u] {
                        let eps: f64 = r.sample(StandardNormal);
                        tokens[[i, c]] = base[c] + spec.noise_scale * eps + distract[c];
                    }
                }
                tokens
            })
            .collect();
        out.push(MultimodalSample { modalities, label, sample_id: id as u64 });
    }
    Ok(out)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E[clamp(T, lo, hi)]` for `T ~ N(mean, sd^2)`.
pub fn clamped_gaussian_mean(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    if sd <= 1e-300 {
        return mean.clamp(lo, hi);
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
    lo * fa + hi * (1.0 - fb) + mean * (fb - fa) + sd * (std_normal_pdf(a) - std_normal_pdf(b))
}

/// Posterior-mean regression label given every modality of `sample`.
pub fn bayes_oracle_regression(sample: &MultimodalSample, spec: &DatasetSpec, params: &GeneratorParams) -> Result<f64> {
    let present = vec![true; spec.num_modalities];
    bayes_oracle_regression_partial(sample, spec, params, &present)
}

/// Posterior-mean regression label using only the modalities flagged in
/// `present`. With no modality present this is the prior mean, 0.
pub fn bayes_oracle_regression_partial(
    sample: &MultimodalSample,
    spec: &DatasetSpec,
    params: &GeneratorParams,
    present: &[bool],
) -> Result<f64> {
    if spec.task != Task::Regression {
        return Err(Error::UnsupportedTask(format!("Bayes oracle is defined for regression, not {}", spec.task)));
    }
    if present.len() != spec.num_modalities || sample.modalities.len() != spec.num_modalities {
        return Err(Error::dim("bayes_oracle", spec.num_modalities, present.len()));
    }
    let d = spec.latent_dim;
    let l = spec.seq_len as f64;
    let used: Vec<usize> = (0..spec.num_modalities).filter(|&u| present[u]).collect();
    let rows: usize = used.iter().map(|&u| spec.feat_dims[u]).sum();
    let w = DVector::from_column_slice(&params.readout);
    if rows == 0 {
        return Ok(clamped_gaussian_mean(0.0, w.norm(), LABEL_MIN, LABEL_MAX));
    }

    // Token means are sufficient: x_bar_u = A_u z + e_u, Cov(e_u) = (s^2 I + D D^T) / L.
    let mut a = DMatrix::<f64>::zeros(rows, d);
    let mut noise = DMatrix::<f64>::zeros(rows, rows);
    let mut xbar = DVector::<f64>::zeros(rows);
    let mut off = 0;
    for &u in &used {
        let c = spec.feat_dims[u];
        let tokens = &sample.modalities[u];
        if tokens.dim() != (spec.seq_len, c) {
            return Err(Error::dim(format!("bayes_oracle modality {u}"), format!("{}x{}", spec.seq_len, c), format!("{:?}", tokens.dim())));
        }
        for ch in 0..c {
            for k in 0..d {
                a[(off + ch, k)] = params.signal[u][[ch, k]];
            }
            xbar[off + ch] = tokens.column(ch).sum() / l;
        }
        let dm = &params.distractor[u];
        for i in 0..c {
            for j in 0..c {
                let mut v: f64 = (0..dm.ncols()).map(|k| dm[[i, k]] * dm[[j, k]]).sum();
                if i == j {
                    v += params.noise_scale * params.noise_scale;
                }
                noise[(off + i, off + j)] = v / l;
            }
        }
        off += c;
    }
    let cov = &a * a.transpose() + noise;
    let pinv = cov
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::Numerical(format!("oracle pseudo-inverse failed: {e}")))?;
    let gain = a.transpose() * pinv;
    let post_mean = &gain * xbar;
    let post_cov = DMatrix::<f64>::identity(d, d) - &gain * &a;
    let mean = w.dot(&post_mean);
    let var = (w.transpose() * post_cov * &w)[(0, 0)].max(0.0);
    Ok(clamped_gaussian_mean(mean, var.sqrt(), LABEL_MIN, LABEL_MAX))
}

// ---------------------------------------------------------------------------
// Binary format

fn header_len(num_modalities: usize) -> u64 {
    (4 + 2 + 2 + 4 + 4 * num_modalities + 8 + 1 + 4) as u64
}

fn record_len(task: Task, seq_len: usize, feat_dims: &[usize]) -> u64 {
    let label = match task {
        Task::Regression => 8,
        Task::Classification => 4,
    };
    (label + 4 * seq_len * feat_dims.iter().sum::<usize>()) as u64
}

/// Serialize samples to the binary dataset layout.
pub fn encode_dataset(spec: &DatasetSpec, samples: &[MultimodalSample]) -> Result<Vec<u8>> {
    let u = spec.num_modalities;
    for s in samples {
        if s.modalities.len() != u {
            return Err(FormatError::Shape(format!(
                "sample {} has {} modalities, expected {u}",
                s.sample_id,
                s.modalities.len()
            ))
            .into());
        }
        for (m, t) in s.modalities.iter().enumerate() {
            if t.nrows() != spec.seq_len {
                return Err(FormatError::Shape(format!(
                    "sample {} modality {m} has seq_len {}, expected shared seq_len {}",
                    s.sample_id,
                    t.nrows(),
                    spec.seq_len
                ))
                .into());
            }
            if t.ncols() != spec.feat_dims[m] {
                return Err(FormatError::Shape(format!(
                    "sample {} modality {m} has {} channels, expected {}",
                    s.sample_id,
                    t.ncols(),
                    spec.feat_dims[m]
                ))
                .into());
            }
        }
        match (spec.task, s.label) {
            (Task::Regression, Label::Regression(_)) => {}
            (Task::Classification, Label::Class(c)) if (c as usize) < spec.num_classes => {}
            (task, label) => {
                return Err(Error::TaskMismatch(format!("sample {} label {label:?} invalid for {task}", s.sample_id)))
            }
        }
    }
    let total = header_len(u) + samples.len() as u64 * record_len(spec.task, spec.seq_len, &spec.feat_dims);
    let mut buf = Vec::with_capacity(total as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(u as u16).to_le_bytes());
    buf.extend_from_slice(&(spec.seq_len as u32).to_le_bytes());
    for &c in &spec.feat_dims {
        buf.extend_from_slice(&(c as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    buf.push(match spec.task {
        Task::Regression => 0,
        Task::Classification => 1,
    });
    buf.extend_from_slice(&(spec.num_classes as u32).to_le_bytes());
    for s in samples {
        match s.label {
            Label::Regression(y) => buf.extend_from_slice(&y.to_le_bytes()),
            Label::Class(c) => buf.extend_from_slice(&c.to_le_bytes()),
        }
        for t in &s.modalities {
            for v in t.iter() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    debug_assert_eq!(buf.len() as u64, total);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, expected_total: u64) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.bytes.len() {
            return Err(FormatError::Truncated { expected: expected_total, actual: self.bytes.len() as u64 });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, exp: u64) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, exp)?.try_into().unwrap()))
    }

    fn u32(&mut self, exp: u64) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, exp)?.try_into().unwrap()))
    }

    fn u64(&mut self, exp: u64) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, exp)?.try_into().unwrap()))
    }

    fn f32(&mut self, exp: u64) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, exp)?.try_into().unwrap()))
    }

    fn f64(&mut self, exp: u64) -> Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, exp)?.try_into().unwrap()))
    }
}

/// Fields recoverable from the binary header alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetHeader {
    pub num_modalities: usize,
    pub seq_len: usize,
    pub feat_dims: Vec<usize>,
    pub num_samples: usize,
    pub task: Task,
    pub num_classes: usize,
}

/// Parse the binary dataset layout.
pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<MultimodalSample>), FormatError> {
    let actual = bytes.len() as u64;
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(FormatError::Magic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let mut r = Reader { bytes, pos: 0 };
    // Header length is unknown until U is read; report the minimal header.
    let min_header = header_len(0);
    r.take(4, min_header)?;
    let version = r.u16(min_header)?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version { found: version, supported: FORMAT_VERSION });
    }
    let u = r.u16(min_header)? as usize;
    let hdr = header_len(u);
    let seq_len = r.u32(hdr)? as usize;
    let feat_dims: Vec<usize> = (0..u).map(|_| r.u32(hdr).map(|c| c as usize)).collect::<Result<_, _>>()?;
    let n = r.u64(hdr)?;
    let task = match r.take(1, hdr)?[0] {
        0 => Task::Regression,
        1 => Task::Classification,
        t => return Err(FormatError::Field { field: "task".into(), reason: format!("unknown task code {t}") }),
    };
    let num_classes = r.u32(hdr)? as usize;
    if u < 2 {
        return Err(FormatError::Field { field: "num_modalities".into(), reason: format!("{u} < 2") });
    }
    if seq_len == 0 {
        return Err(FormatError::Field { field: "seq_len".into(), reason: "zero".into() });
    }
    if let Some(m) = feat_dims.iter().position(|&c| c == 0) {
        return Err(FormatError::Field { field: format!("feat_dims[{m}]"), reason: "zero".into() });
    }
    let expected = record_len(task, seq_len, &feat_dims)
        .checked_mul(n)
        .and_then(|b| b.checked_add(hdr))
        .ok_or_else(|| FormatError::Field { field: "num_samples".into(), reason: format!("{n} overflows") })?;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::Trailing { expected, actual });
    }
    let mut samples = Vec::with_capacity(n as usize);
    for id in 0..n {
        let label = match task {
            Task::Regression => {
                let y = r.f64(expected)?;
                if !y.is_finite() {
                    return Err(FormatError::Field { field: format!("label[{id}]"), reason: "non-finite".into() });
                }
                Label::Regression(y)
            }
            Task::Classification => {
                let c = r.u32(expected)?;
                if c as usize >= num_classes {
                    return Err(FormatError::Field {
                        field: format!("label[{id}]"),
                        reason: format!("class {c} >= num_classes {num_classes}"),
                    });
                }
                Label::Class(c)
            }
        };
        let mut modalities = Vec::with_capacity(u);
        for &c in &feat_dims {
            let mut t = Array2::zeros((seq_len, c));
            for v in t.iter_mut() {
                *v = r.f32(expected)? as f64;
            }
            modalities.push(t);
        }
        samples.push(MultimodalSample { modalities, label, sample_id: id });
    }
    let header = DatasetHeader { num_modalities: u, seq_len, feat_dims, num_samples: n as usize, task, num_classes };
    Ok((header, samples))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

/// Plain-text `key=value` rendering of a spec.
pub fn spec_to_metadata(spec: &DatasetSpec) -> String {
    let dims: Vec<String> = spec.feat_dims.iter().map(|c| c.to_string()).collect();
    format!(
        "num_modalities={}\nseq_len={}\nfeat_dims={}\nlatent_dim={}\ntask={}\nnum_classes={}\nnoise_scale={}\ndistractor_dim={}\nnum_samples={}\nseed={}\n",
        spec.num_modalities,
        spec.seq_len,
        dims.join(","),
        spec.latent_dim,
        spec.task,
        spec.num_classes,
        spec.noise_scale,
        spec.distractor_dim,
        spec.num_samples,
        spec.seed
    )
}

pub fn spec_from_metadata(text: &str) -> Result<DatasetSpec, FormatError> {
    let mut spec = DatasetSpec { feat_dims: vec![], ..DatasetSpec::default() };
    let field = |k: &str, v: &str| FormatError::Field { field: k.to_string(), reason: format!("cannot parse '{v}'") };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FormatError::Field { field: "metadata".into(), reason: format!("line without '=': {line}") })?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "num_modalities" => spec.num_modalities = v.parse().map_err(|_| field(k, v))?,
            "seq_len" => spec.seq_len = v.parse().map_err(|_| field(k, v))?,
            "feat_dims" => {
                spec.feat_dims = v.split(',').map(|c| c.trim().parse().map_err(|_| field(k, v))).collect::<Result<_, _>>()?
            }
            "latent_dim" => spec.latent_dim = v.parse().map_err(|_| field(k, v))?,
            "task" => spec.task = v.parse().map_err(|_| field(k, v))?,
            "num_classes" => spec.num_classes = v.parse().map_err(|_| field(k, v))?,
            "noise_scale" => spec.noise_scale = v.parse().map_err(|_| field(k, v))?,
            "distractor_dim" => spec.distractor_dim = v.parse().map_err(|_| field(k, v))?,
            "num_samples" => spec.num_samples = v.parse().map_err(|_| field(k, v))?,
            "seed" => spec.seed = v.parse().map_err(|_| field(k, v))?,
            other => return Err(FormatError::Field { field: other.into(), reason: "unknown metadata key".into() }),
        }
    }
    Ok(spec)
}

/// Write the binary dataset and its `.meta` sidecar.
pub fn write_dataset(spec: &DatasetSpec, samples: &[MultimodalSample], path: &Path) -> Result<()> {
    let mut spec = spec.clone();
    spec.num_samples = samples.len();
    let bytes = encode_dataset(&spec, samples)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = sidecar_path(path);
    fs::write(&meta, spec_to_metadata(&spec)).map_err(|e| Error::io(meta, e))?;
    Ok(())
}

/// Read a dataset. Generator-only fields (latent_dim, noise, seed) come from
/// the sidecar when present and default to zero otherwise.
pub fn read_dataset(path: &Path) -> Result<(DatasetSpec, Vec<MultimodalSample>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (hdr, samples) = decode_dataset(&bytes)?;
    let meta = sidecar_path(path);
    let spec = if meta.exists() {
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let spec = spec_from_metadata(&text)?;
        let check = |name: &str, side: String, head: String| -> Result<(), FormatError> {
            if side != head {
                return Err(FormatError::Shape(format!("{name}: sidecar says {side}, binary header says {head}")));
            }
            Ok(())
        };
        check("num_modalities", spec.num_modalities.to_string(), hdr.num_modalities.to_string())?;
        check("seq_len", spec.seq_len.to_string(), hdr.seq_len.to_string())?;
        check("feat_dims", format!("{:?}", spec.feat_dims), format!("{:?}", hdr.feat_dims))?;
        check("task", spec.task.to_string(), hdr.task.to_string())?;
        check("num_classes", spec.num_classes.to_string(), hdr.num_classes.to_string())?;
        check("num_samples", spec.num_samples.to_string(), hdr.num_samples.to_string())?;
        spec
    } else {
        DatasetSpec {
            num_modalities: hdr.num_modalities,
            seq_len: hdr.seq_len,
            feat_dims: hdr.feat_dims.clone(),
            latent_dim: 0,
            task: hdr.task,
            num_classes: hdr.num_classes,
            noise_scale: 0.0,
            distractor_dim: 0,
            num_samples: hdr.num_samples,
            seed: 0,
        }
    };
    Ok((spec, samples))
}
