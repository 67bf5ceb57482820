//! Datasets of per-view feature sequences, the RIPF file format, z-score
//! normalization, batching, stratified splits and the synthetic generator.
//!
//! # RIPF feature files
//!
//! One file per sample per view, all integers little-endian:
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `b"RIPF"`                |
//! | 4      | 2         | `u16` version, currently 1     |
//! | 6      | 4         | `u32` frame count `T`          |
//! | 10     | 4         | `u32` feature width `dim`      |
//! | 14     | 4·T·dim   | `f32` values, row-major `[T, dim]` |
//!
//! # Manifest
//!
//! `manifest.toml` next to the view directories:
//!
//! ```toml
//! format = "ripf-manifest"
//! version = 1
//! dim = 64
//! views = ["front", "left", "right"]
//!
//! [[samples]]
//! id = "s00000"
//! label = "RT"
//! frames = 23
//! front = "front/s00000.ripf"
//! left = "left/s00000.ripf"
//! right = "right/s00000.ripf"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const RIPF_MAGIC: [u8; 4] = *b"RIPF";
pub const RIPF_VERSION: u16 = 1;
pub const RIPF_HEADER_LEN: usize = 14;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REPORT_FILE: &str = "generation_report.toml";
pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"RIPF\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found}, expected {RIPF_VERSION}")]
    Version { path: PathBuf, found: u16 },
    #[error("sample {id}: file dim {found} does not match manifest dim {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("sample {id}: file has {found} frames, manifest says {expected}")]
    FrameMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{path}: empty sequence (T={frames}, dim={dim})")]
    EmptySequence {
        path: PathBuf,
        frames: usize,
        dim: usize,
    },
    #[error("{path}: non-finite feature value")]
    NonFinite { path: PathBuf },
    #[error("unknown label {0:?}; expected one of ST, RT, LT, RLC, LLC, SS")]
    UnknownLabel(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("split ratios sum to {0}, expected 1")]
    RatioSum(f64),
    #[error("class distribution sums to {0}, expected 1")]
    Distribution(f64),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Maneuver classes with fixed integer codes; `ST` is the "driving straight" class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ManeuverLabel {
    ST = 0,
    RT = 1,
    LT = 2,
    RLC = 3,
    LLC = 4,
    SS = 5,
}

impl ManeuverLabel {
    pub const ALL: [ManeuverLabel; NUM_CLASSES] = [
        ManeuverLabel::ST,
        ManeuverLabel::RT,
        ManeuverLabel::LT,
        ManeuverLabel::RLC,
        ManeuverLabel::LLC,
        ManeuverLabel::SS,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ManeuverLabel::ST => "ST",
            ManeuverLabel::RT => "RT",
            ManeuverLabel::LT => "LT",
            ManeuverLabel::RLC => "RLC",
            ManeuverLabel::LLC => "LLC",
            ManeuverLabel::SS => "SS",
        }
    }

    pub fn is_straight(self) -> bool {
        self == ManeuverLabel::ST
    }
}

impl fmt::Display for ManeuverLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ManeuverLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| DataError::UnknownLabel(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Left,
    Right,
}

impl View {
    pub const ALL: [View; 3] = [View::Front, View::Left, View::Right];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Left => "left",
            View::Right => "right",
        }
    }
}

/// `[T, dim]` per-frame embeddings stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    frames: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(dim: usize, frames: Vec<f32>) -> Result<Self> {
        if dim == 0 || frames.is_empty() || frames.len() % dim != 0 {
            return Err(DataError::Invalid(format!(
                "feature sequence of {} values is not a nonempty multiple of dim {dim}",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        Ok(Self { dim, frames })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.frames
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.len(), self.dim],
            self.frames.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated on construction")
    }

    pub fn to_ripf_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RIPF_HEADER_LEN + 4 * self.frames.len());
        out.extend_from_slice(&RIPF_MAGIC);
        out.extend_from_slice(&RIPF_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a RIPF byte buffer; `path` is used for error messages only.
    pub fn from_ripf_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let path_buf = || path.to_path_buf();
        if bytes.len() < RIPF_HEADER_LEN {
            return Err(DataError::Truncated {
                path: path_buf(),
                expected: RIPF_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != RIPF_MAGIC {
            return Err(DataError::BadMagic {
                path: path_buf(),
                found: magic,
            });
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != RIPF_VERSION {
            return Err(DataError::Version {
                path: path_buf(),
                found: version,
            });
        }
        let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if frames == 0 || dim == 0 {
            return Err(DataError::EmptySequence {
                path: path_buf(),
                frames,
                dim,
            });
        }
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(RIPF_HEADER_LEN))
            .unwrap_or(usize::MAX);
        if bytes.len() < expected {
            return Err(DataError::Truncated {
                path: path_buf(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::TrailingBytes {
                path: path_buf(),
                extra: bytes.len() - expected,
            });
        }
        let values: Vec<f32> = bytes[RIPF_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { path: path_buf() });
        }
        Ok(Self {
            dim,
            frames: values,
        })
    }

    pub fn read_ripf(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_ripf_bytes(&bytes, path)
    }

    pub fn write_ripf(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ripf_bytes()).map_err(io_err(path))
    }
}

/// Wraps an external row-major `[T, dim]` dump of 32-bit floats into RIPF.
pub fn wrap_raw_embeddings(raw: &[f32], frames: usize, dim: usize) -> Result<Vec<u8>> {
    if frames.checked_mul(dim) != Some(raw.len()) {
        return Err(DataError::Invalid(format!(
            "raw dump has {} values, expected {frames}x{dim}",
            raw.len()
        )));
    }
    Ok(FeatureSequence::new(dim, raw.to_vec())?.to_ripf_bytes())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: ManeuverLabel,
    pub views: BTreeMap<View, FeatureSequence>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.views.values().next().map_or(0, FeatureSequence::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self, v: View) -> Option<&FeatureSequence> {
        self.views.get(&v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub views: Vec<View>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    dim: usize,
    views: Vec<View>,
    #[serde(default)]
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    label: String,
    frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    front: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    left: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    right: Option<String>,
}

impl ManifestEntry {
    fn path(&self, v: View) -> Option<&str> {
        match v {
            View::Front => self.front.as_deref(),
            View::Left => self.left.as_deref(),
            View::Right => self.right.as_deref(),
        }
    }
}

const MANIFEST_FORMAT: &str = "ripf-manifest";

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_multi_view(&self) -> bool {
        self.views.len() == View::ALL.len()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label.code()] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            dim: self.dim,
            views: self.views.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Checks dims, view presence and per-sample view length agreement.
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.views[0] != View::Front {
            return Err(DataError::Manifest("views must start with front".into()));
        }
        for s in &self.samples {
            let mut len = None;
            for v in &self.views {
                let seq = s.views.get(v).ok_or_else(|| {
                    DataError::Manifest(format!("sample {} is missing view {}", s.id, v.as_str()))
                })?;
                if seq.dim() != self.dim {
                    return Err(DataError::DimMismatch {
                        id: s.id.clone(),
                        expected: self.dim,
                        found: seq.dim(),
                    });
                }
                match len {
                    None => len = Some(seq.len()),
                    Some(l) if l != seq.len() => {
                        return Err(DataError::FrameMismatch {
                            id: s.id.clone(),
                            expected: l,
                            found: seq.len(),
                        })
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Writes RIPF files and the manifest under `dir`, which must not exist
    /// yet or be empty.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for v in &self.views {
            let vdir = dir.join(v.as_str());
            fs::create_dir_all(&vdir).map_err(io_err(&vdir))?;
        }
        for s in &self.samples {
            let mut entry = ManifestEntry {
                id: s.id.clone(),
                label: s.label.as_str().to_string(),
                frames: s.len(),
                front: None,
                left: None,
                right: None,
            };
            for v in &self.views {
                let rel = format!("{}/{}.ripf", v.as_str(), s.id);
                s.views[v].write_ripf(&dir.join(&rel))?;
                match v {
                    View::Front => entry.front = Some(rel),
                    View::Left => entry.left = Some(rel),
                    View::Right => entry.right = Some(rel),
                }
            }
            entries.push(entry);
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            dim: self.dim,
            views: self.views.clone(),
            samples: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(io_err(&path))
    }
}

/// Loads and validates a dataset from a manifest path (or its directory).
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(DataError::Manifest(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    if manifest.views != [View::Front] && manifest.views != View::ALL {
        return Err(DataError::Manifest(
            "views must be [front] or [front, left, right]".into(),
        ));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let label: ManeuverLabel = e.label.parse()?;
        let mut views = BTreeMap::new();
        for &v in &manifest.views {
            let rel = e.path(v).ok_or_else(|| {
                DataError::Manifest(format!("sample {} has no {} path", e.id, v.as_str()))
            })?;
            let seq = FeatureSequence::read_ripf(&root.join(rel))?;
            if seq.dim() != manifest.dim {
                return Err(DataError::DimMismatch {
                    id: e.id.clone(),
                    expected: manifest.dim,
                    found: seq.dim(),
                });
            }
            if seq.len() != e.frames {
                return Err(DataError::FrameMismatch {
                    id: e.id.clone(),
                    expected: e.frames,
                    found: seq.len(),
                });
            }
            views.insert(v, seq);
        }
        samples.push(Sample {
            id: e.id.clone(),
            label,
            views,
        });
    }
    let ds = Dataset {
        dim: manifest.dim,
        views: manifest.views,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Pools every frame of `view` over `train`; population std floored at 1e-8.
    pub fn fit(train: &Dataset, view: View) -> Result<Self> {
        if train.is_empty() {
            return Err(DataError::Invalid("cannot fit z-score on an empty set".into()));
        }
        let d = train.dim;
        let mut sum = vec![0.0; d];
        let mut count = 0usize;
        let seqs = train.samples.iter().filter_map(|s| s.view(view));
        for seq in seqs.clone() {
            for t in 0..seq.len() {
                for (acc, &v) in sum.iter_mut().zip(seq.frame(t)) {
                    *acc += f64::from(v);
                }
            }
            count += seq.len();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut ss = vec![0.0; d];
        for seq in seqs {
            for t in 0..seq.len() {
                for ((acc, &v), m) in ss.iter_mut().zip(seq.frame(t)).zip(&mean) {
                    let c = f64::from(v) - m;
                    *acc += c * c;
                }
            }
        }
        let std = ss
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    /// `(x - mean) / std` per frame, as a 64-bit `[T, dim]` tensor.
    pub fn apply(&self, seq: &FeatureSequence) -> Tensor {
        let d = seq.dim();
        assert_eq!(d, self.mean.len(), "norm stats width mismatch");
        let data = seq
            .values()
            .chunks(d)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((&v, m), s)| (f64::from(v) - m) / s)
            })
            .collect();
        Tensor::new(&[seq.len(), d], data).expect("shape from sequence")
    }
}

/// Normalization state for every view of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub views: Vec<View>,
    pub stats: Vec<NormStats>,
}

impl Normalizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let stats = train
            .views
            .iter()
            .map(|&v| NormStats::fit(train, v))
            .collect::<Result<_>>()?;
        Ok(Self {
            views: train.views.clone(),
            stats,
        })
    }

    pub fn apply(&self, sample: &Sample) -> Result<NormalizedSample> {
        let views = self
            .views
            .iter()
            .zip(&self.stats)
            .map(|(v, st)| {
                sample
                    .view(*v)
                    .map(|seq| st.apply(seq))
                    .ok_or_else(|| DataError::Invalid(format!("{} lacks view {}", sample.id, v.as_str())))
            })
            .collect::<Result<_>>()?;
        Ok(NormalizedSample {
            label: sample.label,
            views,
        })
    }

    pub fn apply_all(&self, ds: &Dataset) -> Result<Vec<NormalizedSample>> {
        ds.samples.iter().map(|s| self.apply(s)).collect()
    }
}

/// Model-ready sample: one normalized `[T, dim]` tensor per view.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSample {
    pub label: ManeuverLabel,
    pub views: Vec<Tensor>,
}

impl NormalizedSample {
    pub fn len(&self) -> usize {
        self.views[0].shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zero-pads `[T_i, dim]` sequences at the tail into `[B, T_max, dim]`.
pub fn pad_batch(seqs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = seqs
        .first()
        .ok_or_else(|| DataError::Invalid("pad_batch of an empty list".into()))?;
    let dim = first.shape()[1];
    if let Some(bad) = seqs.iter().find(|s| s.shape().len() != 2 || s.shape()[1] != dim) {
        return Err(DataError::Invalid(format!(
            "pad_batch: sequence of shape {:?} in a batch of width {dim}",
            bad.shape()
        )));
    }
    let lengths: Vec<usize> = seqs.iter().map(|s| s.shape()[0]).collect();
    let t_max = *lengths.iter().max().unwrap();
    let mut data = vec![0.0; seqs.len() * t_max * dim];
    for (b, s) in seqs.iter().enumerate() {
        data[b * t_max * dim..b * t_max * dim + s.len()].copy_from_slice(s.data());
    }
    let padded = Tensor::new(&[seqs.len(), t_max, dim], data).expect("computed shape");
    Ok((padded, lengths))
}

/// Inverse of [`pad_batch`].
pub fn unpad_batch(padded: &Tensor, lengths: &[usize]) -> Vec<Tensor> {
    let (t_max, dim) = (padded.shape()[1], padded.shape()[2]);
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let off = b * t_max * dim;
            Tensor::new(&[len, dim], padded.data()[off..off + len * dim].to_vec())
                .expect("length within padding")
        })
        .collect()
}

/// Index partition produced by [`split_dataset`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn part(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

impl FromStr for SplitName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(DataError::Invalid(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

/// Largest-remainder apportionment of `n` into parts proportional to `ratios`.
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Splits into train/val/test. With `stratified`, each class is apportioned
/// by largest remainder while the split totals also match the global
/// largest-remainder apportionment of the whole set.
pub fn split_dataset(ds: &Dataset, ratios: [f64; 3], seed: u64, stratified: bool) -> Result<Split> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DataError::RatioSum(total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = if stratified {
        ManeuverLabel::ALL
            .iter()
            .map(|&l| (0..ds.len()).filter(|&i| ds.samples[i].label == l).collect())
            .collect()
    } else {
        vec![(0..ds.len()).collect()]
    };
    let targets = largest_remainder(ds.len(), &ratios);

    // floor allocation per group, then hand out the leftovers by descending
    // fractional part under the global per-split targets
    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(groups.len());
    let mut cells = Vec::new();
    for (g, members) in groups.iter().enumerate() {
        let n = members.len();
        let mut a = [0usize; 3];
        for s in 0..3 {
            let e = ratios[s] * n as f64;
            a[s] = e.floor() as usize;
            cells.push((e - e.floor(), g, s));
        }
        alloc.push(a);
    }
    cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let group_left = |alloc: &[[usize; 3]], g: usize| groups[g].len() - alloc[g].iter().sum::<usize>();
    let split_left = |alloc: &[[usize; 3]], s: usize| {
        targets[s].saturating_sub(alloc.iter().map(|a| a[s]).sum::<usize>())
    };
    for &(_, g, s) in &cells {
        if group_left(&alloc, g) > 0 && split_left(&alloc, s) > 0 {
            alloc[g][s] += 1;
        }
    }
    for g in 0..groups.len() {
        while group_left(&alloc, g) > 0 {
            let s = (0..3)
                .find(|&s| split_left(&alloc, s) > 0)
                .expect("leftover units always have a split with room");
            alloc[g][s] += 1;
        }
    }

    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (members, a) in groups.iter().zip(&alloc) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let (tr, rest) = shuffled.split_at(a[0]);
        let (va, te) = rest.split_at(a[1]);
        split.train.extend_from_slice(tr);
        split.val.extend_from_slice(va);
        split.test.extend_from_slice(te);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Synthetic generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_samples: usize,
    pub dim: usize,
    pub fps: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Class probabilities keyed by label string.
    pub class_distribution: BTreeMap<String, f64>,
    /// Amplitude of the class signal.
    pub signal: f64,
    /// Standard deviation of the AR(1) frame noise.
    pub noise: f64,
    /// AR(1) coefficient of the frame noise.
    pub ar_coef: f64,
    /// Mirror-view noise, relative to `noise`.
    pub view_noise: f64,
    /// Extra mirror-view gain for lane changes toward that mirror.
    pub lane_change_gain: f64,
    /// 1 (front only) or 3 (front, left, right).
    pub views: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        let class_distribution = [
            ("ST", 0.30),
            ("RT", 0.25),
            ("LT", 0.20),
            ("RLC", 0.10),
            ("LLC", 0.05),
            ("SS", 0.10),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            n_samples: 1000,
            dim: 64,
            fps: 2.0,
            min_seconds: 5.0,
            max_seconds: 30.0,
            class_distribution,
            signal: 0.25,
            noise: 1.0,
            ar_coef: 0.7,
            view_noise: 0.5,
            lane_change_gain: 2.0,
            views: 3,
        }
    }
}

impl GenConfig {
    pub fn class_probs(&self) -> Result<[f64; NUM_CLASSES]> {
        let mut probs = [0.0; NUM_CLASSES];
        for (k, &v) in &self.class_distribution {
            let l: ManeuverLabel = k.parse()?;
            if !(v >= 0.0) {
                return Err(DataError::Invalid(format!("negative probability for {k}")));
            }
            probs[l.code()] = v;
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Distribution(total));
        }
        Ok(probs)
    }

    pub fn validate(&self) -> Result<()> {
        self.class_probs()?;
        let bad = |m: &str| Err(DataError::Invalid(format!("generator config: {m}")));
        if self.n_samples == 0 || self.dim == 0 {
            return bad("n_samples and dim must be positive");
        }
        if !(self.fps > 0.0) || !(self.min_seconds > 0.0) || self.max_seconds < self.min_seconds {
            return bad("need fps > 0 and 0 < min_seconds <= max_seconds");
        }
        if !(self.noise >= 0.0) || !(self.view_noise >= 0.0) || !(0.0..1.0).contains(&self.ar_coef) {
            return bad("noise scales must be >= 0 and ar_coef in [0, 1)");
        }
        if self.views != 1 && self.views != 3 {
            return bad("views must be 1 or 3");
        }
        Ok(())
    }
}

/// Bookkeeping written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    pub seed: u64,
    pub n_samples: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub min_frames: usize,
    pub max_frames: usize,
    pub config: GenConfig,
}

/// Temporal envelope of a class over normalized time `tau` in `[0, 1]`.
fn envelope(label: ManeuverLabel, tau: f64) -> f64 {
    let ramp = |start: f64| {
        let x = ((tau - start) / (1.0 - start)).clamp(0.0, 1.0);
        x * x * (3.0 - 2.0 * x)
    };
    match label {
        ManeuverLabel::ST => 1.0,
        ManeuverLabel::RT | ManeuverLabel::LT => 0.2 + 0.8 * ramp(0.3),
        ManeuverLabel::RLC | ManeuverLabel::LLC => 0.2 + 0.8 * ramp(0.5),
        ManeuverLabel::SS => (-3.0 * tau).exp(),
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Generates a labeled RAAD-shaped dataset in memory. Deterministic in `seed`.
pub fn generate_synthetic(cfg: &GenConfig, seed: u64) -> Result<(Dataset, GenReport)> {
    cfg.validate()?;
    let probs = cfg.class_probs()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let unit = |mut v: Vec<f64>| {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a *= (d as f64).sqrt() / norm);
        v
    };
    let prototypes: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|_| unit(normal_vec(&mut rng, d))).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut mirror_maps = Vec::new();
    for _ in 0..2 {
        mirror_maps.push(normal_vec(&mut rng, d * d).into_iter().map(|v| v * scale).collect::<Vec<_>>());
    }

    let views: Vec<View> = if cfg.views == 3 {
        View::ALL.to_vec()
    } else {
        vec![View::Front]
    };
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut counts = [0usize; NUM_CLASSES];
    let (mut min_frames, mut max_frames) = (usize::MAX, 0);
    let innov = (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    for i in 0..cfg.n_samples {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut label = ManeuverLabel::SS;
        for (c, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                label = ManeuverLabel::ALL[c];
                break;
            }
        }
        counts[label.code()] += 1;
        let seconds = rng.gen_range(cfg.min_seconds..=cfg.max_seconds);
        let frames = ((seconds * cfg.fps).round() as usize).max(1);
        min_frames = min_frames.min(frames);
        max_frames = max_frames.max(frames);

        let proto = &prototypes[label.code()];
        let mut latent = vec![0.0; frames * d];
        let mut noise_state = normal_vec(&mut rng, d);
        for t in 0..frames {
            let tau = if frames > 1 { t as f64 / (frames - 1) as f64 } else { 1.0 };
            let g = cfg.signal * envelope(label, tau);
            if t > 0 {
                let fresh = normal_vec(&mut rng, d);
                for (s, f) in noise_state.iter_mut().zip(fresh) {
                    *s = cfg.ar_coef * *s + innov * f;
                }
            }
            for j in 0..d {
                latent[t * d + j] = g * proto[j] + cfg.noise * noise_state[j];
            }
        }
        let mut seqs = BTreeMap::new();
        let front: Vec<f32> = latent.iter().map(|&v| v as f32).collect();
        seqs.insert(View::Front, FeatureSequence::new(d, front)?);
        if cfg.views == 3 {
            for (vi, view) in [View::Left, View::Right].into_iter().enumerate() {
                let gain = match (view, label) {
                    (View::Left, ManeuverLabel::LLC) | (View::Right, ManeuverLabel::RLC) => cfg.lane_change_gain,
                    _ => 1.0,
                };
                let m = &mirror_maps[vi];
                let mut out = Vec::with_capacity(frames * d);
                for t in 0..frames {
                    let z = &latent[t * d..(t + 1) * d];
                    let vn = normal_vec(&mut rng, d);
                    for r in 0..d {
                        let mut s = 0.0;
                        for (c, &zv) in z.iter().enumerate() {
                            s += m[r * d + c] * zv;
                        }
                        out.push((gain * s + cfg.noise * cfg.view_noise * vn[r]) as f32);
                    }
                }
                seqs.insert(view, FeatureSequence::new(d, out)?);
            }
        }
        samples.push(Sample {
            id: format!("s{i:05}"),
            label,
            views: seqs,
        });
    }
    let report = GenReport {
        seed,
        n_samples: cfg.n_samples,
        class_counts: ManeuverLabel::ALL
            .iter()
            .map(|l| (l.as_str().to_string(), counts[l.code()]))
            .collect(),
        min_frames,
        max_frames,
        config: cfg.clone(),
    };
    Ok((
        Dataset {
            dim: d,
            views,
            samples,
        },
        report,
    ))
}

/// Generates and writes a dataset to `out`. Files are staged in a sibling
/// directory and moved into place only once everything is written.
pub fn write_synthetic(cfg: &GenConfig, seed: u64, out: &Path) -> Result<GenReport> {
    let (ds, report) = generate_synthetic(cfg, seed)?;
    if out.exists() && fs::read_dir(out).map_err(io_err(out))?.next().is_some() {
        return Err(DataError::Invalid(format!(
            "output directory {} is not empty",
            out.display()
        )));
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = out
        .file_name()
        .ok_or_else(|| DataError::Invalid(format!("bad output path {}", out.display())))?;
    let staging = parent.join(format!(".{}.staging", name.to_string_lossy()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    let result = (|| {
        ds.write(&staging)?;
        let text = toml::to_string(&report).map_err(|e| DataError::Manifest(e.to_string()))?;
        let rp = staging.join(REPORT_FILE);
        fs::write(&rp, text).map_err(io_err(&rp))?;
        if out.exists() {
            fs::remove_dir(out).map_err(io_err(out))?;
        }
        fs::rename(&staging, out).map_err(io_err(out))
    })();
    if result.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    result.map(|_| report)
}

/// Nearest-centroid accuracy on mean-pooled front frames: centroids from
/// `train`, accuracy on `test`.
pub fn centroid_probe(train: &Dataset, test: &Dataset) -> f64 {
    let d = train.dim;
    let pooled = |s: &Sample| -> Vec<f64> {
        let seq = s.view(View::Front).expect("front view");
        let mut m = vec![0.0; d];
        for t in 0..seq.len() {
            m.iter_mut().zip(seq.frame(t)).for_each(|(a, &v)| *a += f64::from(v));
        }
        m.iter_mut().for_each(|a| *a /= seq.len() as f64);
        m
    };
    let mut centroids = vec![vec![0.0; d]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for s in &train.samples {
        let p = pooled(s);
        let c = s.label.code();
        centroids[c].iter_mut().zip(&p).for_each(|(a, b)| *a += b);
        counts[c] += 1;
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        if n > 0 {
            c.iter_mut().for_each(|a| *a /= n as f64);
        }
    }
    let correct = test
        .samples
        .iter()
        .filter(|s| {
            let p = pooled(s);
            let best = (0..NUM_CLASSES)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a].iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = centroids[b].iter().zip(&p).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            best == s.label.code()
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
