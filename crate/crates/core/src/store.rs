//! On-disk embedding format and dataset manifests.
//!
//! An embedding file holds one layer's hidden states for one utterance:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       4     version (u32 LE, currently 1)
//! 8       8     n_frames (u64 LE)
//! 16      8     dim (u64 LE)
//! 24      4·n·d payload, f32 LE, row-major (frame-major)
//! ```
//!
//! A manifest is a JSON document listing utterances and, per utterance, one
//! embedding file per layer. Relative paths resolve against the manifest's
//! directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 24;

pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 10.0;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?} (expected \"EMB1\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: u64 },
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFiniteValue { frame: usize, dim: usize },
    #[error("invalid shape {n_frames}x{dim} for {len} values")]
    InvalidShape { n_frames: usize, dim: usize, len: usize },
    #[error("manifest parse error in {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("utterance {utterance} has no file for layer {layer}")]
    LayerMissing { utterance: String, layer: usize },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One layer's hidden states for one utterance: `n_frames × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if n_frames == 0 || dim == 0 || n_frames.checked_mul(dim) != Some(data.len()) {
            return Err(StoreError::InvalidShape {
                n_frames,
                dim,
                len: data.len(),
            });
        }
        let m = Self { n_frames, dim, data };
        m.check_finite()?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::InvalidShape {
                    n_frames: rows.len(),
                    dim,
                    len: data.len() + r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(StoreError::NonFiniteValue {
                frame: i / self.dim,
                dim: i % self.dim,
            }),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Widen to an analysis matrix.
    pub fn to_f64(&self) -> crate::linalg::Matrix {
        crate::linalg::Matrix::from_vec(
            self.n_frames,
            self.dim,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked on construction")
    }
}

pub fn encode_embedding(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EMBEDDING_HEADER_LEN + matrix.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.n_frames as u64).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u64).to_le_bytes());
    for v in &matrix.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_embedding(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < EMBEDDING_HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != EMBEDDING_MAGIC {
            return Err(StoreError::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(StoreError::TruncatedPayload {
            expected: EMBEDDING_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != EMBEDDING_MAGIC {
        return Err(StoreError::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(StoreError::VersionUnsupported(version));
    }
    let n_frames = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = &bytes[EMBEDDING_HEADER_LEN..];
    let expected = n_frames
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .unwrap_or(u64::MAX);
    let found = payload.len() as u64;
    if found < expected {
        return Err(StoreError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(StoreError::TrailingData {
            extra: found - expected,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(n_frames as usize, dim as usize, data)
}

pub fn write_embedding(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    matrix.check_finite()?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_embedding(matrix)).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_embedding(path: &Path) -> Result<EmbeddingMatrix> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(io_err(path))?;
    decode_embedding(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeechTask {
    Reading,
    SustainedVowel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityGroup {
    Healthy,
    Mild,
    Severe,
}

impl QualityGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityGroup::Healthy => "healthy",
            QualityGroup::Mild => "mild",
            QualityGroup::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhonemeClass {
    Consonant,
    Vowel,
}

impl PhonemeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PhonemeClass::Consonant => "consonant",
            PhonemeClass::Vowel => "vowel",
        }
    }
}

/// Which perceptual score a probe regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTask {
    Intelligibility,
    Severity,
}

impl ScoreTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreTask::Intelligibility => "intelligibility",
            ScoreTask::Severity => "severity",
        }
    }
}

/// Expert perceptual scores on the 0 (severe) to 10 (normal) scale.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intelligibility: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<f64>,
}

impl Scores {
    pub fn get(&self, task: ScoreTask) -> Option<f64> {
        match task {
            ScoreTask::Intelligibility => self.intelligibility,
            ScoreTask::Severity => self.severity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhonemeSegment {
    pub start_frame: usize,
    /// Exclusive.
    pub end_frame: usize,
    pub phoneme_label: String,
    pub phoneme_class: PhonemeClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub task: SpeechTask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Scores>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<QualityGroup>,
    /// Layer index → embedding file path.
    pub layer_files: BTreeMap<usize, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phoneme_segments: Option<Vec<PhonemeSegment>>,
}

impl UtteranceRecord {
    pub fn score(&self, task: ScoreTask) -> Option<f64> {
        self.scores.and_then(|s| s.get(task))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    /// Number of layer files per utterance (indices `0..num_layers`).
    pub num_layers: usize,
    pub embedding_dim: usize,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|source| StoreError::ManifestParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
        }
        fs::write(path, self.to_json() + "\n").map_err(io_err(path))
    }
}

/// Score thresholds for deriving quality groups when a corpus ships only
/// scores. Scores below `severe_below` are severe, below `mild_below` mild,
/// the rest healthy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupBins {
    pub task: ScoreTask,
    pub severe_below: f64,
    pub mild_below: f64,
}

impl GroupBins {
    pub fn classify(&self, score: f64) -> QualityGroup {
        if score < self.severe_below {
            QualityGroup::Severe
        } else if score < self.mild_below {
            QualityGroup::Mild
        } else {
            QualityGroup::Healthy
        }
    }

    /// Fill `group` for records that carry the binned score but no explicit
    /// group. Returns how many records were assigned.
    pub fn apply(&self, manifest: &mut Manifest) -> usize {
        let mut n = 0;
        for rec in &mut manifest.records {
            if rec.group.is_none() {
                if let Some(s) = rec.score(self.task) {
                    rec.group = Some(self.classify(s));
                    n += 1;
                }
            }
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingFile {
        utterance: String,
        layer: usize,
        path: PathBuf,
    },
    UnreadableFile {
        utterance: String,
        layer: usize,
        path: PathBuf,
        reason: String,
    },
    DimMismatch {
        utterance: String,
        layer: usize,
        expected: usize,
        found: usize,
    },
    FrameMismatch {
        utterance: String,
        layer: usize,
        expected: usize,
        found: usize,
    },
    LayerIndicesInvalid {
        utterance: String,
        expected: usize,
        found: Vec<usize>,
    },
    ScoreOutOfRange {
        utterance: String,
        task: ScoreTask,
        value: f64,
    },
    SegmentOutOfBounds {
        utterance: String,
        index: usize,
        start_frame: usize,
        end_frame: usize,
        n_frames: usize,
    },
    DuplicateUtterance {
        utterance: String,
    },
    EmptyDataset,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::MissingFile { utterance, layer, path } => {
                write!(f, "MissingFile: {utterance} layer {layer}: {}", path.display())
            }
            Violation::UnreadableFile {
                utterance,
                layer,
                path,
                reason,
            } => write!(
                f,
                "UnreadableFile: {utterance} layer {layer}: {}: {reason}",
                path.display()
            ),
            Violation::DimMismatch {
                utterance,
                layer,
                expected,
                found,
            } => write!(
                f,
                "DimMismatch: {utterance} layer {layer}: dim {found}, manifest says {expected}"
            ),
            Violation::FrameMismatch {
                utterance,
                layer,
                expected,
                found,
            } => write!(
                f,
                "FrameMismatch: {utterance} layer {layer}: {found} frames, layer 0 has {expected}"
            ),
            Violation::LayerIndicesInvalid {
                utterance,
                expected,
                found,
            } => write!(
                f,
                "LayerIndicesInvalid: {utterance}: expected 0..{expected}, found {found:?}"
            ),
            Violation::ScoreOutOfRange { utterance, task, value } => write!(
                f,
                "ScoreOutOfRange: {utterance} {} = {value} (allowed 0..=10)",
                task.as_str()
            ),
            Violation::SegmentOutOfBounds {
                utterance,
                index,
                start_frame,
                end_frame,
                n_frames,
            } => write!(
                f,
                "SegmentOutOfBounds: {utterance} segment {index} [{start_frame}, {end_frame}) with {n_frames} frames"
            ),
            Violation::DuplicateUtterance { utterance } => {
                write!(f, "DuplicateUtterance: {utterance}")
            }
            Violation::EmptyDataset => write!(f, "EmptyDataset: manifest has no records"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

/// Check every record and every referenced file. Violations are collected,
/// never raised.
pub fn validate_manifest(manifest: &Manifest, base_dir: &Path) -> ValidationReport {
    let mut violations = Vec::new();
    if manifest.records.is_empty() {
        violations.push(Violation::EmptyDataset);
    }
    let mut seen = BTreeSet::new();
    for rec in &manifest.records {
        let id = &rec.utterance_id;
        if !seen.insert(id.as_str()) {
            violations.push(Violation::DuplicateUtterance { utterance: id.clone() });
        }

        if let Some(scores) = rec.scores {
            for task in [ScoreTask::Intelligibility, ScoreTask::Severity] {
                if let Some(v) = scores.get(task) {
                    if !(SCORE_MIN..=SCORE_MAX).contains(&v) {
                        violations.push(Violation::ScoreOutOfRange {
                            utterance: id.clone(),
                            task,
                            value: v,
                        });
                    }
                }
            }
        }

        let indices: Vec<usize> = rec.layer_files.keys().copied().collect();
        let contiguous = indices.iter().enumerate().all(|(i, &l)| i == l);
        if !contiguous || indices.len() != manifest.num_layers {
            violations.push(Violation::LayerIndicesInvalid {
                utterance: id.clone(),
                expected: manifest.num_layers,
                found: indices,
            });
        }

        let mut frames: Option<usize> = None;
        for (&layer, rel) in &rec.layer_files {
            let path = resolve(base_dir, rel);
            if !path.is_file() {
                violations.push(Violation::MissingFile {
                    utterance: id.clone(),
                    layer,
                    path,
                });
                continue;
            }
            let m = match read_embedding(&path) {
                Ok(m) => m,
                Err(e) => {
                    violations.push(Violation::UnreadableFile {
                        utterance: id.clone(),
                        layer,
                        path,
                        reason: e.to_string(),
                    });
                    continue;
                }
            };
            if m.dim() != manifest.embedding_dim {
                violations.push(Violation::DimMismatch {
                    utterance: id.clone(),
                    layer,
                    expected: manifest.embedding_dim,
                    found: m.dim(),
                });
            }
            match frames {
                None => frames = Some(m.n_frames()),
                Some(n) if n != m.n_frames() => violations.push(Violation::FrameMismatch {
                    utterance: id.clone(),
                    layer,
                    expected: n,
                    found: m.n_frames(),
                }),
                Some(_) => {}
            }
        }

        if let Some(segments) = &rec.phoneme_segments {
            // Without a readable layer the frame count is unknown; bounds are
            // then only checked for start < end.
            let n_frames = frames.unwrap_or(usize::MAX);
            for (index, seg) in segments.iter().enumerate() {
                if seg.start_frame >= seg.end_frame || seg.end_frame > n_frames {
                    violations.push(Violation::SegmentOutOfBounds {
                        utterance: id.clone(),
                        index,
                        start_frame: seg.start_frame,
                        end_frame: seg.end_frame,
                        n_frames: frames.unwrap_or(0),
                    });
                }
            }
        }
    }
    ValidationReport { violations }
}

fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// A manifest bound to its location on disk. Records are held sorted by
/// utterance id, so datasets that differ only in record order behave
/// identically everywhere downstream.
#[derive(Debug, Clone)]
pub struct Dataset {
    manifest: Manifest,
    base_dir: PathBuf,
}

impl Dataset {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let base_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self::new(manifest, base_dir))
    }

    pub fn new(mut manifest: Manifest, base_dir: PathBuf) -> Self {
        manifest.records.sort_by(|a, b| a.utterance_id.cmp(&b.utterance_id));
        Self { manifest, base_dir }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn records(&self) -> &[UtteranceRecord] {
        &self.manifest.records
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn num_layers(&self) -> usize {
        self.manifest.num_layers
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim
    }

    pub fn validate(&self) -> ValidationReport {
        validate_manifest(&self.manifest, &self.base_dir)
    }

    pub fn layer_path(&self, record: &UtteranceRecord, layer: usize) -> Result<PathBuf> {
        record
            .layer_files
            .get(&layer)
            .map(|p| resolve(&self.base_dir, p))
            .ok_or_else(|| StoreError::LayerMissing {
                utterance: record.utterance_id.clone(),
                layer,
            })
    }

    pub fn load_layer(&self, record: &UtteranceRecord, layer: usize) -> Result<EmbeddingMatrix> {
        read_embedding(&self.layer_path(record, layer)?)
    }

    pub fn has_layer(&self, layer: usize) -> bool {
        !self.records().is_empty() && self.records().iter().all(|r| r.layer_files.contains_key(&layer))
    }
}
