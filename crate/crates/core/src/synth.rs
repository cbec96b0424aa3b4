//! Synthetic datasets with known structure, written through the store API.
//!
//! Frames of every generated layer follow `x_t = μ + s ⊙ z_t` where the
//! per-column `z` is standardized to exact zero mean and unit population
//! std, so the pooled vector of an utterance is (up to f32 rounding) `[μ; s]`.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::probe::statistical_pool;
use crate::rng::{derive_seed, seeded, Rng};
use crate::store::{
    write_embedding, EmbeddingMatrix, Manifest, PhonemeClass, PhonemeSegment, QualityGroup, ScoreTask, Scores,
    SpeechTask, StoreError, UtteranceRecord, SCORE_MAX, SCORE_MIN,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Targets are centered here so they sit well inside the score range.
pub const TARGET_CENTER: f64 = 5.0;
/// L1 norm of randomly drawn signal weights.
pub const DEFAULT_WEIGHT_L1: f64 = 4.0;
/// Distance between any two cluster centers.
pub const CLUSTER_SEPARATION: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Number of clusters (1..=3, one per quality group).
    pub k: usize,
    /// Per-coordinate std of frames around their center.
    pub spread: f64,
    /// Offset separating consonant and vowel segments inside a cluster;
    /// zero makes phoneme classes indistinguishable.
    #[serde(default)]
    pub class_offset: f64,
    /// Frames per phoneme segment.
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
}

fn default_segment_len() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub dataset_name: String,
    pub n_utterances: usize,
    pub frames_per_utterance: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub seed: u64,
    pub signal_layer: Option<usize>,
    /// Length `2·dim` when given; drawn at random otherwise.
    pub signal_weights: Option<Vec<f64>>,
    pub noise_sigma: f64,
    pub cluster_spec: Option<ClusterSpec>,
    /// Score field that receives probe targets.
    pub score_task: ScoreTask,
    /// CCA pairs: layers at or above this index share no latent directions.
    pub diverge_from_layer: Option<usize>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dataset_name: "synthetic".into(),
            n_utterances: 100,
            frames_per_utterance: 20,
            dim: 8,
            num_layers: 3,
            seed: 0,
            signal_layer: None,
            signal_weights: None,
            noise_sigma: 0.0,
            cluster_spec: None,
            score_task: ScoreTask::Intelligibility,
            diverge_from_layer: None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n_utterances == 0 || self.dim == 0 || self.num_layers == 0 {
            return bad("n_utterances, dim and num_layers must be positive".into());
        }
        if self.frames_per_utterance < 2 {
            return bad("frames_per_utterance must be at least 2".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        if let Some(l) = self.signal_layer {
            if l >= self.num_layers {
                return bad(format!("signal_layer {l} >= num_layers {}", self.num_layers));
            }
        }
        if let Some(w) = &self.signal_weights {
            if w.len() != 2 * self.dim {
                return bad(format!(
                    "signal_weights has {} entries, expected {}",
                    w.len(),
                    2 * self.dim
                ));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return bad("signal_weights must be finite".into());
            }
        }
        if let Some(c) = &self.cluster_spec {
            if c.k == 0 || c.k > 3 {
                return bad(format!("cluster count {} must be in 1..=3", c.k));
            }
            let needed = if c.class_offset != 0.0 { c.k + 1 } else { c.k };
            if self.dim < needed {
                return bad(format!("dim {} too small for {} cluster axes", self.dim, needed));
            }
            if !(c.spread.is_finite() && c.spread >= 0.0) || !c.class_offset.is_finite() || c.segment_len == 0 {
                return bad("cluster spread/offset must be finite, segment_len positive".into());
            }
        }
        Ok(())
    }
}

fn utterance_id(i: usize) -> String {
    format!("utt{i:04}")
}

fn layer_file(utterance: &str, layer: usize) -> PathBuf {
    PathBuf::from("layers")
        .join(utterance)
        .join(format!("layer_{layer:02}.emb"))
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `n × d` Gaussian block with every column shifted and scaled to exact
/// zero mean and unit population std.
fn standardized_block(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    let mut z = Matrix::from_fn(n, d, |_, _| gaussian(rng));
    for c in 0..d {
        let col = z.column(c);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        for r in 0..n {
            z[(r, c)] = (z[(r, c)] - mean) * inv;
        }
    }
    z
}

fn to_embedding(m: &Matrix) -> EmbeddingMatrix {
    let data = m.as_slice().iter().map(|&v| v as f32).collect();
    EmbeddingMatrix::new(m.rows(), m.cols(), data).expect("shape matches")
}

/// Frames with pooled statistics ≈ `[μ; s]`, μ ~ U(−1,1), s ~ U(0.5,1.5).
fn pooled_structure_frames(rng: &mut Rng, frames: usize, dim: usize) -> EmbeddingMatrix {
    let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut z = standardized_block(rng, frames, dim);
    for r in 0..frames {
        for c in 0..dim {
            z[(r, c)] = mu[c] + s[c] * z[(r, c)];
        }
    }
    to_embedding(&z)
}

fn base_record(i: usize, num_layers: usize, task: SpeechTask) -> UtteranceRecord {
    let id = utterance_id(i);
    UtteranceRecord {
        layer_files: (0..num_layers).map(|l| (l, layer_file(&id, l))).collect(),
        speaker_id: format!("spk{i:04}"),
        utterance_id: id,
        task,
        scores: None,
        group: None,
        phoneme_segments: None,
    }
}

fn write_layers(out_dir: &Path, record: &UtteranceRecord, layers: &[EmbeddingMatrix]) -> Result<()> {
    for (l, m) in layers.iter().enumerate() {
        write_embedding(m, &out_dir.join(&record.layer_files[&l]))?;
    }
    Ok(())
}

fn save_manifest(out_dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = out_dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTruth {
    pub manifest_path: PathBuf,
    pub signal_layer: Option<usize>,
    pub score_task: ScoreTask,
    /// Weights over the `[means ‖ stds]` pooled vector of the signal layer.
    pub weights: Vec<f64>,
    pub bias: f64,
    /// `(utterance_id, target)` in id order; empty without a signal layer.
    pub targets: Vec<(String, f64)>,
}

fn draw_weights(spec: &SynthSpec) -> Vec<f64> {
    if let Some(w) = &spec.signal_weights {
        return w.clone();
    }
    let mut rng = seeded(derive_seed(spec.seed, 2));
    let raw: Vec<f64> = (0..2 * spec.dim).map(|_| gaussian(&mut rng)).collect();
    let l1: f64 = raw.iter().map(|v| v.abs()).sum();
    raw.iter().map(|v| v * DEFAULT_WEIGHT_L1 / l1).collect()
}

/// Probe dataset: the signal layer's pooled vector determines the score
/// linearly (plus Gaussian noise); every other layer is independent noise.
pub fn gen_probe_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<ProbeTruth> {
    spec.validate()?;
    let weights = draw_weights(spec);
    let stream = |layer: usize| seeded(derive_seed(spec.seed, 100 + layer as u64));
    let mut layer_rngs: Vec<Rng> = (0..spec.num_layers).map(stream).collect();
    let mut noise_rng = seeded(derive_seed(spec.seed, 1));

    // The stds half of the pooled vector has mean 1, the means half mean 0.
    let bias = TARGET_CENTER - weights[spec.dim..].iter().sum::<f64>();

    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut targets = Vec::new();
    for i in 0..spec.n_utterances {
        let mut record = base_record(i, spec.num_layers, SpeechTask::Reading);
        let layers: Vec<EmbeddingMatrix> = layer_rngs
            .iter_mut()
            .map(|rng| pooled_structure_frames(rng, spec.frames_per_utterance, spec.dim))
            .collect();
        if let Some(sl) = spec.signal_layer {
            let pooled = statistical_pool(&layers[sl]);
            let clean: f64 = bias + weights.iter().zip(pooled.as_slice()).map(|(w, x)| w * x).sum::<f64>();
            let target = clean + spec.noise_sigma * gaussian(&mut noise_rng);
            if !(SCORE_MIN..=SCORE_MAX).contains(&target) {
                return Err(SynthError::InvalidSpec(format!(
                    "target {target} for {} leaves the score range; shrink signal_weights",
                    record.utterance_id
                )));
            }
            let mut scores = Scores::default();
            match spec.score_task {
                ScoreTask::Intelligibility => scores.intelligibility = Some(target),
                ScoreTask::Severity => scores.severity = Some(target),
            }
            record.scores = Some(scores);
            targets.push((record.utterance_id.clone(), target));
        }
        write_layers(out_dir, &record, &layers)?;
        records.push(record);
    }
    let manifest = Manifest {
        dataset_name: spec.dataset_name.clone(),
        num_layers: spec.num_layers,
        embedding_dim: spec.dim,
        records,
    };
    Ok(ProbeTruth {
        manifest_path: save_manifest(out_dir, &manifest)?,
        signal_layer: spec.signal_layer,
        score_task: spec.score_task,
        weights,
        bias,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaPairTruth {
    pub manifest_a: PathBuf,
    pub manifest_b: PathBuf,
    /// Number of latent directions the two views share, per layer.
    pub shared_rank: Vec<usize>,
}

/// Random invertible `d × d` map: orthogonal factor times scales in [0.5, 2].
fn random_mixing(rng: &mut Rng, d: usize) -> Result<Matrix> {
    let g = Matrix::from_fn(d, d, |_, _| gaussian(rng));
    let q = linalg::qr(&g)?.q;
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    Ok(q.scale_columns(&scales))
}

/// Two datasets whose layer-`l` frames are `[Z | E_a]·M_a + σ·N_a` and
/// `[Z | E_b]·M_b + σ·N_b` with a shared latent `Z` of the given rank.
pub fn gen_cca_pair(spec: &SynthSpec, shared_rank: usize, out_a: &Path, out_b: &Path) -> Result<CcaPairTruth> {
    spec.validate()?;
    if shared_rank > spec.dim {
        return Err(SynthError::InvalidSpec(format!(
            "shared_rank {shared_rank} exceeds dim {}",
            spec.dim
        )));
    }
    let n = spec.n_utterances * spec.frames_per_utterance;
    let d = spec.dim;
    let mut ranks = Vec::with_capacity(spec.num_layers);
    let mut per_layer: Vec<(Matrix, Matrix)> = Vec::with_capacity(spec.num_layers);
    for l in 0..spec.num_layers {
        let r = match spec.diverge_from_layer {
            Some(j) if l >= j => 0,
            _ => shared_rank,
        };
        ranks.push(r);
        let mut rng = seeded(derive_seed(spec.seed, 200 + l as u64));
        let z = Matrix::from_fn(n, r, |_, _| gaussian(&mut rng));
        let view = |rng: &mut Rng| -> Result<Matrix> {
            let own = Matrix::from_fn(n, d - r, |_, _| gaussian(rng));
            let latent = Matrix::from_fn(n, d, |i, c| if c < r { z[(i, c)] } else { own[(i, c - r)] });
            let mut x = latent.matmul(&random_mixing(rng, d)?)?;
            for v in x.as_mut_slice() {
                *v += spec.noise_sigma * gaussian(rng);
            }
            Ok(x)
        };
        let a = view(&mut rng)?;
        let b = view(&mut rng)?;
        per_layer.push((a, b));
    }

    let write_side = |out: &Path, pick: fn(&(Matrix, Matrix)) -> &Matrix, name: &str| -> Result<PathBuf> {
        let mut records = Vec::with_capacity(spec.n_utterances);
        for i in 0..spec.n_utterances {
            let record = base_record(i, spec.num_layers, SpeechTask::Reading);
            let rows: Vec<usize> = (i * spec.frames_per_utterance..(i + 1) * spec.frames_per_utterance).collect();
            let layers: Vec<EmbeddingMatrix> = per_layer
                .iter()
                .map(|pair| to_embedding(&pick(pair).select_rows(&rows)))
                .collect();
            write_layers(out, &record, &layers)?;
            records.push(record);
        }
        let manifest = Manifest {
            dataset_name: format!("{}-{name}", spec.dataset_name),
            num_layers: spec.num_layers,
            embedding_dim: d,
            records,
        };
        save_manifest(out, &manifest)
    };
    let manifest_a = write_side(out_a, |p| &p.0, "a")?;
    let manifest_b = write_side(out_b, |p| &p.1, "b")?;
    Ok(CcaPairTruth {
        manifest_a,
        manifest_b,
        shared_rank: ranks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    pub manifest_path: PathBuf,
    /// Cluster centers (one per quality group in use), length `dim` each.
    pub centers: Vec<Vec<f64>>,
    /// `(utterance_id, cluster index)` in id order.
    pub assignments: Vec<(String, usize)>,
}

const GROUPS: [QualityGroup; 3] = [QualityGroup::Healthy, QualityGroup::Mild, QualityGroup::Severe];

/// Sustained-vowel dataset whose frames scatter around one of `k` centers
/// (pairwise `CLUSTER_SEPARATION` apart), the cluster fixed per utterance and
/// exposed as its quality group. Each utterance also carries alternating
/// consonant/vowel segments; with a nonzero `class_offset` the two classes
/// are shifted apart along an extra axis. Every layer holds the same
/// geometry drawn independently.
pub fn gen_cluster_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<ClusterTruth> {
    spec.validate()?;
    let cs = spec
        .cluster_spec
        .as_ref()
        .ok_or_else(|| SynthError::InvalidSpec("cluster_spec is required".into()))?;
    let axis = CLUSTER_SEPARATION / std::f64::consts::SQRT_2;
    let centers: Vec<Vec<f64>> = (0..cs.k)
        .map(|c| (0..spec.dim).map(|j| if j == c { axis } else { 0.0 }).collect())
        .collect();

    let segments: Vec<PhonemeSegment> = (0..spec.frames_per_utterance)
        .step_by(cs.segment_len)
        .enumerate()
        .map(|(s, start)| {
            let class = if s % 2 == 0 {
                PhonemeClass::Consonant
            } else {
                PhonemeClass::Vowel
            };
            PhonemeSegment {
                start_frame: start,
                end_frame: (start + cs.segment_len).min(spec.frames_per_utterance),
                phoneme_label: match class {
                    PhonemeClass::Consonant => "t".into(),
                    PhonemeClass::Vowel => "a".into(),
                },
                phoneme_class: class,
            }
        })
        .collect();
    let class_shift = |frame: usize| -> f64 {
        let seg = &segments[frame / cs.segment_len];
        match seg.phoneme_class {
            PhonemeClass::Consonant => -0.5 * cs.class_offset,
            PhonemeClass::Vowel => 0.5 * cs.class_offset,
        }
    };

    let mut rngs: Vec<Rng> = (0..spec.num_layers)
        .map(|l| seeded(derive_seed(spec.seed, 300 + l as u64)))
        .collect();
    let mut records = Vec::with_capacity(spec.n_utterances);
    let mut assignments = Vec::with_capacity(spec.n_utterances);
    for i in 0..spec.n_utterances {
        let cluster = i % cs.k;
        let mut record = base_record(i, spec.num_layers, SpeechTask::SustainedVowel);
        record.group = Some(GROUPS[cluster]);
        record.phoneme_segments = Some(segments.clone());
        let layers: Vec<EmbeddingMatrix> = rngs
            .iter_mut()
            .map(|rng| {
                let m = Matrix::from_fn(spec.frames_per_utterance, spec.dim, |f, j| {
                    let shift = if j == cs.k { class_shift(f) } else { 0.0 };
                    centers[cluster][j] + shift + cs.spread * gaussian(rng)
                });
                to_embedding(&m)
            })
            .collect();
        write_layers(out_dir, &record, &layers)?;
        assignments.push((record.utterance_id.clone(), cluster));
        records.push(record);
    }
    let manifest = Manifest {
        dataset_name: spec.dataset_name.clone(),
        num_layers: spec.num_layers,
        embedding_dim: spec.dim,
        records,
    };
    Ok(ClusterTruth {
        manifest_path: save_manifest(out_dir, &manifest)?,
        centers,
        assignments,
    })
}
