//! Canonical correlation analysis between two layer representations.
//!
//! Three scalar summaries are provided:
//!
//! * **mean CCA**: the arithmetic mean of the canonical correlations;
//! * **SVCCA**: each view is first truncated to the leading singular
//!   directions that explain a given fraction of its variance;
//! * **PWCCA**: canonical correlations weighted by how much each canonical
//!   component of the *first* view accounts for that view's columns.
//!
//! All routes center both views globally, build an orthonormal basis for
//! each column space from an SVD (discarding directions whose singular value
//! falls below `reg_eps · σ_max`), and read the canonical correlations off the
//! singular values of `Qxᵀ·Qy`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, center_columns, LinalgError, Matrix};
use crate::store::{Dataset, StoreError};

pub const DEFAULT_REG_EPS: f64 = 1e-6;
pub const DEFAULT_FRAME_BUDGET: usize = 50_000;
pub const DEFAULT_SVCCA_THRESHOLD: f64 = 0.99;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error("views have different sample counts ({x} vs {y})")]
    SampleCountMismatch { x: usize, y: usize },
    #[error("too few samples: {n} rows for views of width {needed}")]
    LowSampleCount { n: usize, needed: usize },
    #[error("the {0} view has zero variance in every column")]
    DegenerateView(ViewSide),
    #[error("no canonical correlations to summarize")]
    EmptyCorrelations,
    #[error("variance threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("utterance sets differ: only in A {only_a:?}, only in B {only_b:?}")]
    UtteranceMismatch { only_a: Vec<String>, only_b: Vec<String> },
    #[error("utterance {utterance}: {frames_a} frames in A, {frames_b} in B")]
    FrameCountMismatch {
        utterance: String,
        frames_a: usize,
        frames_b: usize,
    },
    #[error("layer {layer} missing from dataset {dataset}")]
    LayerMissing { layer: usize, dataset: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, CcaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSide {
    First,
    Second,
}

impl fmt::Display for ViewSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewSide::First => "first",
            ViewSide::Second => "second",
        })
    }
}

/// Two views of the same `n` samples (frames), possibly of different widths.
#[derive(Debug, Clone, Copy)]
pub struct RepresentationPair<'a> {
    pub x: &'a Matrix,
    pub y: &'a Matrix,
}

impl<'a> RepresentationPair<'a> {
    pub fn new(x: &'a Matrix, y: &'a Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(CcaError::SampleCountMismatch {
                x: x.rows(),
                y: y.rows(),
            });
        }
        let needed = x.cols().max(y.cols());
        if x.rows() < needed || x.rows() < 2 {
            return Err(CcaError::LowSampleCount {
                n: x.rows(),
                needed: needed.max(2),
            });
        }
        Ok(Self { x, y })
    }

    pub fn swapped(self) -> Self {
        Self { x: self.y, y: self.x }
    }
}

/// Orthonormal basis of a centered view's column space.
struct ViewBasis {
    centered: Matrix,
    /// n × rank
    q: Matrix,
}

fn view_basis(view: &Matrix, reg_eps: f64, side: ViewSide) -> Result<ViewBasis> {
    let centered = center_columns(view);
    let svd = linalg::svd(&centered)?;
    let rank = effective_rank(&svd.s, centered.rows(), reg_eps);
    if rank == 0 {
        return Err(CcaError::DegenerateView(side));
    }
    Ok(ViewBasis {
        q: svd.u.leading_columns(rank),
        centered,
    })
}

/// Count of singular values kept after dropping those below
/// `reg_eps · σ_max` (and anything at the rounding floor).
fn effective_rank(s: &[f64], n: usize, reg_eps: f64) -> usize {
    let smax = s.first().copied().unwrap_or(0.0);
    if smax <= 0.0 {
        return 0;
    }
    let floor = (n as f64) * f64::EPSILON * 16.0;
    let cut = smax * reg_eps.max(floor);
    s.iter().take_while(|&&v| v >= cut && v > 0.0).count()
}

struct CcaCore {
    /// Unclipped canonical correlations, non-increasing.
    rho_raw: Vec<f64>,
    first: ViewBasis,
    /// rank_x × k left singular vectors of QxᵀQy.
    a: Matrix,
}

fn cca_core(pair: RepresentationPair<'_>, reg_eps: f64) -> Result<CcaCore> {
    let first = view_basis(pair.x, reg_eps, ViewSide::First)?;
    let second = view_basis(pair.y, reg_eps, ViewSide::Second)?;
    let m = first.q.t_matmul(&second.q)?;
    let svd = linalg::svd(&m)?;
    Ok(CcaCore {
        rho_raw: svd.s,
        first,
        a: svd.u,
    })
}

fn clip_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Canonical correlations in `[0, 1]`, sorted non-increasing.
pub fn cca_correlations(pair: RepresentationPair<'_>, reg_eps: f64) -> Result<Vec<f64>> {
    Ok(cca_core(pair, reg_eps)?.rho_raw.into_iter().map(clip_unit).collect())
}

pub fn mean_cca(rho: &[f64]) -> Result<f64> {
    if rho.is_empty() {
        return Err(CcaError::EmptyCorrelations);
    }
    Ok(rho.iter().sum::<f64>() / rho.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvccaResult {
    pub value: f64,
    pub kx: usize,
    pub ky: usize,
    pub rho: Vec<f64>,
}

/// Smallest `k` whose top-`k` squared singular values reach `threshold` of
/// the total.
pub fn variance_rank(s: &[f64], threshold: f64) -> usize {
    let total: f64 = s.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v * v;
        if acc / total >= threshold {
            return i + 1;
        }
    }
    s.len()
}

fn svd_truncate(view: &Matrix, threshold: f64, side: ViewSide) -> Result<(Matrix, usize)> {
    let centered = center_columns(view);
    let svd = linalg::svd(&centered)?;
    let k = variance_rank(&svd.s, threshold);
    if k == 0 {
        return Err(CcaError::DegenerateView(side));
    }
    // U_k · diag(s_k): the view expressed in its top-k singular directions.
    let projected = svd.u.leading_columns(k).scale_columns(&svd.s[..k]);
    Ok((projected, k))
}

pub fn svcca(pair: RepresentationPair<'_>, threshold: f64, reg_eps: f64) -> Result<SvccaResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CcaError::InvalidThreshold(threshold));
    }
    let (px, kx) = svd_truncate(pair.x, threshold, ViewSide::First)?;
    let (py, ky) = svd_truncate(pair.y, threshold, ViewSide::Second)?;
    let rho = cca_correlations(RepresentationPair { x: &px, y: &py }, reg_eps)?;
    Ok(SvccaResult {
        value: mean_cca(&rho)?,
        kx,
        ky,
        rho,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwccaResult {
    pub value: f64,
    /// Non-negative, sums to 1; aligned with `rho`.
    pub weights: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Projection-weighted CCA. Weights come from the first view, so the result
/// is not symmetric in its arguments.
pub fn pwcca(pair: RepresentationPair<'_>, reg_eps: f64) -> Result<PwccaResult> {
    let core = cca_core(pair, reg_eps)?;
    // Canonical components of the first view, unit norm: h_i = Qx · a_i.
    let h = core.first.q.matmul(&core.a)?;
    let projections = h.t_matmul(&core.first.centered)?;
    let raw: Vec<f64> = (0..projections.rows())
        .map(|i| projections.row(i).iter().map(|v| v.abs()).sum())
        .collect();
    let total: f64 = raw.iter().sum();
    let rho: Vec<f64> = core.rho_raw.into_iter().map(clip_unit).collect();
    let weights: Vec<f64> = if total > 0.0 {
        raw.iter().map(|w| w / total).collect()
    } else {
        vec![1.0 / rho.len() as f64; rho.len()]
    };
    let value = clip_unit(weights.iter().zip(&rho).map(|(w, r)| w * r).sum());
    Ok(PwccaResult { value, weights, rho })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcaConfig {
    pub reg_eps: f64,
    pub svcca_threshold: f64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self {
            reg_eps: DEFAULT_REG_EPS,
            svcca_threshold: DEFAULT_SVCCA_THRESHOLD,
        }
    }
}

/// Every summary for one pair of views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    pub rho: Vec<f64>,
    pub mean_cca: f64,
    pub svcca: f64,
    pub svcca_dims_kept: (usize, usize),
    pub pwcca: f64,
    pub pwcca_weights: Vec<f64>,
}

impl CcaResult {
    pub fn compute(pair: RepresentationPair<'_>, config: &CcaConfig) -> Result<Self> {
        let pw = pwcca(pair, config.reg_eps)?;
        let sv = svcca(pair, config.svcca_threshold, config.reg_eps)?;
        Ok(Self {
            mean_cca: mean_cca(&pw.rho)?,
            rho: pw.rho,
            svcca: sv.value,
            svcca_dims_kept: (sv.kx, sv.ky),
            pwcca: pw.value,
            pwcca_weights: pw.weights,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MeanCca,
    Svcca,
    Pwcca,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::MeanCca => "mean_cca",
            Variant::Svcca => "svcca",
            Variant::Pwcca => "pwcca",
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean_cca" | "mean-cca" | "cca" => Ok(Variant::MeanCca),
            "svcca" => Ok(Variant::Svcca),
            "pwcca" => Ok(Variant::Pwcca),
            other => Err(format!("unknown CCA variant {other:?}")),
        }
    }
}

pub fn similarity(pair: RepresentationPair<'_>, variant: Variant, config: &CcaConfig) -> Result<f64> {
    match variant {
        Variant::MeanCca => mean_cca(&cca_correlations(pair, config.reg_eps)?),
        Variant::Svcca => Ok(svcca(pair, config.svcca_threshold, config.reg_eps)?.value),
        Variant::Pwcca => Ok(pwcca(pair, config.reg_eps)?.value),
    }
}

/// How concatenated frames are thinned before CCA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum FrameSubsample {
    All,
    /// Uniform stride `ceil(N / budget)` starting at frame 0.
    Budget {
        max_frames: usize,
    },
}

impl Default for FrameSubsample {
    fn default() -> Self {
        FrameSubsample::Budget {
            max_frames: DEFAULT_FRAME_BUDGET,
        }
    }
}

impl FrameSubsample {
    pub fn stride(self, total: usize) -> usize {
        match self {
            FrameSubsample::All => 1,
            FrameSubsample::Budget { max_frames } => {
                if max_frames == 0 || total <= max_frames {
                    1
                } else {
                    total.div_ceil(max_frames)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub variant: Variant,
    /// Layers of the first dataset to analyze.
    pub layers: Vec<usize>,
    /// When set, every layer of A is compared with this single layer of B
    /// (e.g. the final layer of a phoneme recognizer); otherwise layer `l`
    /// of A is compared with layer `l` of B.
    pub fixed_reference_layer: Option<usize>,
    pub subsample: FrameSubsample,
    pub cca: CcaConfig,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub variant: Variant,
    pub fixed_reference_layer: Option<usize>,
    /// Frames per layer after subsampling.
    pub frames_used: usize,
    pub points: Vec<CurvePoint>,
}

impl SimilarityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,value\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.layer, p.value));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("curve serializes") + "\n"
    }
}

/// Frames of every utterance for one layer, stacked in utterance-id order
/// and thinned by `stride`.
fn stacked_layer(ds: &Dataset, layer: usize, stride: usize) -> Result<Matrix> {
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = ds.embedding_dim();
    let mut global = 0usize;
    let mut kept = 0usize;
    for rec in ds.records() {
        let m = ds.load_layer(rec, layer)?;
        dim = m.dim();
        for f in 0..m.n_frames() {
            if global.is_multiple_of(stride) {
                rows.extend(m.frame(f).iter().map(|&v| f64::from(v)));
                kept += 1;
            }
            global += 1;
        }
    }
    Ok(Matrix::from_vec(kept, dim, rows)?)
}

fn check_alignment(a: &Dataset, b: &Dataset) -> Result<usize> {
    let ids_a: BTreeSet<&str> = a.records().iter().map(|r| r.utterance_id.as_str()).collect();
    let ids_b: BTreeSet<&str> = b.records().iter().map(|r| r.utterance_id.as_str()).collect();
    if ids_a != ids_b {
        return Err(CcaError::UtteranceMismatch {
            only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }
    // Records are sorted by id in both datasets, so they pair up in order.
    let mut total = 0;
    for (ra, rb) in a.records().iter().zip(b.records()) {
        let fa = frames_of(a, ra)?;
        let fb = frames_of(b, rb)?;
        if fa != fb {
            return Err(CcaError::FrameCountMismatch {
                utterance: ra.utterance_id.clone(),
                frames_a: fa,
                frames_b: fb,
            });
        }
        total += fa;
    }
    Ok(total)
}

fn frames_of(ds: &Dataset, rec: &crate::store::UtteranceRecord) -> Result<usize> {
    let layer = *rec.layer_files.keys().next().ok_or_else(|| CcaError::LayerMissing {
        layer: 0,
        dataset: ds.manifest().dataset_name.clone(),
    })?;
    Ok(ds.load_layer(rec, layer)?.n_frames())
}

/// One similarity value per requested layer of `a`.
pub fn layer_similarity_sweep(a: &Dataset, b: &Dataset, config: &SweepConfig) -> Result<SimilarityCurve> {
    for &layer in &config.layers {
        if !a.has_layer(layer) {
            return Err(CcaError::LayerMissing {
                layer,
                dataset: a.manifest().dataset_name.clone(),
            });
        }
        let lb = config.fixed_reference_layer.unwrap_or(layer);
        if !b.has_layer(lb) {
            return Err(CcaError::LayerMissing {
                layer: lb,
                dataset: b.manifest().dataset_name.clone(),
            });
        }
    }
    let total = check_alignment(a, b)?;
    let stride = config.subsample.stride(total);
    let frames_used = total.div_ceil(stride);

    let reference = match config.fixed_reference_layer {
        Some(l) => Some(stacked_layer(b, l, stride)?),
        None => None,
    };

    let values = crate::par::map_indexed(config.workers, config.layers.len(), |i| {
        let layer = config.layers[i];
        let x = stacked_layer(a, layer, stride)?;
        let owned;
        let y = match &reference {
            Some(r) => r,
            None => {
                owned = stacked_layer(b, layer, stride)?;
                &owned
            }
        };
        let pair = RepresentationPair::new(&x, y)?;
        similarity(pair, config.variant, &config.cca)
    });

    let mut points = Vec::with_capacity(values.len());
    for (layer, v) in config.layers.iter().zip(values) {
        points.push(CurvePoint {
            layer: *layer,
            value: v?,
        });
    }
    Ok(SimilarityCurve {
        variant: config.variant,
        fixed_reference_layer: config.fixed_reference_layer,
        frames_used,
        points,
    })
}
