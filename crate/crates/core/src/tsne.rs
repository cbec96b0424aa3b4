//! Exact t-SNE and scatter export.
//!
//! Input affinities use a Gaussian kernel whose per-point precision is found
//! by bisection to hit a target perplexity; the embedding uses a Student-t
//! kernel and is optimized by gradient descent on KL(P‖Q) with momentum,
//! per-coordinate gains and early exaggeration. Cost is O(n²) per iteration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, center_columns, Matrix};
use crate::probe::pool_frames;
use crate::rng::{derive_seed, seeded};
use crate::store::{Dataset, SpeechTask, StoreError};

#[derive(Debug, Error)]
pub enum TsneError {
    #[error("perplexity {perplexity} invalid for {n} points (need 2 <= perplexity < n)")]
    InvalidPerplexity { perplexity: f64, n: usize },
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("bandwidth search failed for row {row}: perplexity {achieved} vs target {target}")]
    BisectionFailure { row: usize, achieved: f64, target: f64 },
    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },
    #[error("invalid t-SNE config: {0}")]
    InvalidConfig(String),
    #[error("no phoneme segments in the dataset")]
    NoSegments,
    #[error("no records match the frame-level filter")]
    NoMatchingRecords,
    #[error("non-finite input at row {0}")]
    NonFiniteInput(usize),
    #[error("I/O error on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
}

pub type Result<T> = std::result::Result<T, TsneError>;

/// Largest tolerated gap between achieved and target row perplexity.
pub const PERPLEXITY_TOLERANCE: f64 = 1e-5;
const JITTER_SCALE: f64 = 1e-10;
const MAX_BISECTION_STEPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    RandomGaussian,
    Pca,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iteration: usize,
    pub seed: u64,
    pub init: Init,
    /// Threads for the affinity rows; the descent loop is always serial.
    pub workers: usize,
    /// KL is recorded every this many iterations (and at both ends).
    pub kl_log_interval: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iteration: 250,
            seed: 0,
            init: Init::RandomGaussian,
            workers: 1,
            kl_log_interval: 50,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if n < 5 {
            return Err(TsneError::TooFewPoints { needed: 5, found: n });
        }
        check_perplexity(self.perplexity, n)?;
        let positive = [
            self.early_exaggeration,
            self.learning_rate,
            self.initial_momentum,
            self.final_momentum,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.iterations == 0 || self.kl_log_interval == 0 {
            return Err(TsneError::InvalidConfig(
                "rates, momenta, exaggeration, iterations and log interval must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn check_perplexity(perplexity: f64, n: usize) -> Result<()> {
    if !(perplexity >= 2.0 && perplexity < n as f64) {
        return Err(TsneError::InvalidPerplexity { perplexity, n });
    }
    Ok(())
}

/// Symmetrized input affinities.
#[derive(Debug, Clone)]
pub struct Affinities {
    /// n×n, symmetric, zero diagonal, sums to 1.
    pub p: Matrix,
    /// Per-row Gaussian precision β_i (kernel `exp(-β_i‖x_i − x_j‖²)`).
    pub betas: Vec<f64>,
    /// Perplexity achieved by each conditional distribution.
    pub row_perplexity: Vec<f64>,
    /// Number of duplicate points that were jittered.
    pub jittered: usize,
}

pub fn squared_distances(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Replace exact duplicates (after the first occurrence) with slightly
/// perturbed copies so every row's bandwidth search is well posed.
fn jitter_duplicates(points: &Matrix) -> (Matrix, usize) {
    let n = points.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut out = points.clone();
    let mut rng = seeded(0x7153_D0B1);
    let mut jittered = 0;
    for w in order.windows(2) {
        if points.row(w[0]) == points.row(w[1]) {
            for v in out.row_mut(w[1]) {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += JITTER_SCALE * e;
            }
            jittered += 1;
        }
    }
    (out, jittered)
}

struct RowSolution {
    beta: f64,
    perplexity: f64,
    conditional: Vec<f64>,
}

/// Conditional distribution and entropy (nats) of row `i` at precision `beta`.
fn row_distribution(d: &[f64], i: usize, shift: f64, beta: f64, out: &mut [f64]) -> f64 {
    let mut sum = 0.0;
    for (j, (o, &dj)) in out.iter_mut().zip(d).enumerate() {
        *o = if j == i { 0.0 } else { (-beta * (dj - shift)).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        if j == i {
            continue;
        }
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

fn solve_row(d: &[f64], i: usize, perplexity: f64) -> Result<RowSolution> {
    let n = d.len();
    let target = perplexity.ln();
    let others = || d.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &v)| v);
    let shift = others().fold(f64::INFINITY, f64::min);
    let mean = others().sum::<f64>() / (n - 1) as f64;
    let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut p = vec![0.0; n];
    let mut h = row_distribution(d, i, shift, beta, &mut p);

    for _ in 0..MAX_BISECTION_STEPS {
        let diff = h - target;
        if diff.abs() < 1e-13 {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_infinite() {
                beta * 2.0
            } else {
                0.5 * (beta + hi)
            };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        if hi.is_finite() && (hi - lo) <= 4.0 * f64::EPSILON * hi {
            h = row_distribution(d, i, shift, beta, &mut p);
            break;
        }
        h = row_distribution(d, i, shift, beta, &mut p);
    }
    let achieved = h.exp();
    if (achieved - perplexity).abs() > PERPLEXITY_TOLERANCE || achieved.is_nan() {
        return Err(TsneError::BisectionFailure {
            row: i,
            achieved,
            target: perplexity,
        });
    }
    Ok(RowSolution {
        beta,
        perplexity: achieved,
        conditional: p,
    })
}

pub fn compute_affinities(points: &Matrix, perplexity: f64) -> Result<Affinities> {
    compute_affinities_with(points, perplexity, 1)
}

/// As [`compute_affinities`], solving rows on `workers` threads.
pub fn compute_affinities_with(points: &Matrix, perplexity: f64, workers: usize) -> Result<Affinities> {
    let n = points.rows();
    check_perplexity(perplexity, n)?;
    if let Some(r) = (0..n).find(|&r| points.row(r).iter().any(|v| !v.is_finite())) {
        return Err(TsneError::NonFiniteInput(r));
    }
    let (points, jittered) = jitter_duplicates(points);
    if jittered > 0 {
        log::warn!("jittered {jittered} duplicate points before affinity search");
    }
    let d = squared_distances(&points);
    let rows: Vec<RowSolution> = crate::par::map_indexed(workers, n, |i| solve_row(d.row(i), i, perplexity))
        .into_iter()
        .collect::<Result<_>>()?;

    let mut p = Matrix::zeros(n, n);
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in i + 1..n {
            let v = (rows[i].conditional[j] + rows[j].conditional[i]) / denom;
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
    Ok(Affinities {
        p,
        betas: rows.iter().map(|r| r.beta).collect(),
        row_perplexity: rows.iter().map(|r| r.perplexity).collect(),
        jittered,
    })
}

/// KL(P‖Q) for embedding `y` (n×2 or any width).
pub fn kl_divergence(p: &Matrix, y: &Matrix) -> f64 {
    kl_and_gradient(p, y, 1.0).0
}

/// KL(P‖Q) together with the descent direction
/// `4 Σ_j (α·p_ij − q_ij)(1 + ‖y_i − y_j‖²)⁻¹ (y_i − y_j)`.
/// For `α = 1` this is the exact gradient of the returned KL; larger `α`
/// gives the usual early-exaggeration update, the gradient of
/// `α·Σ p_ij ln(1/w_ij) + ln Σ w_ij` with Student-t weights `w`.
pub fn kl_and_gradient(p: &Matrix, y: &Matrix, exaggeration: f64) -> (f64, Matrix) {
    let n = y.rows();
    let dims = y.cols();
    let mut num = Matrix::zeros(n, n);
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = 1.0 / (1.0 + d2);
            num[(i, j)] = v;
            num[(j, i)] = v;
            z += 2.0 * v;
        }
    }
    let mut kl = 0.0;
    let mut grad = Matrix::zeros(n, dims);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[(i, j)];
            let qij = (num[(i, j)] / z).max(f64::MIN_POSITIVE);
            if pij > 0.0 {
                kl += pij * (pij / qij).ln();
            }
            let coeff = 4.0 * (exaggeration * pij - qij) * num[(i, j)];
            for k in 0..dims {
                grad[(i, k)] += coeff * (y[(i, k)] - y[(j, k)]);
            }
        }
    }
    (kl, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    /// n×2 coordinates, row-major `[x0, y0, x1, y1, ...]`.
    pub coordinates: Vec<[f64; 2]>,
    pub kl_initial: f64,
    pub kl_final: f64,
    /// `(iteration, KL)` against the un-exaggerated P.
    pub kl_history: Vec<(usize, f64)>,
    pub jittered: usize,
}

impl TsneResult {
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_fn(self.coordinates.len(), 2, |r, c| self.coordinates[r][c])
    }
}

fn initial_embedding(points: &Matrix, config: &TsneConfig) -> Result<Matrix> {
    let n = points.rows();
    match config.init {
        Init::RandomGaussian => {
            let mut rng = seeded(derive_seed(config.seed, 0x1417));
            Ok(Matrix::from_fn(n, 2, |_, _| {
                let e: f64 = StandardNormal.sample(&mut rng);
                1e-4 * e
            }))
        }
        Init::Pca => {
            let centered = center_columns(points);
            let svd = linalg::svd(&centered)?;
            let k = svd.s.len().min(2);
            let mut y = Matrix::zeros(n, 2);
            for r in 0..n {
                for c in 0..k {
                    y[(r, c)] = svd.u[(r, c)] * svd.s[c];
                }
            }
            let first = y.column(0);
            let std = (first.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
            let scale = if std > 0.0 { 1e-4 / std } else { 0.0 };
            y.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
            Ok(y)
        }
    }
}

pub fn run_tsne(points: &Matrix, config: &TsneConfig) -> Result<TsneResult> {
    let n = points.rows();
    config.validate(n)?;
    let aff = compute_affinities_with(points, config.perplexity, config.workers)?;
    let p = &aff.p;
    let mut y = initial_embedding(points, config)?;
    let mut velocity = Matrix::zeros(n, 2);
    let mut gains = vec![1.0f64; n * 2];

    let kl_initial = kl_divergence(p, &y);
    let mut kl_history = vec![(0, kl_initial)];

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch_iteration {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let (_, grad) = kl_and_gradient(p, &y, exaggeration);
        if !grad.is_finite() {
            return Err(TsneError::NonFiniteGradient { iteration: iter });
        }
        let g = grad.as_slice();
        let vel = velocity.as_mut_slice();
        for idx in 0..n * 2 {
            gains[idx] = if (g[idx] > 0.0) != (vel[idx] > 0.0) {
                gains[idx] + 0.2
            } else {
                gains[idx] * 0.8
            };
            gains[idx] = gains[idx].max(0.01);
            vel[idx] = momentum * vel[idx] - config.learning_rate * gains[idx] * g[idx];
        }
        for (c, v) in y.as_mut_slice().iter_mut().zip(velocity.as_slice()) {
            *c += v;
        }
        let means = y.column_means();
        for r in 0..n {
            for (c, m) in y.row_mut(r).iter_mut().zip(&means) {
                *c -= m;
            }
        }
        let done = iter + 1;
        if done % config.kl_log_interval == 0 || done == config.iterations {
            kl_history.push((done, kl_divergence(p, &y)));
        }
    }
    let kl_final = kl_history.last().map_or(kl_initial, |&(_, k)| k);
    Ok(TsneResult {
        coordinates: (0..n).map(|r| [y[(r, 0)], y[(r, 1)]]).collect(),
        kl_initial,
        kl_final,
        kl_history,
        jittered: aff.jittered,
    })
}

/// Fraction of points whose nearest label centroid is their own label's.
pub fn nearest_centroid_purity(coords: &[[f64; 2]], labels: &[String]) -> f64 {
    let names: Vec<&String> = labels.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut centroids = vec![[0.0f64; 2]; names.len()];
    let mut counts = vec![0usize; names.len()];
    let index_of = |l: &String| names.binary_search(&l).unwrap();
    for (c, l) in coords.iter().zip(labels) {
        let k = index_of(l);
        centroids[k][0] += c[0];
        centroids[k][1] += c[1];
        counts[k] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c[0] /= n as f64;
        c[1] /= n as f64;
    }
    let hits = coords
        .iter()
        .zip(labels)
        .filter(|(c, l)| {
            let nearest = (0..centroids.len())
                .min_by(|&a, &b| {
                    let da = (c[0] - centroids[a][0]).powi(2) + (c[1] - centroids[a][1]).powi(2);
                    let db = (c[0] - centroids[b][0]).powi(2) + (c[1] - centroids[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            nearest == index_of(l)
        })
        .count();
    hits as f64 / coords.len().max(1) as f64
}

/// How scatter points are labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBy {
    PhonemeClass,
    Group,
    /// `class/group`
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMeta {
    pub point_id: String,
    pub utterance_id: String,
    pub phoneme_class: Option<String>,
    pub phoneme_label: Option<String>,
    pub group: Option<String>,
}

impl PointMeta {
    pub fn label(&self, by: LabelBy) -> String {
        let unknown = || "unlabeled".to_string();
        match by {
            LabelBy::PhonemeClass => self.phoneme_class.clone().unwrap_or_else(unknown),
            LabelBy::Group => self.group.clone().unwrap_or_else(unknown),
            LabelBy::Both => format!(
                "{}/{}",
                self.phoneme_class.clone().unwrap_or_else(unknown),
                self.group.clone().unwrap_or_else(unknown)
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledPoints {
    pub points: Matrix,
    pub meta: Vec<PointMeta>,
}

impl LabeledPoints {
    pub fn labels(&self, by: LabelBy) -> Vec<String> {
        self.meta.iter().map(|m| m.label(by)).collect()
    }
}

/// One pooled `[mean ‖ std]` vector per phoneme segment.
pub fn pool_phoneme_segments(ds: &Dataset, layer: usize) -> Result<LabeledPoints> {
    let mut rows: Vec<f64> = Vec::new();
    let mut meta = Vec::new();
    let mut width = 0;
    for rec in ds.records() {
        let Some(segments) = rec.phoneme_segments.as_ref().filter(|s| !s.is_empty()) else {
            continue;
        };
        let m = ds.load_layer(rec, layer)?;
        for (k, seg) in segments.iter().enumerate() {
            let pooled = pool_frames(&m, seg.start_frame, seg.end_frame)?;
            width = pooled.len();
            rows.extend_from_slice(pooled.as_slice());
            meta.push(PointMeta {
                point_id: format!("{}#{k}", rec.utterance_id),
                utterance_id: rec.utterance_id.clone(),
                phoneme_class: Some(seg.phoneme_class.as_str().to_string()),
                phoneme_label: Some(seg.phoneme_label.clone()),
                group: rec.group.map(|g| g.as_str().to_string()),
            });
        }
    }
    if meta.is_empty() {
        return Err(TsneError::NoSegments);
    }
    Ok(LabeledPoints {
        points: Matrix::from_vec(meta.len(), width, rows)?,
        meta,
    })
}

/// Every `stride`-th frame of every record with the given task.
pub fn frame_level_points(ds: &Dataset, layer: usize, task: SpeechTask, stride: usize) -> Result<LabeledPoints> {
    let stride = stride.max(1);
    let mut rows: Vec<f64> = Vec::new();
    let mut meta = Vec::new();
    let mut width = 0;
    for rec in ds.records().iter().filter(|r| r.task == task) {
        let m = ds.load_layer(rec, layer)?;
        width = m.dim();
        for f in (0..m.n_frames()).step_by(stride) {
            rows.extend(m.frame(f).iter().map(|&v| f64::from(v)));
            meta.push(PointMeta {
                point_id: format!("{}@{f}", rec.utterance_id),
                utterance_id: rec.utterance_id.clone(),
                phoneme_class: None,
                phoneme_label: None,
                group: rec.group.map(|g| g.as_str().to_string()),
            });
        }
    }
    if meta.is_empty() {
        return Err(TsneError::NoMatchingRecords);
    }
    Ok(LabeledPoints {
        points: Matrix::from_vec(meta.len(), width, rows)?,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub point_id: String,
    pub x: f64,
    pub y: f64,
    pub label: String,
}

pub fn scatter_points(result: &TsneResult, meta: &[PointMeta], by: LabelBy) -> Vec<ScatterPoint> {
    result
        .coordinates
        .iter()
        .zip(meta)
        .map(|(c, m)| ScatterPoint {
            point_id: m.point_id.clone(),
            x: c[0],
            y: c[1],
            label: m.label(by),
        })
        .collect()
}

pub fn scatter_csv(points: &[ScatterPoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| TsneError::Io {
        path: PathBuf::from("<scatter csv>"),
        message: e.to_string(),
    };
    w.write_record(["point_id", "x", "y", "label"]).map_err(io)?;
    for p in points {
        w.write_record([
            p.point_id.as_str(),
            &p.x.to_string(),
            &p.y.to_string(),
            p.label.as_str(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| TsneError::Io {
        path: PathBuf::from("<scatter csv>"),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_scatter_csv(points: &[ScatterPoint], path: &Path) -> Result<()> {
    std::fs::write(path, scatter_csv(points)?).map_err(|e| TsneError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained SVG scatter plot, one color per label, with a legend.
pub fn render_svg(points: &[ScatterPoint], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const PAD: f64 = 40.0;
    const LEGEND_W: f64 = 160.0;

    let labels: Vec<&str> = points
        .iter()
        .map(|p| p.label.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let color = |l: &str| PALETTE[labels.binary_search(&l).unwrap() % PALETTE.len()];

    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let (sx, sy) = (span(xmin, xmax), span(ymin, ymax));
    let plot_w = W - 2.0 * PAD;
    let plot_h = H - 2.0 * PAD;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        W + LEGEND_W,
        H,
        W + LEGEND_W,
        H
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        svg,
        r##"<rect x="{PAD}" y="{PAD}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(svg, r#"<g class="points">"#);
    for p in points {
        let cx = PAD + (p.x - xmin) / sx * plot_w;
        let cy = PAD + plot_h - (p.y - ymin) / sy * plot_h;
        let _ = writeln!(
            svg,
            r#"<circle cx="{cx:.3}" cy="{cy:.3}" r="3" fill="{}" fill-opacity="0.75"><title>{}</title></circle>"#,
            color(&p.label),
            xml_escape(&p.point_id)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, l) in labels.iter().enumerate() {
        let y = PAD + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><rect x="{}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text></g>"#,
            W + 8.0,
            y,
            color(l),
            W + 26.0,
            y + 10.0,
            xml_escape(l)
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}
