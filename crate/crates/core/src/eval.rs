//! k-fold evaluation of frozen-layer probes and per-layer sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::probe::{self, statistical_pool, PooledVector, ProbeError, TrainConfig};
use crate::rng::{derive_seed, seeded};
use crate::store::{Dataset, ScoreTask, StoreError};

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("{items} items cannot fill {k} folds")]
    TooFewItems { items: usize, k: usize },
    #[error("duplicate id {0} in fold input")]
    DuplicateId(String),
    #[error("prediction/target lengths differ ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
    #[error("empty prediction list")]
    Empty,
    #[error("{} utterances have no {task} score: {utterances:?}", utterances.len())]
    MissingScores {
        task: &'static str,
        utterances: Vec<String>,
    },
    #[error("layer {0} missing from the dataset")]
    LayerMissing(usize),
    #[error("fold split does not match the dataset (first unmatched id: {0})")]
    SplitMismatch(String),
    #[error("embedding file changed during evaluation: {0}")]
    FreezeViolation(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Assignment of utterances to `k` folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
    /// True when no speaker appears in two folds.
    pub speaker_disjoint: bool,
    /// Set when speaker-disjoint folds were requested but could not be
    /// balanced, and the split fell back to utterance level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Ids in fold `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Deterministic k-fold partition. With a speaker map the folds are
/// speaker-disjoint whenever that can be done with fold sizes differing by
/// at most one; otherwise the split falls back to utterance level and says
/// why in `fallback_reason`.
pub fn make_folds(
    ids: &[String],
    k: usize,
    seed: u64,
    speakers: Option<&BTreeMap<String, String>>,
) -> Result<FoldSplit> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    if ids.len() < k {
        return Err(EvalError::TooFewItems { items: ids.len(), k });
    }
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::DuplicateId(w[0].clone()));
    }

    let mut fallback_reason = None;
    if let Some(map) = speakers {
        match speaker_folds(&sorted, k, seed, map) {
            Ok(assignments) => {
                return Ok(FoldSplit {
                    k,
                    seed,
                    assignments,
                    speaker_disjoint: true,
                    fallback_reason: None,
                })
            }
            Err(reason) => {
                log::warn!("speaker-disjoint folds infeasible ({reason}); using utterance-level folds");
                fallback_reason = Some(reason);
            }
        }
    }

    let mut order = sorted;
    order.shuffle(&mut seeded(derive_seed(seed, 0xF01D)));
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(pos, id)| (id.clone(), pos % k))
        .collect();
    Ok(FoldSplit {
        k,
        seed,
        assignments,
        speaker_disjoint: false,
        fallback_reason,
    })
}

fn speaker_folds(
    sorted_ids: &[&String],
    k: usize,
    seed: u64,
    speakers: &BTreeMap<String, String>,
) -> std::result::Result<BTreeMap<String, usize>, String> {
    let mut groups: BTreeMap<&str, Vec<&String>> = BTreeMap::new();
    for id in sorted_ids {
        // Utterances without a speaker entry form their own group.
        let spk = speakers.get(id.as_str()).map_or(id.as_str(), String::as_str);
        groups.entry(spk).or_default().push(id);
    }
    let n = sorted_ids.len();
    if let Some((spk, g)) = groups.iter().find(|(_, g)| g.len() * k > n) {
        return Err(format!("speaker {spk} owns {} of {n} items, more than 1/{k}", g.len()));
    }
    let mut order: Vec<(&str, Vec<&String>)> = groups.into_iter().collect();
    order.shuffle(&mut seeded(derive_seed(seed, 0x5EA4)));
    order.sort_by_key(|e| std::cmp::Reverse(e.1.len()));

    let mut sizes = vec![0usize; k];
    let mut assignments = BTreeMap::new();
    for (_, members) in order {
        let fold = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap();
        sizes[fold] += members.len();
        for id in members {
            assignments.insert(id.clone(), fold);
        }
    }
    let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    if hi - lo > 1 {
        return Err(format!("speaker groups cannot be balanced (fold sizes {sizes:?})"));
    }
    Ok(assignments)
}

/// Folds over a dataset's utterances, speaker-disjoint when requested.
pub fn dataset_folds(ds: &Dataset, k: usize, seed: u64, speaker_disjoint: bool) -> Result<FoldSplit> {
    let ids: Vec<String> = ds.records().iter().map(|r| r.utterance_id.clone()).collect();
    let speakers: BTreeMap<String, String> = ds
        .records()
        .iter()
        .map(|r| (r.utterance_id.clone(), r.speaker_id.clone()))
        .collect();
    make_folds(&ids, k, seed, speaker_disjoint.then_some(&speakers))
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Two-decimal `mean ± std` cell, e.g. `0.73 ± 0.18`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub task: ScoreTask,
    pub layer_index: usize,
    pub fold_mse: Vec<f64>,
    pub mean: f64,
    /// Population std over folds.
    pub std: f64,
}

impl FoldReport {
    pub fn from_folds(task: ScoreTask, layer_index: usize, fold_mse: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&fold_mse);
        Self {
            task,
            layer_index,
            fold_mse,
            mean,
            std,
        }
    }

    pub fn cell(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

fn task_targets(ds: &Dataset, task: ScoreTask) -> Result<Vec<f64>> {
    let mut missing = Vec::new();
    let mut targets = Vec::with_capacity(ds.records().len());
    for rec in ds.records() {
        match rec.score(task) {
            Some(v) => targets.push(v),
            None => missing.push(rec.utterance_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingScores {
            task: task.as_str(),
            utterances: missing,
        });
    }
    Ok(targets)
}

/// Pooled features for every record of one layer, in record order.
pub fn pooled_layer(ds: &Dataset, layer: usize, workers: usize) -> Result<Vec<PooledVector>> {
    if !ds.has_layer(layer) {
        return Err(EvalError::LayerMissing(layer));
    }
    crate::par::map_indexed(workers, ds.records().len(), |i| {
        let m = ds.load_layer(&ds.records()[i], layer)?;
        Ok(statistical_pool(&m))
    })
    .into_iter()
    .collect()
}

fn fold_indices(ds: &Dataset, split: &FoldSplit) -> Result<Vec<usize>> {
    let ids: BTreeSet<&str> = ds.records().iter().map(|r| r.utterance_id.as_str()).collect();
    if let Some(extra) = split.assignments.keys().find(|id| !ids.contains(id.as_str())) {
        return Err(EvalError::SplitMismatch(extra.clone()));
    }
    ds.records()
        .iter()
        .map(|r| {
            split
                .fold_of(&r.utterance_id)
                .ok_or_else(|| EvalError::SplitMismatch(r.utterance_id.clone()))
        })
        .collect()
}

/// Train on k−1 folds (one of which is held out for early stopping) and
/// score the remaining fold, for every fold.
pub fn cross_validate(
    ds: &Dataset,
    layer: usize,
    task: ScoreTask,
    config: &TrainConfig,
    split: &FoldSplit,
    workers: usize,
) -> Result<FoldReport> {
    config.validate()?;
    let targets = task_targets(ds, task)?;
    let folds = fold_indices(ds, split)?;
    let features = pooled_layer(ds, layer, workers)?;
    let fold_mse = run_folds(&features, &targets, &folds, split.k, config, workers)?;
    Ok(FoldReport::from_folds(task, layer, fold_mse))
}

fn run_folds(
    features: &[PooledVector],
    targets: &[f64],
    folds: &[usize],
    k: usize,
    config: &TrainConfig,
    workers: usize,
) -> Result<Vec<f64>> {
    let results = crate::par::map_indexed(workers, k, |test_fold| -> Result<f64> {
        let val_fold = (test_fold + 1) % k;
        let pick = |pred: &dyn Fn(usize) -> bool| -> (Vec<PooledVector>, Vec<f64>) {
            let idx: Vec<usize> = (0..folds.len()).filter(|&i| pred(folds[i])).collect();
            (
                idx.iter().map(|&i| features[i].clone()).collect(),
                idx.iter().map(|&i| targets[i]).collect(),
            )
        };
        let (test_x, test_y) = pick(&|f| f == test_fold);
        let fold_cfg = TrainConfig {
            seed: derive_seed(config.seed, test_fold as u64),
            ..config.clone()
        };
        let model = if k >= 3 {
            let (tx, ty) = pick(&|f| f != test_fold && f != val_fold);
            let (vx, vy) = pick(&|f| f == val_fold);
            probe::train_with_validation(&tx, &ty, &vx, &vy, &fold_cfg)?.0
        } else {
            let (tx, ty) = pick(&|f| f != test_fold);
            probe::train(&tx, &ty, &fold_cfg)?.0
        };
        let (flat, _) = probe::stack_inputs(&test_x)?;
        let pred = model.predict(&flat)?;
        mse(&pred, &test_y)
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub task: ScoreTask,
    pub reports: Vec<FoldReport>,
    pub best_layer: usize,
}

impl SweepReport {
    pub fn from_reports(task: ScoreTask, reports: Vec<FoldReport>) -> Self {
        let best_layer = reports
            .iter()
            .min_by(|a, b| a.mean.total_cmp(&b.mean).then(a.layer_index.cmp(&b.layer_index)))
            .map_or(0, |r| r.layer_index);
        Self {
            task,
            reports,
            best_layer,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean,std\n");
        for r in &self.reports {
            out.push_str(&format!("{},{},{}\n", r.layer_index, r.mean, r.std));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn render_table(&self) -> String {
        let header = format!("{} MSE", capitalize(self.task.as_str()));
        let rows: Vec<Vec<String>> = self
            .reports
            .iter()
            .map(|r| {
                let mark = if r.layer_index == self.best_layer { " *" } else { "" };
                vec![format!("{}{mark}", r.layer_index), r.cell()]
            })
            .collect();
        render_table(&["Layer", &header], &rows)
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Plain-text table with `|` separators and left-aligned padded columns.
pub fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let ncols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let parts: Vec<String> = cells
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        parts.join(" | ").trim_end().to_string() + "\n"
    };
    let mut out = line(&mut headers.iter().copied());
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for row in rows {
        assert_eq!(row.len(), ncols, "row width");
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

/// SHA-256 of every embedding file for the given layers, keyed by path.
pub fn layer_file_hashes(ds: &Dataset, layers: &[usize]) -> Result<BTreeMap<PathBuf, String>> {
    let mut out = BTreeMap::new();
    for rec in ds.records() {
        for &l in layers {
            let path = ds.layer_path(rec, l)?;
            let bytes = fs::read(&path).map_err(|source| EvalError::Io {
                path: path.clone(),
                source,
            })?;
            let digest = Sha256::digest(&bytes);
            out.insert(path, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    Ok(out)
}

/// Cross-validate every layer with the same folds. Embedding files are
/// hashed before and after; any change is reported as a freeze violation.
pub fn layer_sweep(
    ds: &Dataset,
    task: ScoreTask,
    layers: &[usize],
    config: &TrainConfig,
    split: &FoldSplit,
    workers: usize,
) -> Result<SweepReport> {
    if let Some(&l) = layers.iter().find(|&&l| !ds.has_layer(l)) {
        return Err(EvalError::LayerMissing(l));
    }
    config.validate()?;
    let targets = task_targets(ds, task)?;
    let folds = fold_indices(ds, split)?;
    let before = layer_file_hashes(ds, layers)?;

    let mut reports = Vec::with_capacity(layers.len());
    for &layer in layers {
        let features = pooled_layer(ds, layer, workers)?;
        let fold_mse = run_folds(&features, &targets, &folds, split.k, config, workers)?;
        reports.push(FoldReport::from_folds(task, layer, fold_mse));
    }

    let after = layer_file_hashes(ds, layers)?;
    if let Some((path, _)) = before.iter().find(|(p, h)| after.get(*p) != Some(h)) {
        return Err(EvalError::FreezeViolation(path.clone()));
    }
    Ok(SweepReport::from_reports(task, reports))
}
