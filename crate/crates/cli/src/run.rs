//! Resolved run descriptions and their execution.
//!
//! A [`RunManifest`] holds every parameter of a command with all defaults
//! filled in. It is written to `run.json` before the command's outputs, and
//! executing it again reproduces those outputs byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use layerlens::cca::{self, CcaConfig, FrameSubsample, SweepConfig, Variant};
use layerlens::eval::{self, FoldReport, FoldSplit, SweepReport};
use layerlens::probe::{self, TrainConfig};
use layerlens::store::{ScoreTask, SpeechTask, StoreError};
use layerlens::synth::{self, SynthSpec};
use layerlens::tsne::{self, LabelBy, TsneConfig};
use layerlens::Dataset;
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

pub fn domain(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 1,
        error: error.into(),
    }
}

pub fn usage(error: impl Into<anyhow::Error>) -> CliError {
    CliError {
        code: 2,
        error: error.into(),
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub workers: usize,
    pub run: RunSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunSpec {
    Validate {
        manifest: PathBuf,
    },
    Synth {
        target: SynthTarget,
        spec: SynthSpec,
    },
    Cca {
        dataset_a: PathBuf,
        dataset_b: PathBuf,
        variant: Variant,
        layers: Vec<usize>,
        fixed_reference_layer: Option<usize>,
        subsample: FrameSubsample,
        cca: CcaConfig,
        seed: u64,
    },
    ProbeTrain {
        dataset: PathBuf,
        layer: usize,
        task: ScoreTask,
        folds: FoldSpec,
        train: TrainConfig,
    },
    Sweep {
        dataset: PathBuf,
        task: ScoreTask,
        layers: Vec<usize>,
        folds: FoldSpec,
        train: TrainConfig,
    },
    Tsne {
        dataset: PathBuf,
        mode: PointMode,
        layer: usize,
        label_by: LabelBy,
        tsne: TsneConfig,
    },
    Report {
        entries: Vec<ReportEntry>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthTarget {
    Probe,
    Cca { shared_rank: usize },
    Clusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub speaker_disjoint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PointMode {
    Phoneme,
    Frame { speech_task: SpeechTask, stride: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub name: String,
    pub path: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(usage)?;
        serde_json::from_str(&text)
            .with_context(|| format!("{} is not a run manifest", path.display()))
            .map_err(usage)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run manifest serializes") + "\n"
    }
}

/// Open a manifest. Unreadable or malformed manifests are usage errors.
pub fn open_dataset(path: &Path) -> CliResult<Dataset> {
    Dataset::open(path).map_err(|e| match e {
        StoreError::Io { .. } | StoreError::ManifestParse { .. } => usage(e),
        other => domain(other),
    })
}

fn open_valid(path: &Path) -> CliResult<Dataset> {
    let ds = open_dataset(path)?;
    let report = ds.validate();
    if !report.is_empty() {
        let mut msg = format!("{} has {} violation(s):", path.display(), report.len());
        for v in report.violations.iter().take(10) {
            let _ = write!(msg, "\n  {v}");
        }
        if report.len() > 10 {
            let _ = write!(msg, "\n  ...");
        }
        return Err(domain(anyhow!(msg)));
    }
    Ok(ds)
}

/// Parse `all`, `a-b` (inclusive), `a,b,c` or combinations like `0-3,7`.
pub fn parse_layers(text: &str, num_layers: usize) -> CliResult<Vec<usize>> {
    let text = text.trim();
    if text == "all" {
        return Ok((0..num_layers).collect());
    }
    let mut layers = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        let num = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| usage(anyhow!("bad layer selection {text:?}")))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(usage(anyhow!("empty layer range {part:?}")));
                }
                layers.extend(a..=b);
            }
            None => layers.push(num(part)?),
        }
    }
    layers.sort_unstable();
    layers.dedup();
    Ok(layers)
}

pub fn absolute(path: &Path) -> CliResult<PathBuf> {
    fs::canonicalize(path)
        .with_context(|| format!("cannot resolve {}", path.display()))
        .map_err(usage)
}

struct Outputs<'a> {
    dir: &'a Path,
}

impl Outputs<'_> {
    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))
            .map_err(domain)?;
        println!("wrote {}", path.display());
        Ok(path)
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(domain)? + "\n";
        self.write(name, text)
    }
}

/// Write `run.json`, then execute. Returns the exit code for a run that
/// completed (1 for a validation run that found violations).
pub fn execute(manifest: &RunManifest, out_dir: Option<&Path>) -> CliResult<i32> {
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(domain)?;
        Outputs { dir }.write(RUN_FILE, manifest.to_json())?;
    }
    let workers = manifest.workers.max(1);
    match &manifest.run {
        RunSpec::Validate { manifest } => run_validate(manifest, out_dir),
        other => {
            let dir = out_dir.ok_or_else(|| usage(anyhow!("an output directory is required")))?;
            let out = Outputs { dir };
            match other {
                RunSpec::Validate { .. } => unreachable!(),
                RunSpec::Synth { target, spec } => run_synth(&out, target, spec),
                RunSpec::Cca {
                    dataset_a,
                    dataset_b,
                    variant,
                    layers,
                    fixed_reference_layer,
                    subsample,
                    cca,
                    ..
                } => {
                    let config = SweepConfig {
                        variant: *variant,
                        layers: layers.clone(),
                        fixed_reference_layer: *fixed_reference_layer,
                        subsample: *subsample,
                        cca: *cca,
                        workers,
                    };
                    run_cca(&out, dataset_a, dataset_b, &config)
                }
                RunSpec::ProbeTrain {
                    dataset,
                    layer,
                    task,
                    folds,
                    train,
                } => run_probe_train(&out, dataset, *layer, *task, folds, train, workers),
                RunSpec::Sweep {
                    dataset,
                    task,
                    layers,
                    folds,
                    train,
                } => run_sweep(&out, dataset, *task, layers, folds, train, workers),
                RunSpec::Tsne {
                    dataset,
                    mode,
                    layer,
                    label_by,
                    tsne,
                } => {
                    let config = TsneConfig {
                        workers,
                        ..tsne.clone()
                    };
                    run_tsne(&out, dataset, *mode, *layer, *label_by, &config)
                }
                RunSpec::Report { entries, .. } => run_report(&out, entries),
            }
        }
    }
}

fn run_validate(path: &Path, out_dir: Option<&Path>) -> CliResult<i32> {
    let ds = open_dataset(path)?;
    let report = ds.validate();
    if report.is_empty() {
        println!(
            "{}: OK ({} utterances, {} layers, dim {})",
            path.display(),
            ds.records().len(),
            ds.num_layers(),
            ds.embedding_dim()
        );
    } else {
        println!("{}: {} violation(s)", path.display(), report.len());
        for v in &report.violations {
            println!("  {v}");
        }
    }
    if let Some(dir) = out_dir {
        Outputs { dir }.json("validation.json", &report)?;
    }
    Ok(if report.is_empty() { 0 } else { 1 })
}

/// Path of `p` relative to `base`, for outputs that must not depend on
/// where the run was written.
fn relative_to(p: &Path, base: &Path) -> PathBuf {
    p.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| p.to_path_buf())
}

fn run_synth(out: &Outputs<'_>, target: &SynthTarget, spec: &SynthSpec) -> CliResult<i32> {
    match target {
        SynthTarget::Probe => {
            let mut truth = synth::gen_probe_dataset(spec, &out.dir.join("dataset")).map_err(domain)?;
            truth.manifest_path = relative_to(&truth.manifest_path, out.dir);
            out.json("truth.json", &truth)?;
        }
        SynthTarget::Cca { shared_rank } => {
            let mut truth =
                synth::gen_cca_pair(spec, *shared_rank, &out.dir.join("a"), &out.dir.join("b")).map_err(domain)?;
            truth.manifest_a = relative_to(&truth.manifest_a, out.dir);
            truth.manifest_b = relative_to(&truth.manifest_b, out.dir);
            out.json("truth.json", &truth)?;
        }
        SynthTarget::Clusters => {
            let mut truth = synth::gen_cluster_dataset(spec, &out.dir.join("dataset")).map_err(domain)?;
            truth.manifest_path = relative_to(&truth.manifest_path, out.dir);
            out.json("truth.json", &truth)?;
        }
    }
    Ok(0)
}

fn run_cca(out: &Outputs<'_>, a: &Path, b: &Path, config: &SweepConfig) -> CliResult<i32> {
    let da = open_valid(a)?;
    let db = open_valid(b)?;
    let curve = cca::layer_similarity_sweep(&da, &db, config).map_err(domain)?;
    out.write("curve.csv", curve.to_csv())?;
    out.write("curve.json", curve.to_json())?;
    for p in &curve.points {
        println!("layer {:>3}  {} {:.6}", p.layer, curve.variant.as_str(), p.value);
    }
    Ok(0)
}

fn folds_for(ds: &Dataset, spec: &FoldSpec) -> CliResult<FoldSplit> {
    let split = eval::dataset_folds(ds, spec.k, spec.seed, spec.speaker_disjoint).map_err(domain)?;
    if let Some(reason) = &split.fallback_reason {
        log::warn!("speaker-disjoint folds unavailable: {reason}");
    }
    Ok(split)
}

fn run_probe_train(
    out: &Outputs<'_>,
    dataset: &Path,
    layer: usize,
    task: ScoreTask,
    folds: &FoldSpec,
    train: &TrainConfig,
    workers: usize,
) -> CliResult<i32> {
    let ds = open_valid(dataset)?;
    let split = folds_for(&ds, folds)?;
    let report = eval::cross_validate(&ds, layer, task, train, &split, workers).map_err(domain)?;

    let features = eval::pooled_layer(&ds, layer, workers).map_err(domain)?;
    let targets: Vec<f64> = ds
        .records()
        .iter()
        .map(|r| r.score(task).expect("scores checked by cross-validation"))
        .collect();
    let (model, history) = probe::train(&features, &targets, train).map_err(domain)?;

    out.json("folds.json", &split)?;
    out.json("report.json", &report)?;
    out.json("history.json", &history)?;
    out.write("model.prb", probe::encode_checkpoint(&model))?;
    println!("layer {layer} {} MSE: {}", task.as_str(), report.cell());
    Ok(0)
}

fn run_sweep(
    out: &Outputs<'_>,
    dataset: &Path,
    task: ScoreTask,
    layers: &[usize],
    folds: &FoldSpec,
    train: &TrainConfig,
    workers: usize,
) -> CliResult<i32> {
    let ds = open_valid(dataset)?;
    let split = folds_for(&ds, folds)?;
    let report = eval::layer_sweep(&ds, task, layers, train, &split, workers).map_err(domain)?;
    let table = report.render_table();
    out.json("folds.json", &split)?;
    out.write("sweep.json", report.to_json())?;
    out.write("sweep.csv", report.to_csv())?;
    out.write("table.txt", &table)?;
    print!("{table}");
    Ok(0)
}

#[derive(Debug, Serialize)]
struct TsneSummary<'a> {
    mode: PointMode,
    layer: usize,
    label_by: LabelBy,
    n_points: usize,
    jittered: usize,
    kl_initial: f64,
    kl_final: f64,
    kl_history: &'a [(usize, f64)],
    nearest_centroid_purity: f64,
    labels: BTreeMap<String, usize>,
}

fn run_tsne(
    out: &Outputs<'_>,
    dataset: &Path,
    mode: PointMode,
    layer: usize,
    label_by: LabelBy,
    config: &TsneConfig,
) -> CliResult<i32> {
    let ds = open_valid(dataset)?;
    let points = match mode {
        PointMode::Phoneme => tsne::pool_phoneme_segments(&ds, layer),
        PointMode::Frame { speech_task, stride } => tsne::frame_level_points(&ds, layer, speech_task, stride),
    }
    .map_err(domain)?;
    let result = tsne::run_tsne(&points.points, config).map_err(domain)?;
    let labels = points.labels(label_by);
    let scatter = tsne::scatter_points(&result, &points.meta, label_by);
    let mut counts = BTreeMap::new();
    for l in &labels {
        *counts.entry(l.clone()).or_insert(0) += 1;
    }
    let summary = TsneSummary {
        mode,
        layer,
        label_by,
        n_points: labels.len(),
        jittered: result.jittered,
        kl_initial: result.kl_initial,
        kl_final: result.kl_final,
        kl_history: &result.kl_history,
        nearest_centroid_purity: tsne::nearest_centroid_purity(&result.coordinates, &labels),
        labels: counts,
    };
    let title = format!("{} layer {layer}", ds.manifest().dataset_name);
    out.write("scatter.csv", tsne::scatter_csv(&scatter).map_err(domain)?)?;
    out.write("scatter.svg", tsne::render_svg(&scatter, &title))?;
    out.json("tsne.json", &summary)?;
    println!(
        "{} points, KL {:.4} -> {:.4}, purity {:.3}",
        summary.n_points, summary.kl_initial, summary.kl_final, summary.nearest_centroid_purity
    );
    Ok(0)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    name: String,
    cells: BTreeMap<String, ReportCell>,
}

#[derive(Debug, Serialize)]
struct ReportCell {
    source: PathBuf,
    layer: usize,
    mean: f64,
    std: f64,
    cell: String,
}

/// A probe-train report, or the best layer of a sweep.
fn load_result(path: &Path) -> CliResult<FoldReport> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(usage)?;
    if let Ok(r) = serde_json::from_str::<FoldReport>(&text) {
        return Ok(r);
    }
    let sweep: SweepReport = serde_json::from_str(&text)
        .with_context(|| format!("{} is neither a probe report nor a sweep", path.display()))
        .map_err(usage)?;
    sweep
        .reports
        .iter()
        .find(|r| r.layer_index == sweep.best_layer)
        .cloned()
        .ok_or_else(|| domain(anyhow!("{} has no report for its best layer", path.display())))
}

fn run_report(out: &Outputs<'_>, entries: &[ReportEntry]) -> CliResult<i32> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for entry in entries {
        let r = load_result(&entry.path)?;
        let row = match rows.iter_mut().position(|row| row.name == entry.name) {
            Some(i) => &mut rows[i],
            None => {
                rows.push(ReportRow {
                    name: entry.name.clone(),
                    cells: BTreeMap::new(),
                });
                rows.last_mut().unwrap()
            }
        };
        let task = r.task.as_str().to_string();
        if row.cells.contains_key(&task) {
            return Err(usage(anyhow!("two {task} results for {:?}", entry.name)));
        }
        row.cells.insert(
            task,
            ReportCell {
                source: PathBuf::from(entry.path.file_name().unwrap_or_default()),
                layer: r.layer_index,
                mean: r.mean,
                std: r.std,
                cell: r.cell(),
            },
        );
    }

    let tasks: Vec<ScoreTask> = [ScoreTask::Intelligibility, ScoreTask::Severity]
        .into_iter()
        .filter(|t| rows.iter().any(|r| r.cells.contains_key(t.as_str())))
        .collect();
    let headers: Vec<String> = std::iter::once(String::new())
        .chain(tasks.iter().map(|t| {
            let name = t.as_str();
            format!("{}{} MSE", name[..1].to_uppercase(), &name[1..])
        }))
        .collect();
    let header_refs: Vec<&str> = headers.iter().map(String::as_str).collect();
    let table_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            std::iter::once(row.name.clone())
                .chain(
                    tasks
                        .iter()
                        .map(|t| row.cells.get(t.as_str()).map_or("-".to_string(), |c| c.cell.clone())),
                )
                .collect()
        })
        .collect();
    let table = eval::render_table(&header_refs, &table_rows);

    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(["model", "task", "layer", "mean", "std"])
        .map_err(domain)?;
    for row in &rows {
        for (task, c) in &row.cells {
            csv.write_record([
                &row.name,
                task,
                &c.layer.to_string(),
                &c.mean.to_string(),
                &c.std.to_string(),
            ])
            .map_err(domain)?;
        }
    }
    let csv = csv.into_inner().map_err(|e| domain(anyhow!("{e}")))?;
    out.json("report.json", &rows)?;
    out.write("report.csv", csv)?;
    out.write("table.txt", &table)?;
    print!("{table}");
    Ok(0)
}
