//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use layerlens::cca::{cca_correlations, pwcca, svcca, RepresentationPair, DEFAULT_REG_EPS};
use layerlens::eval::{
    cross_validate, dataset_folds, format_mean_std, layer_file_hashes, layer_sweep, make_folds, mse, pooled_layer,
};
use layerlens::linalg::{qr, Matrix};
use layerlens::probe::{self, Activation, PooledVector, ProbeModel, TrainConfig};
use layerlens::rng::{seeded, Rng};
use layerlens::store::{ScoreTask, SpeechTask};
use layerlens::synth::{gen_cluster_dataset, gen_probe_dataset, ClusterSpec, SynthSpec};
use layerlens::tsne::{compute_affinities, frame_level_points, nearest_centroid_purity, run_tsne, LabelBy, TsneConfig};
use layerlens::Dataset;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn pair<'a>(x: &'a Matrix, y: &'a Matrix) -> RepresentationPair<'a> {
    RepresentationPair::new(x, y).unwrap()
}

fn random_invertible(rng: &mut Rng, d: usize) -> Matrix {
    let q = qr(&gaussian_matrix(rng, d, d)).unwrap().q;
    let r = qr(&gaussian_matrix(rng, d, d)).unwrap().q;
    let s: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
    q.scale_columns(&s).matmul(&r).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(1);
    let (n, d) = (2000, 16);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = gaussian_matrix(&mut rng, n, d);
        let a = random_invertible(&mut rng, d);
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut xa = x.matmul(&a).unwrap();
        for r in 0..n {
            for (v, bi) in xa.row_mut(r).iter_mut().zip(&b) {
                *v += bi;
            }
        }
        let v = pwcca(pair(&xa, &x), DEFAULT_REG_EPS).map_err(|e| e.to_string())?.value;
        worst = worst.max((v - 1.0).abs());
    }
    let elapsed = start.elapsed();
    check(worst < 1e-6, || format!("max |pwcca - 1| = {worst:.3e}"))?;
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?}"))?;
    Ok(format!("max |pwcca - 1| = {worst:.2e}, {elapsed:.1?}"))
}

fn centered(m: &Matrix) -> DMatrix<f64> {
    let mut a = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice());
    for mut col in a.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    a
}

/// Square roots of the eigenvalues of Σxx^{-1/2} Σxy Σyy^{-1} Σyx Σxx^{-1/2}.
fn covariance_oracle(x: &Matrix, y: &Matrix) -> Vec<f64> {
    let n = x.rows() as f64;
    let (xc, yc) = (centered(x), centered(y));
    let sxx = xc.transpose() * &xc / (n - 1.0);
    let syy = yc.transpose() * &yc / (n - 1.0);
    let sxy = xc.transpose() * &yc / (n - 1.0);
    let e = SymmetricEigen::new(sxx);
    let sxx_is =
        &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|v| 1.0 / v.sqrt())) * e.eigenvectors.transpose();
    let m = &sxx_is * &sxy * syy.try_inverse().unwrap() * sxy.transpose() * &sxx_is;
    let m = (&m + m.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt().min(1.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.truncate(x.cols().min(y.cols()));
    ev
}

fn criterion_2() -> Outcome {
    let mut rng = seeded(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dx = rng.random_range(1..=8);
        let dy = rng.random_range(1..=8);
        let n = rng.random_range(3 * dx.max(dy)..=500);
        let shared = dx.min(dy) / 2 + 1;
        let z = gaussian_matrix(&mut rng, n, shared);
        let mut view = |d: usize| {
            let w = gaussian_matrix(&mut rng, shared, d);
            let own = gaussian_matrix(&mut rng, n, d);
            let mut v = z.matmul(&w).unwrap();
            for (a, b) in v.as_mut_slice().iter_mut().zip(own.as_slice()) {
                *a += 0.7 * b;
            }
            v
        };
        let (x, y) = (view(dx), view(dy));
        let rho = cca_correlations(pair(&x, &y), DEFAULT_REG_EPS).map_err(|e| e.to_string())?;
        let oracle = covariance_oracle(&x, &y);
        check(rho.len() == oracle.len(), || {
            format!("{} vs {} correlations", rho.len(), oracle.len())
        })?;
        for (a, b) in rho.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-8, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("50 instances, max deviation {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut kept = Vec::new();
    for seed in 0..20 {
        let mut rng = seeded(300 + seed);
        let n = 200;
        let u = qr(&gaussian_matrix(&mut rng, n, 8)).unwrap().q;
        let v = qr(&gaussian_matrix(&mut rng, 8, 8)).unwrap().q;
        let s = [10.0, 10.0, 10.0, 0.01, 0.01, 0.01, 0.01, 0.01];
        let x = u.scale_columns(&s).matmul(&v.transpose()).unwrap();
        let y = gaussian_matrix(&mut rng, n, 5);
        kept.push(
            svcca(pair(&x, &y), 0.99, DEFAULT_REG_EPS)
                .map_err(|e| e.to_string())?
                .kx,
        );
    }
    check(kept.iter().all(|&k| k == 3), || format!("kept dims {kept:?}"))?;
    Ok("kept dims = 3 on 20 seeds".into())
}

fn criterion_4() -> Outcome {
    let (h, floor) = (1e-5, 1e-6);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = seeded(400 + seed);
        let model = ProbeModel::init(6, 16, Activation::Relu, seed);
        let x: Vec<f64> = (0..5 * 6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..10.0)).collect();
        let (_, grad) = model.loss_and_gradient(&x, &y).map_err(|e| e.to_string())?;
        let base = model.flatten();
        let mut probe = model.clone();
        for (i, a) in grad.flatten().iter().enumerate() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_flat(&p).unwrap();
            let up = probe.loss(&x, &y).unwrap();
            p[i] = base[i] - h;
            probe.set_flat(&p).unwrap();
            let down = probe.loss(&x, &y).unwrap();
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    check(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("20 seeds, max relative error {worst:.2e}"))
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn held_out_mse(
    features: &[PooledVector],
    targets: &[f64],
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, usize), String> {
    let (train_idx, test_idx) = order.split_at(400);
    let pick = |idx: &[usize]| -> (Vec<PooledVector>, Vec<f64>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| targets[i]).collect(),
        )
    };
    let (tx, ty) = pick(train_idx);
    let (vx, vy) = pick(test_idx);
    let (model, history) = probe::train(&tx, &ty, cfg).map_err(|e| e.to_string())?;
    let (flat, _) = probe::stack_inputs(&vx).unwrap();
    let pred = model.predict(&flat).unwrap();
    Ok((mse(&pred, &vy).unwrap(), history.epochs.len()))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_utterances: 500,
        dim: 8,
        num_layers: 1,
        signal_layer: Some(0),
        noise_sigma: 0.01,
        seed: 5,
        ..SynthSpec::default()
    };
    let truth = gen_probe_dataset(&spec, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&truth.manifest_path).unwrap();
    let features = pooled_layer(&ds, 0, 4).map_err(|e| e.to_string())?;
    let targets: Vec<f64> = ds
        .records()
        .iter()
        .map(|r| r.score(ScoreTask::Intelligibility).unwrap())
        .collect();
    let mut order: Vec<usize> = (0..500).collect();
    order.shuffle(&mut seeded(55));
    let cfg = TrainConfig {
        hidden_dim: 64,
        learning_rate: 1e-3,
        max_epochs: 200,
        seed: 5,
        ..TrainConfig::default()
    };
    let (signal, epochs) = held_out_mse(&features, &targets, &order, &cfg)?;

    let mut shuffled = targets.clone();
    shuffled.shuffle(&mut seeded(56));
    let (control, _) = held_out_mse(&features, &shuffled, &order, &cfg)?;
    let var = variance(&shuffled);
    let elapsed = start.elapsed();
    check(epochs <= 200, || format!("{epochs} epochs"))?;
    check(signal < 0.01, || format!("held-out MSE {signal:.4}"))?;
    check(control >= 0.5 * var, || {
        format!("shuffled control {control:.4} < 0.5 x variance {var:.4}")
    })?;
    check(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "held-out MSE {signal:.5} after {epochs} epochs; shuffled {control:.3} vs variance {var:.3}; {elapsed:.1?}"
    ))
}

fn criterion_6() -> Outcome {
    let mut best = Vec::new();
    for seed in 0..10 {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_utterances: 100,
            frames_per_utterance: 12,
            dim: 4,
            num_layers: 5,
            signal_layer: Some(3),
            noise_sigma: 0.01,
            seed,
            ..SynthSpec::default()
        };
        let truth = gen_probe_dataset(&spec, dir.path()).map_err(|e| e.to_string())?;
        let ds = Dataset::open(&truth.manifest_path).unwrap();
        let layers = [0, 1, 2, 3, 4];
        let before = layer_file_hashes(&ds, &layers).map_err(|e| e.to_string())?;
        let split = dataset_folds(&ds, 10, seed, true).map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            hidden_dim: 32,
            learning_rate: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let report =
            layer_sweep(&ds, ScoreTask::Intelligibility, &layers, &cfg, &split, 4).map_err(|e| e.to_string())?;
        let after = layer_file_hashes(&ds, &layers).map_err(|e| e.to_string())?;
        check(before == after, || format!("seed {seed}: embedding files changed"))?;
        best.push(report.best_layer);
    }
    check(best.iter().all(|&b| b == 3), || format!("best layers {best:?}"))?;
    Ok("best_layer = 3 on 10 seeds, hashes unchanged".into())
}

fn is_table_cell(cell: &str) -> bool {
    let two_decimals = |s: &str| {
        s.split_once('.').is_some_and(|(i, f)| {
            !i.is_empty()
                && i.chars().all(|c| c.is_ascii_digit())
                && f.len() == 2
                && f.chars().all(|c| c.is_ascii_digit())
        })
    };
    cell.split_once(" ± ")
        .is_some_and(|(m, s)| two_decimals(m) && two_decimals(s))
}

fn criterion_7() -> Outcome {
    let ids: Vec<String> = (0..27).map(|i| format!("patient{i:02}")).collect();
    let split = make_folds(&ids, 10, 7, None).map_err(|e| e.to_string())?;
    let mut sizes = split.sizes();
    sizes.sort_unstable();
    check(sizes == [2, 2, 2, 3, 3, 3, 3, 3, 3, 3], || {
        format!("fold sizes {sizes:?}")
    })?;
    let mut members: Vec<&str> = (0..10).flat_map(|f| split.members(f)).collect();
    members.sort_unstable();
    members.dedup();
    check(members.len() == 27, || "folds overlap or miss ids".into())?;
    check(split == make_folds(&ids, 10, 7, None).unwrap(), || {
        "split not deterministic".into()
    })?;
    check(split != make_folds(&ids, 10, 8, None).unwrap(), || {
        "split ignores the seed".into()
    })?;
    check(format_mean_std(0.73, 0.18) == "0.73 ± 0.18", || {
        format_mean_std(0.73, 0.18)
    })?;

    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_utterances: 27,
        frames_per_utterance: 10,
        dim: 3,
        num_layers: 1,
        signal_layer: Some(0),
        noise_sigma: 0.01,
        ..SynthSpec::default()
    };
    let truth = gen_probe_dataset(&spec, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&truth.manifest_path).unwrap();
    let split = dataset_folds(&ds, 10, 0, true).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        hidden_dim: 16,
        learning_rate: 1e-3,
        max_epochs: 50,
        patience: 10,
        ..TrainConfig::default()
    };
    let report = cross_validate(&ds, 0, ScoreTask::Intelligibility, &cfg, &split, 4).map_err(|e| e.to_string())?;
    check(report.fold_mse.len() == 10, || {
        format!("{} folds", report.fold_mse.len())
    })?;
    check(is_table_cell(&report.cell()), || format!("cell {:?}", report.cell()))?;
    Ok(format!("fold sizes {{3x7, 2x3}}, cell \"{}\"", report.cell()))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_utterances: 15,
        frames_per_utterance: 10,
        dim: 6,
        num_layers: 1,
        cluster_spec: Some(ClusterSpec {
            k: 3,
            spread: 1.0,
            class_offset: 0.0,
            segment_len: 5,
        }),
        ..SynthSpec::default()
    };
    let truth = gen_cluster_dataset(&spec, dir.path()).map_err(|e| e.to_string())?;
    let ds = Dataset::open(&truth.manifest_path).unwrap();
    let pts = frame_level_points(&ds, 0, SpeechTask::SustainedVowel, 1).map_err(|e| e.to_string())?;
    let n = pts.points.rows();
    check(n == 150, || format!("{n} points"))?;

    let cfg = TsneConfig::default();
    let aff = compute_affinities(&pts.points, cfg.perplexity).map_err(|e| e.to_string())?;
    let mut asym = 0.0f64;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((aff.p[(i, j)] - aff.p[(j, i)]).abs());
            total += aff.p[(i, j)];
        }
    }
    check(asym <= 1e-12, || format!("asymmetry {asym:.3e}"))?;
    check((total - 1.0).abs() <= 1e-12, || format!("sum {total}"))?;

    let result = run_tsne(&pts.points, &cfg).map_err(|e| e.to_string())?;
    check(result.kl_final <= result.kl_initial, || {
        format!("KL rose from {} to {}", result.kl_initial, result.kl_final)
    })?;
    let purity = nearest_centroid_purity(&result.coordinates, &pts.labels(LabelBy::Group));
    check(purity >= 0.95, || format!("purity {purity:.3}"))?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "KL {:.3} -> {:.3}, purity {purity:.3}, {elapsed:.1?}",
        result.kl_initial, result.kl_final
    ))
}

const BIN: &str = env!("CARGO_BIN_EXE_layerlens");

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .env_remove("LAYERLENS_OUT_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn compare(name: &str, a: &Path, b: &Path, skip_run: bool) -> Result<usize, String> {
    let (mut ta, mut tb) = (tree(a), tree(b));
    if skip_run {
        ta.remove(Path::new("run.json"));
        tb.remove(Path::new("run.json"));
    }
    check(ta.keys().eq(tb.keys()), || format!("{name}: file sets differ"))?;
    for (path, bytes) in &ta {
        check(tb[path] == *bytes, || format!("{name}: {} differs", path.display()))?;
    }
    Ok(ta.len())
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    let small = [
        "--hidden-dim",
        "16",
        "--lr",
        "1e-3",
        "--epochs",
        "40",
        "--patience",
        "5",
        "--folds",
        "5",
    ];

    let mut runs: Vec<(&str, Vec<String>)> = vec![
        (
            "synth-probe",
            vec![
                "synth",
                "probe",
                "--utterances",
                "40",
                "--frames",
                "8",
                "--dim",
                "3",
                "--layers",
                "3",
                "--signal-layer",
                "1",
                "--noise-sigma",
                "0.01",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "synth-cca",
            vec![
                "synth",
                "cca",
                "--utterances",
                "20",
                "--layers",
                "3",
                "--diverge-from-layer",
                "2",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "synth-clusters",
            vec![
                "synth",
                "clusters",
                "--utterances",
                "12",
                "--frames",
                "10",
                "--dim",
                "6",
                "--layers",
                "2",
                "--class-offset",
                "4",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    runs.push((
        "validate",
        vec!["validate".into(), p("synth-probe/dataset/manifest.json")],
    ));
    runs.push((
        "cca",
        vec![
            "cca".into(),
            p("synth-cca/a/manifest.json"),
            p("synth-cca/b/manifest.json"),
        ],
    ));
    runs.push((
        "cca-fixed",
        vec![
            "cca".into(),
            p("synth-cca/a/manifest.json"),
            p("synth-cca/b/manifest.json"),
            "--variant".into(),
            "svcca".into(),
            "--fixed-reference-layer".into(),
            "2".into(),
        ],
    ));
    let mut probe_train = vec![
        "probe-train".to_string(),
        p("synth-probe/dataset/manifest.json"),
        "--layer".into(),
        "1".into(),
    ];
    probe_train.extend(small.iter().map(|s| s.to_string()));
    runs.push(("probe-train", probe_train));
    let mut sweep = vec!["sweep".to_string(), p("synth-probe/dataset/manifest.json")];
    sweep.extend(small.iter().map(|s| s.to_string()));
    runs.push(("sweep", sweep));
    runs.push((
        "tsne-frame",
        vec![
            "tsne".into(),
            p("synth-clusters/dataset/manifest.json"),
            "--mode".into(),
            "frame".into(),
            "--iterations".into(),
            "300".into(),
        ],
    ));
    runs.push((
        "tsne-phoneme",
        vec![
            "tsne".into(),
            p("synth-clusters/dataset/manifest.json"),
            "--label-by".into(),
            "both".into(),
            "--perplexity".into(),
            "10".into(),
            "--iterations".into(),
            "300".into(),
        ],
    ));
    runs.push((
        "report",
        vec![
            "report".into(),
            "--entry".into(),
            format!("A={}", p("sweep/sweep.json")),
            "--entry".into(),
            format!("B={}", p("probe-train/report.json")),
        ],
    ));

    let mut files = 0;
    for (name, args) in &runs {
        let mut full: Vec<&str> = vec!["--workers", "2", "--out-dir"];
        let out = p(name);
        full.push(&out);
        full.extend(args.iter().map(String::as_str));
        cli(&full)?;
        let run_json = root.join(name).join("run.json");
        let replay = p(&format!("{name}.replay"));
        cli(&["replay", run_json.to_str().unwrap(), "--out-dir", &replay])?;
        files += compare(name, &root.join(name), Path::new(&replay), false)?;
        let serial = p(&format!("{name}.serial"));
        cli(&[
            "--workers",
            "1",
            "replay",
            run_json.to_str().unwrap(),
            "--out-dir",
            &serial,
        ])?;
        compare(name, &root.join(name), Path::new(&serial), true)?;
    }
    Ok(format!("{} runs replayed, {files} files byte-identical", runs.len()))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 pwcca affine invariance", criterion_1),
        ("2 CCA oracle equivalence", criterion_2),
        ("3 SVCCA dimension selection", criterion_3),
        ("4 probe gradient check", criterion_4),
        ("5 probe learnability", criterion_5),
        ("6 layer sweep signal localization", criterion_6),
        ("7 10-fold protocol", criterion_7),
        ("8 t-SNE", criterion_8),
        ("9 CLI determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|pat| name.contains(pat.as_str())) {
            continue;
        }
        let outcome = panic::catch_unwind(f).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
