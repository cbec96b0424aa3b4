use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_layerlens");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("LAYERLENS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn probe_dataset(root: &Path, extra: &[&str]) -> PathBuf {
    let dir = root.join("probe");
    let mut args = vec![
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
        "--noise-sigma",
        "0.01",
        "--out-dir",
        s(&dir),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("dataset/manifest.json")
}

const SMALL_PROBE: &[&str] = &[
    "--hidden-dim",
    "16",
    "--lr",
    "1e-3",
    "--epochs",
    "40",
    "--patience",
    "5",
    "--folds",
    "4",
];

#[test]
fn validate_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_dataset(tmp.path(), &["--signal-layer", "1"]);
    assert_eq!(run(&["validate", s(&manifest)]).status.code(), Some(0));

    let victim = tmp.path().join("probe/dataset/layers/utt0007/layer_02.emb");
    fs::remove_file(&victim).unwrap();
    let out = run(&["validate", s(&manifest)]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("layers/utt0007/layer_02.emb"), "{stdout}");
    assert_eq!(stdout.matches("MissingFile").count(), 1);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"dataset_name\": ").unwrap();
    assert_eq!(run(&["validate", s(&bad)]).status.code(), Some(2));
    assert_eq!(
        run(&["validate", s(&tmp.path().join("absent.json"))]).status.code(),
        Some(2)
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["sweep"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(run(&["--workers", "0", "validate", "x"]).status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
    let help = String::from_utf8(run(&["cca", "--help"]).stdout).unwrap();
    assert!(help.contains("--fixed-reference-layer"));
}

#[test]
fn identical_datasets_give_flat_curve_and_reruns_match() {
    let tmp = tempfile::tempdir().unwrap();
    let pair = tmp.path().join("pair");
    ok(&[
        "synth",
        "cca",
        "--utterances",
        "15",
        "--layers",
        "3",
        "--out-dir",
        s(&pair),
    ]);
    let a = pair.join("a/manifest.json");
    let out1 = tmp.path().join("same1");
    ok(&["cca", s(&a), s(&a), "--out-dir", s(&out1)]);
    let csv = fs::read_to_string(out1.join("curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,value"));
    let values: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 3);
    assert!(values.iter().all(|v| (v - 1.0).abs() < 1e-9), "{values:?}");

    let out2 = tmp.path().join("same2");
    ok(&["--workers", "3", "cca", s(&a), s(&a), "--out-dir", s(&out2)]);
    for f in ["curve.csv", "curve.json"] {
        assert_eq!(fs::read(out1.join(f)).unwrap(), fs::read(out2.join(f)).unwrap());
    }

    let fixed = tmp.path().join("fixed");
    ok(&[
        "cca",
        s(&a),
        s(&pair.join("b/manifest.json")),
        "--fixed-reference-layer",
        "2",
        "--out-dir",
        s(&fixed),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(fixed.join("curve.json")).unwrap()).unwrap();
    assert_eq!(json["fixed_reference_layer"], 2);
}

#[test]
fn sweep_table_has_one_row_per_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_dataset(tmp.path(), &["--signal-layer", "2"]);
    let out = tmp.path().join("sweep");
    let mut args = vec!["sweep", s(&manifest), "--out-dir", s(&out)];
    args.extend_from_slice(SMALL_PROBE);
    ok(&args);
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    let rows: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(rows.len(), 3, "{table}");
    for row in rows {
        let cell = row.split('|').nth(1).unwrap().trim();
        let (m, sd) = cell.split_once(" ± ").unwrap();
        for part in [m, sd] {
            let (_, decimals) = part.split_once('.').unwrap();
            assert_eq!(decimals.len(), 2, "{cell}");
        }
    }
    assert!(out.join("sweep.csv").exists() && out.join("sweep.json").exists());
}

#[test]
fn missing_scores_are_a_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = probe_dataset(tmp.path(), &[]);
    let out_dir = tmp.path().join("o");
    let mut args = vec!["sweep", s(&manifest), "--out-dir", s(&out_dir)];
    args.extend_from_slice(SMALL_PROBE);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("have no intelligibility score"));
}

#[test]
fn tsne_legend_and_default_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("clusters");
    ok(&[
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
        "--out-dir",
        s(&data),
    ]);
    let manifest = data.join("dataset/manifest.json");
    let out = tmp.path().join("tsne");
    ok(&[
        "tsne",
        s(&manifest),
        "--mode",
        "frame",
        "--iterations",
        "300",
        "--out-dir",
        s(&out),
    ]);
    let svg = fs::read_to_string(out.join("scatter.svg")).unwrap();
    assert_eq!(svg.matches("class=\"legend-entry\"").count(), 3);
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("tsne.json")).unwrap()).unwrap();
    assert_eq!(summary["layer"], 1);
    assert_eq!(summary["n_points"], 120);
    let csv = fs::read_to_string(out.join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("point_id,x,y,label"));

    let again = tmp.path().join("tsne2");
    ok(&[
        "tsne",
        s(&manifest),
        "--mode",
        "frame",
        "--iterations",
        "300",
        "--out-dir",
        s(&again),
    ]);
    assert_eq!(
        fs::read(out.join("scatter.csv")).unwrap(),
        fs::read(again.join("scatter.csv")).unwrap()
    );

    let probe = probe_dataset(tmp.path(), &[]);
    let out = run(&["tsne", s(&probe), "--out-dir", s(&tmp.path().join("none"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn out_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("from-env");
    let out = Command::new(BIN)
        .args([
            "synth",
            "probe",
            "--utterances",
            "5",
            "--frames",
            "4",
            "--dim",
            "2",
            "--layers",
            "1",
        ])
        .env("LAYERLENS_OUT_DIR", &dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("run.json").exists());
    assert!(dir.join("dataset/manifest.json").exists());
}

#[test]
fn report_combines_tasks_into_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let intel = probe_dataset(tmp.path(), &["--signal-layer", "0"]);
    let sev_dir = tmp.path().join("sev");
    ok(&[
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
        "--task",
        "severity",
        "--seed",
        "4",
        "--out-dir",
        s(&sev_dir),
    ]);
    let mut results = Vec::new();
    for (name, manifest, task) in [
        ("i", &intel, "intelligibility"),
        ("s", &sev_dir.join("dataset/manifest.json"), "severity"),
    ] {
        let out = tmp.path().join(format!("pt-{name}"));
        let mut args = vec![
            "probe-train",
            s(manifest),
            "--layer",
            "0",
            "--task",
            task,
            "--out-dir",
            s(&out),
        ];
        args.extend_from_slice(SMALL_PROBE);
        ok(&args);
        assert!(out.join("model.prb").exists());
        results.push(out.join("report.json"));
    }
    let e1 = format!("base-asr={}", s(&results[0]));
    let e2 = format!("base-asr={}", s(&results[1]));
    let e3 = format!("small-ssl={}", s(&results[0]));
    let out = tmp.path().join("report");
    ok(&[
        "report",
        "--entry",
        &e1,
        "--entry",
        &e2,
        "--entry",
        &e3,
        "--out-dir",
        s(&out),
    ]);
    let table = fs::read_to_string(out.join("table.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].contains("Intelligibility MSE") && lines[0].contains("Severity MSE"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("base-asr") && lines[3].starts_with("small-ssl"));
    assert!(lines[3].trim_end().ends_with('-'));

    let dup = run(&[
        "report",
        "--entry",
        &e1,
        "--entry",
        &e1,
        "--out-dir",
        s(&tmp.path().join("dup")),
    ]);
    assert_eq!(dup.status.code(), Some(2));
}
