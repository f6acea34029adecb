use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lsnet::analysis::read_heatmap_csv;
use lsnet::data::{blobs10, read_pnm};

fn lsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsnet"))
        .args(args)
        .env("LSNET_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// A 100-sample blobs10 set in IDX layout.
fn small_dataset(dir: &Path) -> String {
    let path = dir.join("small");
    blobs10(100, 3).save_idx(&path).unwrap();
    path.to_string_lossy().into_owned()
}

fn data_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn describe_marks_reference_budgets() {
    let o = lsnet(&["describe", "--variant", "t", "--res", "224"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("target params 11.4M"), "{out}");
    assert!(out
        .lines()
        .any(|l| l.starts_with("target params") && l.contains("[ok]")));
    assert!(out
        .lines()
        .any(|l| l.starts_with("target FLOPs") && l.contains("MAC") && l.contains("[ok]")));
    let exact = out
        .lines()
        .find_map(|l| l.strip_prefix("LS conv closed form: "))
        .unwrap();
    let (hit, total) = exact.trim_end_matches(" exact").split_once('/').unwrap();
    assert_eq!(hit, total);
    assert_ne!(total, "0");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&lsnet(&["describe", "--variant", "huge"])), 2);
    assert_eq!(code(&lsnet(&["describe", "--bogus"])), 2);
    assert_eq!(code(&lsnet(&["describe", "--variant", "micro", "--ks", "4"])), 2);
    assert_eq!(code(&lsnet(&[])), 2);
}

#[test]
fn ablation_flags_change_the_spec() {
    let full = stdout(&lsnet(&["describe", "--variant", "micro"]));
    let ablated = stdout(&lsnet(&["describe", "--variant", "micro", "--no-lkp-dw", "--kl", "5"]));
    assert!(full.contains("lkp_dw = true") && ablated.contains("lkp_dw = false"));
    assert!(ablated.contains("large_kernel = 5"));
    assert_ne!(full.lines().next(), ablated.lines().next(), "digest line must differ");
}

#[test]
fn spec_file_round_trips_through_describe() {
    let dir = tempfile::tempdir().unwrap();
    let spec: String = stdout(&lsnet(&["describe", "--variant", "s"]))
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.path().join("s.txt");
    fs::write(&path, spec).unwrap();
    let a = stdout(&lsnet(&["describe", "--variant", "s"]));
    let b = stdout(&lsnet(&["describe", "--variant", path.to_str().unwrap()]));
    assert_eq!(a, b);
}

#[test]
fn train_eval_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = lsnet(&[
            "train",
            "--variant",
            "micro",
            "--data",
            &data,
            "--test-data",
            &data,
            "--epochs",
            "2",
            "--batch-size",
            "20",
            "--seed",
            "4",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");

    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# lsnet "));
    assert!(metrics.contains("# spec: micro sha256:"));
    assert!(metrics.contains("# seed: 4"));
    assert!(metrics.contains("# threads: 1"));
    let rows = data_lines(&metrics);
    assert_eq!(rows[0], "epoch,split,loss,top1");
    assert_eq!(rows.len(), 1 + 2 * 2);
    assert_eq!(rows, data_lines(&fs::read_to_string(b.join("metrics.csv")).unwrap()));
    assert_eq!(
        fs::read(a.join("weights.lsw")).unwrap(),
        fs::read(b.join("weights.lsw")).unwrap()
    );

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["model"], "micro");
    assert_eq!(summary["records"].as_array().unwrap().len(), 4);
    assert!(summary["provenance"]
        .as_array()
        .unwrap()
        .iter()
        .any(|l| l.as_str().unwrap().starts_with("command: ")));

    let weights = a.join("weights.lsw");
    let o = lsnet(&["eval", "--weights", weights.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o);
    let top1: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    let last_test = rows.last().unwrap().split(',').nth(3).unwrap().parse::<f64>().unwrap();
    assert!((top1 - last_test).abs() < 1e-4, "{line} vs {last_test}");

    // Weights do not fit a different spec.
    let o = lsnet(&[
        "eval",
        "--weights",
        weights.to_str().unwrap(),
        "--variant",
        "tiny",
        "--data",
        &data,
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_data_exits_3_and_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = lsnet(&[
        "train",
        "--data",
        "/nonexistent/data",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);

    let data = small_dataset(dir.path());
    let o = lsnet(&[
        "train",
        "--data",
        &data,
        "--epochs",
        "1",
        "--lr",
        "1e30",
        "--warmup-epochs",
        "0",
        "--sgd",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divergence at step"));
}

#[test]
fn gen_data_writes_both_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let idx = dir.path().join("idx");
    assert_eq!(code(&lsnet(&["gen-data", "--out-dir", idx.to_str().unwrap()])), 0);
    assert!(idx.join("train/images.idx").is_file() && idx.join("test/labels.idx").is_file());
    assert!(fs::read_to_string(idx.join("provenance.txt"))
        .unwrap()
        .contains("# seed: 0"));

    let raw = dir.path().join("raw");
    assert_eq!(
        code(&lsnet(&[
            "gen-data",
            "--format",
            "raw-dir",
            "--out-dir",
            raw.to_str().unwrap()
        ])),
        0
    );
    let classes = fs::read_dir(raw.join("test")).unwrap().count();
    assert_eq!(classes, 10);
    let o = lsnet(&[
        "eval",
        "--weights",
        "/nonexistent.lsw",
        "--variant",
        "micro",
        "--data",
        raw.join("test").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_rows_share_one_schema() {
    let o = lsnet(&[
        "bench",
        "--op",
        "all",
        "--shape",
        "1,8,8,8",
        "--groups",
        "2",
        "--repeats",
        "1",
    ]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let rows = data_lines(&out);
    assert_eq!(rows[0], lsnet::bench::CSV_HEADER);
    assert_eq!(rows.len(), 4);
    let width = rows[0].split(',').count();
    assert!(rows.iter().all(|r| r.split(',').count() == width));
    assert!(rows[1].starts_with("ska,") && rows[2].starts_with("ska_naive,") && rows[3].starts_with("model:micro,"));
    assert!(out.contains("# warmup: 3"));
}

#[test]
fn aggregation_dump_matches_input_size_and_conserves_mass() {
    let dir = tempfile::tempdir().unwrap();
    let o = lsnet(&[
        "dump-agg-weights",
        "--variant",
        "micro",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = read_pnm(&dir.path().join("agg_s3_l0.pgm")).unwrap();
    assert_eq!((pgm.channels, pgm.height, pgm.width), (1, 32, 32));
    let csv = fs::read_to_string(dir.path().join("agg_s3_l0.csv")).unwrap();
    let mass: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("# mass: "))
        .unwrap()
        .parse()
        .unwrap();
    let map = read_heatmap_csv(&csv).unwrap();
    assert!((map.sum() - mass).abs() <= 1e-4 * mass);
    let up = read_heatmap_csv(&fs::read_to_string(dir.path().join("agg_s3_l0_upsampled.csv")).unwrap()).unwrap();
    assert_eq!((up.height, up.width), (32, 32));

    let o = lsnet(&[
        "dump-agg-weights",
        "--variant",
        "micro",
        "--stage",
        "3",
        "--layer",
        "5",
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn erf_map_writes_heatmaps_and_rejects_bad_positions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = lsnet(&[
        "erf-map",
        "--variant",
        "micro",
        "--probes",
        "2",
        "--res",
        "32",
        "--stage",
        "2",
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = read_pnm(&dir.path().join("erf_s2.pgm")).unwrap();
    assert_eq!((pgm.height, pgm.width), (32, 32));
    let csv = fs::read_to_string(dir.path().join("erf_s2.csv")).unwrap();
    assert!(csv.contains("# position: 2,2 of 4x4"));

    let o = lsnet(&[
        "erf-map",
        "--variant",
        "micro",
        "--probes",
        "1",
        "--res",
        "32",
        "--position",
        "9,0",
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = lsnet(&[
        "gradcheck",
        "--variant",
        "tiny",
        "--samples",
        "24",
        "--batch",
        "4",
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["checks"].as_array().unwrap().len() >= 24);

    let o = lsnet(&[
        "gradcheck",
        "--variant",
        "tiny",
        "--samples",
        "12",
        "--batch",
        "4",
        "--tolerance",
        "1e-12",
    ]);
    assert_eq!(code(&o), 4);
}
