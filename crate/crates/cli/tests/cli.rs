use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use focal3d::data::kitti::write_results;
use focal3d::data::{filter_sparse_boxes, Dataset};
use focal3d::geometry::Detection;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_focal3d"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn focal3d")
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

fn gen(dir: &Path, count: usize, extra: &[&str]) -> PathBuf {
    let out = dir.join("ds");
    let count = count.to_string();
    let mut args = vec!["gen-data", "--count", &count, "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn missing_gamma_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.gamma"));
}

#[test]
fn unknown_keys_and_detectors_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["flops", "--set", "train.epoch=[1,1]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));
    let out = run(&["flops", "--detector", "pointnet"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("detector"));
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"loss": {"gamma": 2, "alpah": 0.5}}"#).unwrap();
    let out = run(&["flops", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loss.alpah"));
}

#[test]
fn gen_data_is_deterministic_and_zero_count_writes_only_a_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let da = gen(a.path(), 3, &["--seed", "5"]);
    let db = gen(b.path(), 3, &["--seed", "5"]);
    for sub in ["velodyne/000002.bin", "label_2/000001.txt", "dataset.json"] {
        assert_eq!(fs::read(da.join(sub)).unwrap(), fs::read(db.join(sub)).unwrap(), "{sub}");
    }
    let c = tempfile::tempdir().unwrap();
    let dc = gen(c.path(), 3, &["--seed", "6"]);
    assert_ne!(
        fs::read(da.join("velodyne/000000.bin")).unwrap(),
        fs::read(dc.join("velodyne/000000.bin")).unwrap()
    );

    let empty = a.path().join("empty");
    ok(&["gen-data", "--count", "0", "--out", s(&empty)]);
    let names: Vec<String> = fs::read_dir(&empty)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(names, ["manifest.json"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(empty.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["toolkit_version"], focal3d::VERSION);
}

#[test]
fn smoke_training_run_finishes_quickly_with_the_metrics_header() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 2, &[]);
    let run_dir = dir.path().join("run");
    let t = Instant::now();
    ok(&[
        "train",
        "--data",
        s(&ds),
        "--gamma",
        "2",
        "--set",
        "data.max_frames=1",
        "--set",
        "train.epochs=[25,25]",
        "--set",
        "train.batch_size=1",
        "--set",
        "train.validate_every=25",
        "--out",
        s(&run_dir),
    ]);
    assert!(t.elapsed().as_secs() < 60, "took {:?}", t.elapsed());
    let text = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,epoch,loss,cls_pos,cls_neg,reg,val_map"));
    assert_eq!(lines.count(), 50);
    let best = fs::read_to_string(run_dir.join("best.txt")).unwrap();
    assert!(run_dir.join(best.trim()).exists());
    for f in ["config.json", "summary.json", "manifest.json", "train.txt", "val.txt"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn oracle_results_score_full_ap() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 4, &[]);
    let results = dir.path().join("results");
    fs::create_dir(&results).unwrap();
    let data = Dataset::open(&ds).unwrap();
    for id in data.ids() {
        let (frame, _) = filter_sparse_boxes(&data.load_frame(id).unwrap(), 10);
        let dets: Vec<Detection> = frame
            .labels
            .iter()
            .map(|l| Detection {
                bbox: l.bbox,
                score: 1.0,
            })
            .collect();
        write_results(
            &results.join(format!("{id}.txt")),
            "Car",
            &dets,
            &data.calibration(id).unwrap(),
        )
        .unwrap();
    }
    let out = dir.path().join("ev");
    ok(&[
        "eval",
        "--data",
        s(&ds),
        "--results",
        s(&results),
        "--split",
        "all",
        "--out",
        s(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ap.json")).unwrap()).unwrap();
    assert!((report["map_3d"].as_f64().unwrap() - 100.0).abs() < 1e-9, "{report}");
    for d in ["easy", "moderate", "hard"] {
        if let Some(v) = report["bev"][d].as_f64() {
            assert!((v - 100.0).abs() < 1e-9, "{report}");
        }
    }
}

#[test]
fn equal_losses_give_a_diagonal_cdf() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump.csv");
    let mut text = String::from("y,p_t\n");
    for i in 0..200 {
        text.push_str(if i % 2 == 0 { "1,0.3\n" } else { "-1,0.3\n" });
    }
    fs::write(&dump, text).unwrap();
    let out = dir.path().join("an");
    ok(&["analyze", "--dump", s(&dump), "--out", s(&out)]);
    for name in ["cdf_pos_g0.csv", "cdf_neg_g2.csv", "cdf_pos_g5.csv"] {
        let rows = read_csv(&out.join(name));
        assert_eq!(rows[0], ["x", "y"]);
        assert_eq!(rows.len(), 101);
        for r in &rows[1..] {
            let x: f64 = r[0].parse().unwrap();
            let y: f64 = r[1].parse().unwrap();
            assert!((x - y).abs() < 1e-9, "{name}: {x} {y}");
        }
    }
    let hist = read_csv(&out.join("histogram.csv"));
    assert_eq!(hist.len(), 21);
    assert!(out.join("sweep_pos.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn checkpoint_format_mismatch_reports_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen(dir.path(), 2, &[]);
    let run_dir = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&ds),
        "--gamma",
        "0",
        "--set",
        "train.epochs=[1,1]",
        "--set",
        "data.max_frames=1",
        "--out",
        s(&run_dir),
    ]);
    let ckpt = run_dir.join("checkpoints/epoch_002.bin");
    let side = ckpt.with_extension("json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&side).unwrap()).unwrap();
    m["format"] = 99.into();
    fs::write(&side, m.to_string()).unwrap();
    let out = run(&[
        "predict",
        "--data",
        s(&ds),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&dir.path().join("pred")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint format 1") && err.contains("checkpoint format 99"), "{err}");
}

#[test]
fn flops_table_totals_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fl");
    let stdout = ok(&["flops", "--detector", "3dfcn-full", "--out", s(&out)]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert!(text.lines().last().unwrap().starts_with("total"));
    let rows = read_csv(&out.join("flops.csv"));
    assert_eq!(rows[0], ["block", "name", "kind", "output", "flops"]);
    assert!(rows.len() > 2);
}

#[test]
fn imbalance_and_predict_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("im");
    ok(&["imbalance", "--scenes", "2", "--out", s(&out)]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("imbalance.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 2);
    assert!(report["mean_ratio"].as_f64().unwrap() > 1.0);

    let ds = gen(dir.path(), 2, &[]);
    let run_dir = dir.path().join("run");
    ok(&[
        "train", "--data", s(&ds), "--gamma", "1", "--set", "train.epochs=[1,1]", "--out",
        s(&run_dir),
    ]);
    let best = fs::read_to_string(run_dir.join("best.txt")).unwrap();
    let ckpt = run_dir.join(best.trim());
    let pred = dir.path().join("pred");
    ok(&[
        "predict", "--data", s(&ds), "--checkpoint", s(&ckpt), "--split", "all", "--out",
        s(&pred),
    ]);
    for id in ["000000", "000001"] {
        assert!(pred.join(format!("{id}.txt")).exists());
    }
    let an = dir.path().join("an");
    ok(&["analyze", "--data", s(&ds), "--checkpoint", s(&ckpt), "--out", s(&an)]);
    assert!(an.join("dump.csv").exists());
}
