//! End-to-end runs of the `mvtt` binary on tiny phantoms.

use std::path::Path;
use std::process::{Command, Output};

use mvtt::phantom::Volume;

fn mvtt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvtt")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = mvtt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    mvtt(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn phantoms(dir: &Path, count: &str, seed: &str) {
    ok(&["phantom", "--count", count, "--size", "16", "--seed", seed, "--out", p(dir)]);
}

#[test]
fn phantom_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    phantoms(&a, "2", "7");
    phantoms(&b, "2", "7");
    for f in ["phantom_000.mvttvol", "phantom_001.mvttvol", "dataset.json", "run.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let v = Volume::from_bytes(&read(a.join("phantom_000.mvttvol"))).unwrap();
    assert_eq!(v.extents(), (16, 16, 16));
    assert!(v.la_pv().is_some() && v.scar().is_some());
}

#[test]
fn bad_arguments_exit_with_one() {
    let t = tempfile::tempdir().unwrap();
    let out = p(t.path());
    assert_eq!(code(&["phantom", "--count", "0", "--out", out]), 1);
    assert_eq!(code(&["phantom", "--count", "2", "--size", "20", "--out", out]), 1);
    assert_eq!(code(&["phantom", "--count", "2", "--size", "16", "--folds", "3", "--out", out]), 1);
    assert_eq!(code(&["train", "--data", out, "--out", out, "--variant", "bogus"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let none = t.path().join("nothing");
    let out = t.path().join("out");
    assert_eq!(code(&["train", "--data", p(&none), "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--pred", p(&none), "--truth", p(&none), "--out", p(&out)]), 2);
    let junk = t.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let vol = t.path().join("v.mvttvol");
    std::fs::write(&vol, b"MVTTVOL1").unwrap();
    assert_eq!(code(&["infer", "--checkpoint", p(&junk), "--volume", p(&vol), "--out", p(&out)]), 2);
}

#[test]
fn train_infer_eval_round() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "3", "1");
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--folds", "1", "--quiet"]);
    for f in ["model.ckpt", "loss.csv", "report.json", "report.csv", "run.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let loss = String::from_utf8(read(run.join("loss.csv"))).unwrap();
    assert_eq!(loss.lines().count(), 3, "{loss}");

    let ckpt = run.join("model.ckpt");
    let vol = data.join("phantom_000.mvttvol");
    let (pa, pb) = (t.path().join("pa"), t.path().join("pb"));
    for out in [&pa, &pb] {
        ok(&["infer", "--checkpoint", p(&ckpt), "--volume", p(&vol), "--out", p(out)]);
    }
    for f in ["phantom_000.mvttvol", "prob/phantom_000_la_pv.mvttvol", "prob/phantom_000_scar.mvttvol"] {
        assert_eq!(read(pa.join(f)), read(pb.join(f)), "{f}");
    }
    assert!(pa.join("overlays/phantom_000_z008_la_pv.pgm").is_file());
    assert!(pa.join("attention/phantom_000_z008.pgm").is_file());
    let pred = Volume::from_bytes(&read(pa.join("phantom_000.mvttvol"))).unwrap();
    assert!(pred.la_pv().is_some() && pred.scar().is_some());

    // prediction directory holds one of three truth volumes
    let ev = t.path().join("ev");
    let out = mvtt(&["eval", "--pred", p(&pa), "--truth", p(&data), "--out", p(&ev)]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("phantom_001") && msg.contains("phantom_002"), "{msg}");
}

#[test]
fn infer_rejects_mismatched_extents() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "1", "2");
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--folds", "1", "--quiet"]);
    let big = t.path().join("big");
    ok(&["phantom", "--count", "1", "--size", "24", "--out", p(&big)]);
    let out = mvtt(&[
        "infer",
        "--checkpoint",
        p(&run.join("model.ckpt")),
        "--volume",
        p(&big.join("phantom_000.mvttvol")),
        "--out",
        p(&t.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("24"));
}

#[test]
fn eval_of_truth_against_itself_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "3", "3");
    let ev = t.path().join("ev");
    ok(&["eval", "--pred", p(&data), "--truth", p(&data), "--out", p(&ev)]);
    let report: serde_json::Value = serde_json::from_slice(&read(ev.join("report.json"))).unwrap();
    for v in report["volumes"].as_array().unwrap() {
        assert_eq!(v["la_pv"]["dice"], 1.0);
        assert_eq!(v["scar"]["dice"], 1.0);
    }
    let agg = &report["agreement"];
    assert!((agg["pearson_r"].as_f64().unwrap() - 1.0).abs() < 1e-12, "{agg}");
    assert_eq!(agg["bland_altman"]["mean_diff"], 0.0, "{agg}");
}

#[test]
fn baselines_write_reports_and_comparison() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "2", "4");
    let out = t.path().join("b");
    ok(&["baselines", "--data", p(&data), "--out", p(&out)]);
    let cmp = String::from_utf8(read(out.join("comparison.csv"))).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 2 * 3);
    for m in ["2sd", "kmeans", "fcm"] {
        assert!(out.join(format!("{m}_report.json")).is_file());
        assert!(out.join(m).join("phantom_001.mvttvol").is_file());
    }

    let single = t.path().join("s");
    ok(&["baselines", "--data", p(&data), "--methods", "2sd", "--n-sd", "-0.5", "--out", p(&single)]);
    assert!(single.join("2sd_report.json").is_file());
    assert!(!single.join("kmeans_report.json").exists());
}

#[test]
fn unknown_variant_lists_the_valid_tags() {
    let t = tempfile::tempdir().unwrap();
    let out = mvtt(&["train", "--data", p(t.path()), "--out", p(t.path()), "--variant", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    for tag in ["MVTT", "SeparateLaPv", "SeparateScar", "AxialConvLstm"] {
        assert!(msg.contains(tag), "{msg}");
    }
}

#[test]
fn leave_one_out_writes_a_report_per_fold_and_an_aggregate() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "3", "8");
    let before: Vec<Vec<u8>> = (0..3).map(|i| read(data.join(format!("phantom_{i:03}.mvttvol")))).collect();
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--folds", "3", "--quiet"]);
    let mut ids = Vec::new();
    for f in 0..3 {
        let dir = run.join(format!("fold_{f:02}"));
        assert!(dir.join("model.ckpt").is_file());
        let r: serde_json::Value = serde_json::from_slice(&read(dir.join("report.json"))).unwrap();
        let vols = r["volumes"].as_array().unwrap();
        assert_eq!(vols.len(), 1);
        ids.push(vols[0]["id"].as_str().unwrap().to_owned());
    }
    ids.sort();
    assert_eq!(ids, ["phantom_000", "phantom_001", "phantom_002"]);
    let agg: serde_json::Value = serde_json::from_slice(&read(run.join("aggregate_report.json"))).unwrap();
    assert_eq!(agg["volumes"].as_array().unwrap().len(), 3);
    assert_eq!(agg["la_pv"]["dice"]["n"], 3);
    for (i, b) in before.iter().enumerate() {
        assert_eq!(&read(data.join(format!("phantom_{i:03}.mvttvol"))), b);
    }
}

#[test]
fn infer_works_without_truth() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "1", "9");
    let run = t.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--folds", "1", "--quiet"]);
    let bare = t.path().join("bare.mvttvol");
    let v = Volume::from_bytes(&read(data.join("phantom_000.mvttvol"))).unwrap();
    std::fs::write(&bare, v.without_masks().to_bytes()).unwrap();
    let pred = t.path().join("pred");
    ok(&["infer", "--checkpoint", p(&run.join("model.ckpt")), "--volume", p(&bare), "--out", p(&pred)]);
    let out = Volume::from_bytes(&read(pred.join("bare.mvttvol"))).unwrap();
    assert_eq!(out.intensities(), v.intensities());
    assert!(out.la_pv().is_some() && out.scar().is_some());
    assert!(pred.join("overlays/bare_z008_scar.ppm").is_file());
}

#[test]
fn baselines_find_scar_on_clean_phantoms() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    // dark blood, so only scar stands out of the shell around the LA boundary
    let mut spec = mvtt::phantom::PhantomSpec::desk(32, 0);
    spec.contrast.blood = 0.15;
    spec.noise_std = 0.02;
    let spec_path = t.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_vec(&spec).unwrap()).unwrap();
    ok(&["phantom", "--count", "2", "--spec", p(&spec_path), "--out", p(&data)]);
    let out = t.path().join("b");
    ok(&["baselines", "--data", p(&data), "--out", p(&out)]);
    for m in ["2sd", "kmeans", "fcm"] {
        let r: serde_json::Value = serde_json::from_slice(&read(out.join(format!("{m}_report.json")))).unwrap();
        let dice = r["scar"]["dice"]["mean"].as_f64().unwrap();
        assert!(dice > 0.6, "{m}: {dice}");
    }
}

#[test]
fn diverging_training_exits_with_three() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    phantoms(&data, "1", "10");
    let cfg = t.path().join("cfg.json");
    std::fs::write(&cfg, br#"{"lr_initial":1e150,"lr_final":1e150}"#).unwrap();
    let out = mvtt(&[
        "train", "--data", p(&data), "--config", p(&cfg), "--epochs", "5", "--folds", "1", "--quiet", "--out",
        p(&t.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
