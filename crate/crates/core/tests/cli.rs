use std::ffi::OsString;
use std::path::Path;
use std::process::Command;

use lrru::checkpoint;
use lrru::config::LrruConfig;
use lrru::data::{list_pngs, read_depth_png, write_depth_png};
use lrru::depth::DepthMap;
use lrru::guidance::init_params;
use lrru::train::save_model;

fn run(args: &[&dyn AsRef<std::ffi::OsStr>]) -> i32 {
    let mut v: Vec<OsString> = vec!["lrru".into()];
    v.extend(args.iter().map(|a| a.as_ref().to_os_string()));
    lrru::cli::run(v)
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lrru"))
}

fn synth(dir: &Path, count: &str, seed: &str, sparsity: &str) -> i32 {
    run(&[&"synth", &"--out", &dir, &"--count", &count, &"--size", &"32x32", &"--seed", &seed, &"--sparsity", &sparsity])
}

#[test]
fn synth_writes_six_pngs_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("ds");
    let out = bin()
        .args(["synth", "--out"])
        .arg(&dir)
        .args(["--count", "2", "--size", "64x64", "--seed", "3", "--sparsity", "random:500"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(manifest["count"], 2);
    assert_eq!(manifest["sparsity"], "random:500");
    let mut pngs = 0;
    for sub in ["rgb", "sparse", "gt"] {
        pngs += list_pngs(&dir.join(sub)).unwrap().len();
    }
    assert_eq!(pngs, 6);
    assert!(dir.join("manifest.json").exists());
    for name in list_pngs(&dir.join("sparse")).unwrap() {
        assert_eq!(read_depth_png(&dir.join("sparse").join(name)).unwrap().valid_count(), 500);
    }
}

#[test]
fn synth_is_byte_identical_and_refuses_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(synth(&a, "2", "9", "lines:4"), 0);
    assert_eq!(synth(&b, "2", "9", "lines:4"), 0);
    for sub in ["rgb", "sparse", "gt"] {
        for name in list_pngs(&a.join(sub)).unwrap() {
            assert_eq!(std::fs::read(a.join(sub).join(&name)).unwrap(), std::fs::read(b.join(sub).join(&name)).unwrap());
        }
    }
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    assert_eq!(synth(&a, "2", "9", "lines:4"), 1);
    assert_eq!(run(&[&"synth", &"--out", &a, &"--count", &"1", &"--size", &"32x32", &"--force"]), 0);
    assert_eq!(synth(&tmp.path().join("c"), "1", "0", "sparse:all"), 1);
}

#[test]
fn prefill_command_densifies_and_rejects_empty() {
    let tmp = tempfile::tempdir().unwrap();
    let mut m = DepthMap::empty(16, 16);
    m.set(3, 4, 2000.0);
    m.set(12, 9, 6000.0);
    let input = tmp.path().join("sparse.png");
    write_depth_png(&m, &input).unwrap();
    let out = tmp.path().join("dense.png");
    assert_eq!(run(&[&"prefill", &"--in", &input, &"--out", &out, &"--max-depth", &"10000"]), 0);
    let dense = read_depth_png(&out).unwrap();
    assert!(dense.is_dense());
    assert_eq!(dense.get(3, 4), Some(2000.0));

    let empty = tmp.path().join("empty.png");
    write_depth_png(&DepthMap::empty(8, 8), &empty).unwrap();
    let out2 = tmp.path().join("never.png");
    let status = bin().args(["prefill", "--in"]).arg(&empty).arg("--out").arg(&out2).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("no valid pixels"));
    assert!(!out2.exists());
}

#[test]
fn eval_of_ground_truth_against_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, "2", "1", "random:100"), 0);
    let report = tmp.path().join("report.json");
    assert_eq!(run(&[&"eval", &"--pred", &ds, &"--gt", &ds, &"--report", &report]), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["pooled"]["rmse_mm"], 0.0);
    assert_eq!(r["pooled"]["delta1"], 100.0);
    assert_eq!(r["count"], 2);
    // sparse maps have holes where gt is valid
    assert_eq!(run(&[&"eval", &"--pred", &ds.join("sparse"), &"--gt", &ds, &"--report", &report]), 2);
    assert_eq!(run(&[&"eval", &"--pred", &tmp.path().join("missing"), &"--gt", &ds, &"--report", &report]), 2);
}

#[test]
fn infer_diag_and_viz_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(synth(&ds, "2", "4", "random:150"), 0);
    let cfg = LrruConfig::mini_indoor();
    let ckpt = tmp.path().join("model.lrru");
    save_model(&ckpt, &init_params(&cfg, 0).unwrap(), &cfg).unwrap();

    let pred = tmp.path().join("pred");
    assert_eq!(run(&[&"infer", &"--ckpt", &ckpt, &"--in", &ds, &"--out", &pred]), 0);
    let names = list_pngs(&pred).unwrap();
    assert_eq!(names, vec!["000000.png", "000001.png"]);
    assert!(read_depth_png(&pred.join(&names[0])).unwrap().is_dense());
    let first = std::fs::read(pred.join(&names[0])).unwrap();

    // single sparse file picks up its rgb sibling; output is identical
    let single = tmp.path().join("single");
    assert_eq!(run(&[&"infer", &"--ckpt", &ckpt, &"--in", &ds.join("sparse").join(&names[0]), &"--out", &single]), 0);
    assert_eq!(std::fs::read(single.join(&names[0])).unwrap(), first);

    let tta = tmp.path().join("tta");
    assert_eq!(run(&[&"infer", &"--ckpt", &ckpt, &"--in", &ds, &"--out", &tta, &"--tta"]), 0);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(tta.join("infer.json")).unwrap()).unwrap();
    assert_eq!(summary["tta"], true);

    let stats = tmp.path().join("stats.json");
    assert_eq!(run(&[&"diag", &"--ckpt", &ckpt, &"--data", &ds, &"--out", &stats]), 0);
    let s: serde_json::Value = serde_json::from_slice(&std::fs::read(&stats).unwrap()).unwrap();
    let iters = s["iterations"].as_array().unwrap();
    assert_eq!(iters.len(), 4);
    assert_eq!(iters[0]["iteration"], 1);
    assert!(iters[3]["mean_dist_px"].as_f64().unwrap() > 0.0);

    let color = tmp.path().join("color.png");
    assert_eq!(run(&[&"viz", &"--in", &pred.join(&names[0]), &"--out", &color]), 0);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("color.json")).unwrap()).unwrap();
    assert!(side["min_mm"].as_f64().unwrap() <= side["max_mm"].as_f64().unwrap());
    assert!(lrru::data::read_rgb_png(&color).is_ok());
}

#[test]
fn train_command_writes_checkpoints_and_log() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    assert_eq!(run(&[&"synth", &"--out", &ds, &"--count", &"3", &"--size", &"16x16", &"--sparsity", &"random:60"]), 0);
    let mut cfg = LrruConfig::mini_indoor();
    cfg.optimizer.epochs = 2;
    cfg.optimizer.batch = 2;
    cfg.val_count = 1;
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = tmp.path().join("ckpt");
    assert_eq!(run(&[&"train", &"--config", &cfg_path, &"--data", &ds, &"--out", &out]), 0);
    for f in ["epoch_000.lrru", "epoch_001.lrru", "last.lrru", "train_log.ndjson"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.ndjson")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 1);
    assert_eq!(lines[0]["val"]["rmse_mm"].as_array().unwrap().len(), 4);

    let (_, header) = checkpoint::load(&out.join("last.lrru")).unwrap();
    assert_eq!(header.config.unwrap()["val_count"], 1);

    let mut bad: serde_json::Value = serde_json::to_value(&cfg).unwrap();
    bad["learning_rate"] = 0.1.into();
    std::fs::write(&cfg_path, bad.to_string()).unwrap();
    assert_eq!(run(&[&"train", &"--config", &cfg_path, &"--data", &ds, &"--out", &out]), 2);
}

#[test]
fn gradcheck_command_passes() {
    let out = bin().args(["gradcheck", "--seed", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(v["ops"].as_array().unwrap().len() >= 20);
}

#[test]
fn unknown_flags_and_subcommands_exit_one() {
    assert_eq!(bin().args(["viz", "--colour"]).status().unwrap().code(), Some(1));
    assert_eq!(bin().arg("serve").status().unwrap().code(), Some(1));
    assert_eq!(bin().arg("--help").status().unwrap().code(), Some(0));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let rgb = LrruConfig::load(&dir.join("mini_indoor.json")).unwrap();
    assert_eq!(rgb, LrruConfig::mini_indoor());
    let depth_only = LrruConfig::load(&dir.join("mini_indoor_depth_only.json")).unwrap();
    assert!(depth_only.depth_only);
}
