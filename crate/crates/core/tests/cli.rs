use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rmt_core::data::{decode_pgm16, load_dataset};
use rmt_core::model::{read_card, Model};
use rmt_core::train::{evaluate, MetricsReport};

fn rmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmt")).args(args).output().expect("spawn rmt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = rmt(args);
    assert_eq!(
        code(&out),
        0,
        "rmt {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, count: usize, size: usize, seed: u64) {
    ok(&["gen", "--out", s(dir), "--count", &count.to_string(), "--size", &size.to_string(), "--seed", &seed.to_string()]);
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, 32, 64, 42);
    gen(&b, 32, 64, 42);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 65);
    assert_eq!(ta, tb);
}

#[test]
fn gen_validates_count_and_echoes_channel_defaults() {
    let t = tempfile::tempdir().unwrap();
    let out = rmt(&["gen", "--out", s(&t.path().join("x")), "--count", "0"]);
    assert_eq!(code(&out), 2);

    let d = t.path().join("d");
    gen(&d, 2, 16, 0);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["channel"]["alpha"], 3.0);
    assert_eq!(m["channel"]["beta"], 32.4);
    assert_eq!(m["channel"]["sigma_sf"], 6.0);
    assert_eq!(m["config"]["alpha"].as_str().unwrap().parse::<f64>().unwrap(), 3.0);
    assert_eq!(m["config"]["size"], "16");
}

#[test]
fn bad_flags_and_missing_inputs() {
    assert_eq!(code(&rmt(&["gen", "--bogus"])), 2);
    assert_eq!(code(&rmt(&["frobnicate"])), 2);
    let t = tempfile::tempdir().unwrap();
    let ckpt = t.path().join("m.rmtc");
    let out = rmt(&["train", "--data", s(&t.path().join("missing")), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&rmt(&["gradcheck", "--inject-fault", "nonsense"])), 2);
}

#[test]
fn train_smoke_is_deterministic_and_validates_profile() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, 32, 64, 7);
    let (a, b) = (t.path().join("a.rmtc"), t.path().join("b.rmtc"));
    for ckpt in [&a, &b] {
        ok(&["train", "--data", s(&d), "--out", s(ckpt), "--epochs", "2", "--seed", "3"]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let csv = fs::read_to_string(a.with_extension("csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.with_extension("csv")).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,epoch,lr,loss"));
    // 28 training samples, batch 8: 4 steps per epoch.
    assert_eq!(lines.count(), 8);
    let card = read_card(&a).unwrap().expect("card");
    assert_eq!(card.config.profile, "desk");

    let out = rmt(&["train", "--data", s(&d), "--out", s(&t.path().join("p.rmtc")), "--profile", "paper"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));
}

#[test]
fn eval_oracle_threshold_and_library_equivalence() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, 20, 16, 1);

    let v: serde_json::Value = serde_json::from_str(&ok(&["eval", "--data", s(&d), "--oracle"])).unwrap();
    for k in ["rmse", "ch_pred_err", "cov_pred_err"] {
        assert_eq!(v[k], 0.0, "{k}");
    }

    let ckpt = t.path().join("m.rmtc");
    ok(&["train", "--data", s(&d), "--out", s(&ckpt), "--profile", "desk-mini", "--epochs", "1"]);
    let json = |thr: &str| -> MetricsReport {
        let out = t.path().join(format!("m{thr}.json"));
        ok(&["eval", "--data", s(&d), "--checkpoint", s(&ckpt), "--threshold", thr, "--out", s(&out)]);
        serde_json::from_slice(&fs::read(out).unwrap()).unwrap()
    };
    let (lo, hi) = (json("0.3"), json("0.8"));
    assert_eq!(lo.rmse, hi.rmse);
    assert_eq!(lo.ch_pred_err, hi.ch_pred_err);
    assert_ne!(lo.cov_pred_err, hi.cov_pred_err);

    let ds = load_dataset(&d).unwrap();
    let (_, test) = ds.split();
    let card = read_card(&ckpt).unwrap().unwrap();
    let model = Model::<f32>::load(card.config, card.kind, &ckpt).unwrap();
    assert_eq!(evaluate(&model, &ds.subset(&test), 0.8, false).unwrap(), hi);

    let other = t.path().join("b.rmtc");
    ok(&["train", "--data", s(&d), "--out", s(&other), "--profile", "desk-mini", "--model", "baseline", "--max-steps", "1"]);
    let out = rmt(&["eval", "--data", s(&d), "--checkpoint", s(&other), "--model", "rmt"]);
    assert_eq!(code(&out), 1, "incompatible checkpoint");
}

#[test]
fn predict_range_determinism_and_geo_input() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    gen(&d, 10, 16, 2);
    let ckpt = t.path().join("m.rmtc");
    ok(&["train", "--data", s(&d), "--out", s(&ckpt), "--profile", "desk-mini", "--max-steps", "2"]);
    let (a, b) = (t.path().join("pa"), t.path().join("pb"));
    for out in [&a, &b] {
        ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&d), "--split", "all", "--out", s(out), "--side-by-side"]);
    }
    assert_eq!(tree(&a), tree(&b));
    for i in 0..10 {
        let (w, h, v) = decode_pgm16(&fs::read(a.join(format!("{i:05}.pred.pgm"))).unwrap()).unwrap();
        assert_eq!((w, h), (16, 16));
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        let (w, _, _) = decode_pgm16(&fs::read(a.join(format!("{i:05}.side.pgm"))).unwrap()).unwrap();
        assert_eq!(w, 32);
    }

    let g = a.join("geo.pgm");
    fs::copy(d.join("samples/00000.geo.pgm"), &g).unwrap();
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    let tx = format!("{},{}", m["samples"][0]["tx"][0], m["samples"][0]["tx"][1]);
    let single = t.path().join("single");
    ok(&["predict", "--checkpoint", s(&ckpt), "--geo", s(&g), "--tx", &tx, "--out", s(&single)]);
    assert_eq!(fs::read(single.join("pred.pgm")).unwrap(), fs::read(a.join("00000.pred.pgm")).unwrap());
}

#[test]
fn predict_after_overfit_matches_training_sample() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("d");
    // Two samples split into one training and one test sample.
    gen(&d, 2, 16, 4);
    let ckpt = t.path().join("m.rmtc");
    ok(&[
        "train", "--data", s(&d), "--out", s(&ckpt), "--profile", "desk-mini", "--seed", "1", "--epochs", "200",
        "--batch-size", "1", "--lr-start", "1e-2", "--lr-end", "1e-2",
    ]);
    let out = t.path().join("p");
    let stdout = ok(&["predict", "--checkpoint", s(&ckpt), "--data", s(&d), "--split", "train", "--out", s(&out)]);
    let p: serde_json::Value = serde_json::from_slice(&fs::read(out.join("predictions.json")).unwrap()).unwrap();
    let rmse = p["predictions"][0]["rmse"].as_f64().unwrap();
    assert!(rmse < 0.04, "{stdout}");
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "# desk-mini run\ncount = 3\nsize = 16\nseed = 5\nalpha = 2.5\n").unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["gen", "--config", s(&cfg), "--out", s(&b), "--count", "4"]);
    let ma: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!((ma["count"].as_u64(), mb["count"].as_u64()), (Some(3), Some(4)));
    assert_eq!(ma["master_seed"], 5);
    assert_eq!(ma["channel"]["alpha"], 2.5);

    fs::write(&cfg, "count = 3\nwarp_factor = 9\n").unwrap();
    assert_eq!(code(&rmt(&["gen", "--config", s(&cfg), "--out", s(&a)])), 2);
}

#[test]
fn gradcheck_passes_and_catches_injected_fault() {
    let out = ok(&["gradcheck", "--seed", "9"]);
    assert!(out.lines().any(|l| l.contains("end-to-end") && l.contains("pass")), "{out}");
    assert!(!out.contains("FAIL"));

    let out = rmt(&["gradcheck", "--inject-fault", "mul"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
