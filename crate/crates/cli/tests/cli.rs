use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bot"))
        .current_dir(dir)
        .env_remove("BOT_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn bot")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bot(dir, args);
    assert!(
        out.status.success(),
        "bot {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &[&str] = &["--set", "model.preset=tiny", "--set", "train.epochs=2", "--set", "train.batch=4"];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY.iter().copied()).collect()
}

#[test]
fn full_pipeline_on_tiny_preset() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &with_tiny(&["--seed", "3", "gen", "--out", "data/train.jsonl", "--num", "9"]));
    let lines = std::fs::read_to_string(p.join("data/train.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 9);
    let ckpt_before = |p: &Path| std::fs::read(p.join("run/checkpoint.bin")).unwrap();

    ok(p, &with_tiny(&["--seed", "3", "train", "--data", "data/train.jsonl", "--out", "run"]));
    let ckpt = ckpt_before(p);
    let csv = std::fs::read_to_string(p.join("run/loss.csv")).unwrap();
    assert!(csv.starts_with("step,loss,L_h,L_recon,L_kl\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);

    let eval_args = with_tiny(&[
        "--seed", "3", "eval", "--ckpt", "run/checkpoint.bin", "--data", "data/train.jsonl", "--samples", "4",
    ]);
    let out = ok(p, &eval_args);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["ade", "fde", "sim", "auc_j", "nss"] {
        assert!(v["metrics"][key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(v["metrics"]["k"], 4);
    assert!(v["static_baseline"]["ade"].as_f64().unwrap() > 0.0);
    assert_eq!(ok(p, &eval_args).stdout, out.stdout);

    ok(p, &with_tiny(&[
        "sweep", "--ckpt", "run/checkpoint.bin", "--data", "data/train.jsonl", "--alphas", "0,1", "--betas", "2",
        "--samples", "2", "--out", "sweep",
    ]));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(p.join("sweep/sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(p.join("sweep/sweep.csv")).unwrap();
    assert!(csv.starts_with("alpha,beta,ade,fde\n"));
    assert_eq!(csv.lines().count(), 3);

    ok(p, &with_tiny(&[
        "ablate", "--data", "data/train.jsonl", "--modes", "individual,biprogressive", "--samples", "2", "--out",
        "ablate.json",
    ]));
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(p.join("ablate.json")).unwrap()).unwrap();
    let modes: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["individual", "biprogressive"]);

    // Inputs are never rewritten.
    assert_eq!(std::fs::read_to_string(p.join("data/train.jsonl")).unwrap(), lines);
    assert_eq!(ckpt_before(p), ckpt);
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    for run in ["a", "b"] {
        let data = format!("{run}.jsonl");
        ok(p, &with_tiny(&["--seed", "11", "gen", "--out", &data, "--num", "6"]));
        ok(p, &with_tiny(&["--seed", "11", "train", "--data", &data, "--out", run]));
    }
    for f in ["a.jsonl", "a/checkpoint.bin", "a/loss.csv"] {
        let other = f.replacen('a', "b", 1);
        assert_eq!(std::fs::read(p.join(f)).unwrap(), std::fs::read(p.join(&other)).unwrap(), "{f}");
    }
}

#[test]
fn seed_falls_back_to_env() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let run = |env: Option<&str>, args: &[&str], out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_bot"));
        c.current_dir(p).env_remove("BOT_SEED").env("RUST_LOG", "warn");
        if let Some(s) = env {
            c.env("BOT_SEED", s);
        }
        let mut all: Vec<&str> = args.to_vec();
        all.extend(["gen", "--out", out, "--num", "3"]);
        all.extend(TINY);
        assert!(c.args(&all).status().unwrap().success());
        std::fs::read(p.join(out)).unwrap()
    };
    let env5 = run(Some("5"), &[], "env5.jsonl");
    let flag5 = run(None, &["--seed", "5"], "flag5.jsonl");
    let flag_wins = run(Some("9"), &["--seed", "5"], "flag_wins.jsonl");
    let default = run(None, &[], "default.jsonl");
    assert_eq!(env5, flag5);
    assert_eq!(flag_wins, flag5);
    assert_ne!(default, flag5);
}

#[test]
fn usage_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    for args in [
        vec!["frobnicate"],
        vec!["eval", "--ckpt", "missing.bin", "--data", "missing.jsonl"],
        vec!["--set", "train.nope=1", "gen", "--out", "x.jsonl"],
        vec!["--set", "model.joint_mode=sideways", "gen", "--out", "x.jsonl"],
        vec!["ablate", "--data", "x.jsonl", "--modes", "sideways"],
        vec!["--threads", "0", "gen", "--out", "x.jsonl"],
    ] {
        let out = bot(p, &args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_bot"))
        .current_dir(p)
        .env("BOT_SEED", "nope")
        .args(["gen", "--out", "x.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(bot(p, &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    std::fs::write(p.join("bad.jsonl"), "{not json}\n").unwrap();
    let out = bot(p, &with_tiny(&["train", "--data", "bad.jsonl", "--out", "run"]));
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(p.join("junk.bin"), [1u8, 2, 3]).unwrap();
    ok(p, &with_tiny(&["gen", "--out", "d.jsonl", "--num", "3"]));
    let out = bot(p, &with_tiny(&["eval", "--ckpt", "junk.bin", "--data", "d.jsonl"]));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));

    // Data generated for the desk preset does not fit a tiny checkpoint.
    ok(p, &with_tiny(&["train", "--data", "d.jsonl", "--out", "run"]));
    ok(p, &["gen", "--out", "desk.jsonl", "--num", "3"]);
    let out = bot(p, &["eval", "--ckpt", "run/checkpoint.bin", "--data", "desk.jsonl", "--samples", "1"]);
    assert_eq!(out.status.code(), Some(2));
}
