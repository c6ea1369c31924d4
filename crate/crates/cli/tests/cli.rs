use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn m2m(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2m"))
        .args(args)
        .current_dir(dir)
        .env_remove("M2M_SEED")
        .output()
        .expect("binary runs")
}

fn m2m_env(args: &[&str], dir: &Path, seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2m"))
        .args(args)
        .current_dir(dir)
        .env("M2M_SEED", seed)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

fn simulate_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{out}.json"));
    write_json(
        &path,
        &json!({
            "out_dir": out,
            "data": {"systems": [{"system": "kuramoto", "d": 2, "n_particles": 24, "n_timepoints": 4, "seed": 1}], "repeat": 3}
        }),
    );
    path
}

fn train_config(dir: &Path, manifest: &str, loss: &str, iterations: usize, lr: f64) -> std::path::PathBuf {
    let path = dir.join(format!("train_{loss}_{iterations}.json"));
    write_json(
        &path,
        &json!({
            "out_dir": "run",
            "seed": 4,
            "data": {"manifest": manifest},
            "model": {"hidden_dim": 8, "num_layers": 1, "num_heads": 2, "fourier_frequencies": 4, "time_embed_dim": 8},
            "train": {"loss_kind": loss, "lr": lr, "iterations": iterations, "measure_batch": 2,
                      "particle_batch": 8, "eval_every": 5, "eval_steps": 3, "holdout_fraction": 0.2}
        }),
    );
    path
}

fn losses(history: &Path) -> Vec<f64> {
    fs::read_to_string(history)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["type"] == "step")
        .map(|v| v["loss"].as_f64().unwrap())
        .collect()
}

#[test]
fn help_documents_every_command_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let top = String::from_utf8(m2m(&["--help"], dir.path()).stdout).unwrap();
    for cmd in ["simulate", "corrupt", "train", "predict", "eval", "gradcheck"] {
        assert!(top.contains(cmd), "{cmd} missing from help");
    }
    let train = String::from_utf8(m2m(&["train", "--help"], dir.path()).stdout).unwrap();
    for flag in ["--config", "--seed", "--out-dir", "--resume", "M2M_SEED"] {
        assert!(train.contains(flag), "{flag} missing from train help");
    }
    let predict = String::from_utf8(m2m(&["predict", "--help"], dir.path()).stdout).unwrap();
    assert!(predict.contains("--steps") && predict.contains("100"));
    let gc = String::from_utf8(m2m(&["gradcheck", "--help"], dir.path()).stdout).unwrap();
    assert!(gc.contains("--corrupt-backward"));
}

#[test]
fn simulate_is_deterministic_and_seed_precedence_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = simulate_config(dir.path(), "a");
    let cfg_b = simulate_config(dir.path(), "b");
    assert!(m2m(&["simulate", "-c", cfg.to_str().unwrap()], dir.path()).status.success());
    assert!(m2m(&["simulate", "-c", cfg_b.to_str().unwrap()], dir.path()).status.success());
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "sys002_t003.m2m"), read("b", "sys002_t003.m2m"));

    // The env seed replaces the per-system seed; the flag beats the env.
    let env = m2m_env(&["simulate", "-c", cfg.to_str().unwrap(), "--out-dir", "env"], dir.path(), "9");
    assert!(env.status.success(), "{}", stderr(&env));
    let flag = m2m_env(
        &["simulate", "-c", cfg.to_str().unwrap(), "--out-dir", "flag", "--seed", "9"],
        dir.path(),
        "123",
    );
    assert!(flag.status.success());
    assert_ne!(read("a", "sys000_t001.m2m"), read("env", "sys000_t001.m2m"));
    assert_eq!(read("env", "sys000_t001.m2m"), read("flag", "sys000_t001.m2m"));
    let frozen: Value = serde_json::from_slice(&read("flag", "config.json")).unwrap();
    assert_eq!(frozen["seed"], 9);
    assert_eq!(frozen["data"]["systems"].as_array().unwrap().len(), 3);
    assert_eq!(frozen["data"]["systems"][0]["seed"], 9);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    write_json(&bad, &json!({"out_dir": "x", "data": {"systems": [{"system": "lorenz", "d": 2}]}}));
    let out = m2m(&["simulate", "-c", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.systems[0].system"), "{}", stderr(&out));

    assert!(m2m(&["simulate", "-c", simulate_config(dir.path(), "d").to_str().unwrap()], dir.path())
        .status
        .success());
    let cfg = dir.path().join("nolr.json");
    write_json(
        &cfg,
        &json!({"out_dir": "run", "data": {"manifest": "d/dataset.json"}, "model": {},
                "train": {"loss_kind": "tfm", "iterations": 3}}),
    );
    let out = m2m(&["train", "-c", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.lr"), "{}", stderr(&out));

    let out = m2m_env(&["simulate", "-c", bad.to_str().unwrap()], dir.path(), "abc");
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("M2M_SEED"));
}

#[test]
fn train_resume_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), "data");
    assert!(m2m(&["simulate", "-c", sim.to_str().unwrap()], dir.path()).status.success());

    let full = train_config(dir.path(), "data/dataset.json", "tfm", 10, 1e-3);
    let out = m2m(&["train", "-c", full.to_str().unwrap(), "--out-dir", "full"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["step"], 10);
    assert!(summary["heldout"]["w1"].as_f64().unwrap().is_finite());
    for f in ["model.ckpt", "history.jsonl", "config.json"] {
        assert!(dir.path().join("full").join(f).exists(), "{f}");
    }

    let half = train_config(dir.path(), "data/dataset.json", "tfm", 5, 1e-3);
    assert!(m2m(&["train", "-c", half.to_str().unwrap(), "--out-dir", "split"], dir.path()).status.success());
    let out = m2m(&["train", "-c", full.to_str().unwrap(), "--out-dir", "split", "--resume"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let a = losses(&dir.path().join("full/history.jsonl"));
    let b = losses(&dir.path().join("split/history.jsonl"));
    assert_eq!(a.len(), 10);
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("full/model.ckpt")).unwrap(),
        fs::read(dir.path().join("split/model.ckpt")).unwrap()
    );

    let out = m2m(
        &["predict", "--checkpoint", "full/model.ckpt", "--input", "data/sys000_t000.m2m", "--output", "p.m2m", "--steps", "4"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let out = m2m(&["eval", "--pred", "p.m2m", "--target", "data/sys000_t001.m2m"], dir.path());
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["w1", "w2", "ed", "mmd_avg", "mmd", "r2"] {
        assert!(report.get(key).is_some(), "{key}");
    }
    let out = m2m(&["eval", "--checkpoint", "full/model.ckpt", "--manifest", "data/dataset.json", "--steps", "2"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn static_predict_ignores_steps_with_a_warning() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), "data");
    assert!(m2m(&["simulate", "-c", sim.to_str().unwrap()], dir.path()).status.success());
    let cfg = train_config(dir.path(), "data/dataset.json", "ed", 2, 1e-3);
    let out = m2m(&["train", "-c", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let run = |steps: &str, name: &str| {
        m2m(
            &["predict", "--checkpoint", "run/model.ckpt", "--input", "data/sys000_t000.m2m", "--output", name, "--steps", steps],
            dir.path(),
        )
    };
    let a = run("1", "a.m2m");
    let b = run("50", "b.m2m");
    assert!(a.status.success() && b.status.success());
    assert!(stderr(&a).contains("warning"));
    assert_eq!(fs::read(dir.path().join("a.m2m")).unwrap(), fs::read(dir.path().join("b.m2m")).unwrap());
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), "data");
    assert!(m2m(&["simulate", "-c", sim.to_str().unwrap()], dir.path()).status.success());
    let cfg = train_config(dir.path(), "data/dataset.json", "tfm", 20, 1e12);
    let out = m2m(&["train", "-c", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let msg = stderr(&out);
    assert!(msg.contains("step") && msg.contains("lr") && msg.contains("tfm"), "{msg}");
}

#[test]
fn gradcheck_passes_and_negative_control_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = m2m(&["gradcheck"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max relative error"));
    assert!(text.contains("blocks.0.attn.query.weight") && text.contains("cond.constant"));

    let out = m2m(&["gradcheck", "--corrupt-backward"], dir.path());
    assert_eq!(out.status.code(), Some(4));
    assert!(stderr(&out).contains("worst parameter"));
}

#[test]
fn corrupt_writes_a_paired_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate_config(dir.path(), "data");
    assert!(m2m(&["simulate", "-c", sim.to_str().unwrap()], dir.path()).status.success());
    let cfg = dir.path().join("corrupt.json");
    write_json(
        &cfg,
        &json!({"out_dir": "noisy", "seed": 2,
                "data": {"targets": ["data/sys000_t003.m2m", "data/sys001_t003.m2m"]},
                "corruption": {"process": "diffusion", "noise_scale": 0.5, "steps": 10}}),
    );
    let out = m2m(&["corrupt", "-c", cfg.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("noisy/dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["pairs"].as_array().unwrap().len(), 2);
    assert_eq!(
        fs::read(dir.path().join("noisy/clean_000.m2m")).unwrap(),
        fs::read(dir.path().join("data/sys000_t003.m2m")).unwrap()
    );
    assert_ne!(
        fs::read(dir.path().join("noisy/corrupted_000.m2m")).unwrap(),
        fs::read(dir.path().join("noisy/clean_000.m2m")).unwrap()
    );
}
