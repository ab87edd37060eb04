use std::path::Path;
use std::process::{Command, Output};

fn tabflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabflow"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tabflow(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const DATA: [&str; 4] = ["--data", "d/coupled-cats.csv", "--schema", "d/coupled-cats.schema.json"];
const SMALL: [&str; 8] = ["--epochs", "8", "--batch-size", "64", "--hidden", "16", "--time-embed-dim", "4"];

fn with(head: &[&'static str], tails: &[&[&'static str]]) -> Vec<&'static str> {
    let mut v = head.to_vec();
    for t in tails {
        v.extend_from_slice(t);
    }
    v
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "2", "--out-dir", "d", "toy-data", "--kind", "coupled-cats", "-n", "300"]);
    dir
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn toy_data_is_seeded() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &["--seed", "2", "--out-dir", "again", "toy-data", "--kind", "coupled-cats", "-n", "300"]);
    ok(p, &["--seed", "3", "--out-dir", "other", "toy-data", "--kind", "coupled-cats", "-n", "300"]);
    let read = |d: &str| std::fs::read(p.join(d).join("coupled-cats.csv")).unwrap();
    assert_eq!(read("d"), read("again"));
    assert_ne!(read("d"), read("other"));
    let meta = json(&p.join("d/coupled-cats.meta.json"));
    assert_eq!(meta["stamp"]["seed"], 2);
    assert_eq!(meta["rows"], 300);
    assert!(p.join("d/coupled-cats.eval.json").exists());
    ok(p, &["--out-dir", "m", "toy-data", "--kind", "mixture2d", "-n", "10"]);
    assert!(!p.join("m/mixture2d.eval.json").exists());
}

#[test]
fn fit_synth_eval_pipeline() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &with(&["--seed", "5", "--out-dir", "m", "fit"], &[&DATA, &SMALL]));
    let log = std::fs::read_to_string(p.join("m/loss.csv")).unwrap();
    assert!(log.starts_with("epoch,loss\n"));
    assert_eq!(log.lines().count(), 9);
    let meta = json(&p.join("m/fit.meta.json"));
    assert_eq!(meta["stamp"]["seed"], 5);
    assert_eq!(meta["config"]["training"]["epochs"], 8);

    ok(p, &["--seed", "5", "--out-dir", "s", "synth", "--checkpoint", "m/model.json", "-n", "50", "--steps", "12"]);
    let csv = std::fs::read_to_string(p.join("s/synth.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
    let meta = json(&p.join("s/synth.meta.json"));
    assert_eq!(meta["nfe"], 12);
    assert_eq!(meta["sampler"]["seed"], 5);

    let out = ok(
        p,
        &with(&["--out-dir", "e", "eval", "--synth", "s/synth.csv", "--spec", "d/coupled-cats.eval.json"], &[&DATA]),
    );
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("utility "));
    let report = json(&p.join("e/report.json"));
    let u = report["report"]["utility"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&u));
    assert!(std::fs::read_to_string(p.join("e/report.md")).unwrap().contains("| Model | Utility | Risk |"));
}

#[test]
fn latent_model_finds_its_vae() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &with(&["--out-dir", "m", "fit", "--model", "tabsynflow", "--latent-dim", "3"], &[&DATA, &SMALL]));
    for f in ["vae.json", "flow.json", "loss.csv", "vae_loss.csv"] {
        assert!(p.join("m").join(f).exists(), "{f}");
    }
    ok(p, &["--out-dir", "s", "synth", "--checkpoint", "m/flow.json", "-n", "20", "--steps", "5"]);
    std::fs::rename(p.join("m/vae.json"), p.join("vae_elsewhere.json")).unwrap();
    let out = tabflow(p, &["--out-dir", "s", "synth", "--checkpoint", "m/flow.json", "-n", "20"]);
    assert_eq!(code(&out), 1);
    ok(p, &["--out-dir", "s", "synth", "--checkpoint", "m/flow.json", "--vae", "vae_elsewhere.json", "-n", "20", "--steps", "5"]);
    let out = tabflow(p, &["--out-dir", "s", "synth", "--checkpoint", "vae_elsewhere.json", "-n", "20"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = prepared();
    let p = dir.path();
    let cfg = r#"{
        "seed": 9,
        "training": {"epochs": 3, "batch_size": 64},
        "network": {"hidden": [8], "time_embed_dim": 4},
        "io": {"data": "d/coupled-cats.csv", "schema": "d/coupled-cats.schema.json"}
    }"#;
    std::fs::write(p.join("run.json"), cfg).unwrap();
    ok(p, &["--config", "run.json", "--out-dir", "a", "fit"]);
    let meta = json(&p.join("a/fit.meta.json"));
    assert_eq!(meta["stamp"]["seed"], 9);
    assert_eq!(meta["training"]["flow"]["epochs"], 3);
    ok(p, &["--config", "run.json", "--seed", "4", "--out-dir", "b", "fit", "--epochs", "2"]);
    let meta = json(&p.join("b/fit.meta.json"));
    assert_eq!(meta["stamp"]["seed"], 4);
    assert_eq!(meta["config"]["sampler"]["seed"], 4);
    assert_eq!(meta["training"]["flow"]["epochs"], 2);
    assert_ne!(
        json(&p.join("a/fit.meta.json"))["stamp"]["config_hash"],
        meta["stamp"]["config_hash"]
    );
}

#[test]
fn bench_nfe_accounting_and_outputs() {
    let dir = prepared();
    let p = dir.path();
    ok(p, &with(&["--out-dir", "m", "fit"], &[&DATA, &SMALL]));
    let bench = |sweep: &'static str, grid: &'static str, out: &'static str| {
        ok(
            p,
            &with(
                &[
                    "--out-dir", out, "bench", "--sweep", sweep, "--grid", grid, "--replicates", "2",
                    "--checkpoint", "m/model.json", "--spec", "d/coupled-cats.eval.json", "--steps", "10",
                ],
                &[&DATA],
            ),
        );
    };
    bench("nfe", "3,9", "nfe");
    let sweep = std::fs::read_to_string(p.join("nfe/sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = sweep.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[1], r[4], "grid NFE must equal counted NFE");
    }
    assert_ne!(rows[0][3], rows[1][3], "replicates use distinct sampler seeds");
    let summary = std::fs::read_to_string(p.join("nfe/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(p.join("nfe/timing.csv").exists());

    bench("t_end", "0.5,1", "tend");
    let sweep = std::fs::read_to_string(p.join("tend/sweep.csv")).unwrap();
    let nfes: Vec<&str> = sweep.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(nfes, ["5", "10", "5", "10"]);

    bench("g", "ot,vp", "g");
    bench("dynamics", "ode,sde", "dyn");
    assert_eq!(std::fs::read_to_string(p.join("dyn/sweep.csv")).unwrap().lines().count(), 5);
}

#[test]
fn exit_codes() {
    let dir = prepared();
    let p = dir.path();
    assert_eq!(code(&tabflow(p, &["--help"])), 0);
    assert_eq!(code(&tabflow(p, &["frobnicate"])), 1);
    assert_eq!(code(&tabflow(p, &["synth", "--checkpoint", "x.json"])), 1, "missing -n");
    assert_eq!(code(&tabflow(p, &["fit", "--data", "d/coupled-cats.csv"])), 1, "missing schema");
    assert_eq!(code(&tabflow(p, &["fit", "--data", "nope.csv", "--schema", "d/coupled-cats.schema.json"])), 1);
    assert_eq!(code(&tabflow(p, &with(&["fit", "--path", "zigzag"], &[&DATA]))), 1);
    assert_eq!(code(&tabflow(p, &with(&["fit", "--epochs", "0"], &[&DATA]))), 1);
    assert_eq!(code(&tabflow(p, &["synth", "--checkpoint", "d/coupled-cats.csv", "-n", "3"])), 1);
    assert_eq!(code(&tabflow(p, &["bench", "--sweep", "bogus"])), 1);
    std::fs::write(p.join("bad.json"), r#"{"epochs": 3}"#).unwrap();
    assert_eq!(code(&tabflow(p, &["--config", "bad.json", "toy-data", "--kind", "composite"])), 1);
    // An output directory that cannot be created is a runtime failure.
    std::fs::write(p.join("blocker"), "").unwrap();
    let out = tabflow(p, &["--out-dir", "blocker/sub", "toy-data", "--kind", "composite", "-n", "5"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}
