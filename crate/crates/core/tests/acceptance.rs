//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL/SKIP line each; exits non-zero if any criterion fails.
//!
//! Set `TABFLOW_ADULT_CSV` to a headed Adult CSV to enable the public-data check.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng;
use tabflow::commands::train_model;
use tabflow::config::{ModelKind, RunConfig};
use tabflow::eval::{evaluate, tcap_risk, CioTarget, EvalReport, EvalSpec, RegressorKind, WeapMode};
use tabflow::sampler::{sample_ode, sample_sde, Dynamics, GSpec, SampleRun, VectorField};
use tabflow::tabular::{Cell, Column, DataTable, TableSchema};
use tabflow::toy::{self, ToyKind};
use tabflow::vfm::{ExactPosterior, VarianceMode};
use tabflow::Schedule;

use common::*;

struct Outcome {
    id: &'static str,
    status: &'static str,
}

#[derive(Default)]
struct Suite {
    results: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: &'static str, name: &str, pass: Option<bool>, detail: String) {
        let status = match pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        println!("criterion {id:>2} [{status}] {name}: {detail}");
        self.results.push(Outcome { id, status });
    }
}

fn secs(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

// Schedules

fn vp_explicit_velocity(x_t: &Array1<f64>, x1: &Array1<f64>, t: f64) -> Array1<f64> {
    let (b0, b1) = (0.1, 20.0);
    let s = 1.0 - t;
    let big_t = b0 * s + 0.5 * s * s * (b1 - b0);
    let beta = b0 + s * (b1 - b0);
    let alpha = (-0.5 * big_t).exp();
    let dalpha = 0.5 * beta * alpha;
    (x1 - &(x_t * alpha)) * (dalpha / (1.0 - alpha * alpha))
}

fn ot_explicit_velocity(x_t: &Array1<f64>, x1: &Array1<f64>, t: f64, sigma_min: f64) -> Array1<f64> {
    (x1 - &(x_t * (1.0 - sigma_min))) / (1.0 - (1.0 - sigma_min) * t)
}

fn criterion_1(suite: &mut Suite) {
    let start = Instant::now();
    let mut worst_fd: f64 = 0.0;
    for s in Schedule::all_defaults() {
        for i in 1..=99 {
            let t = i as f64 / 100.0;
            let h = 1e-6;
            let p = s.eval(t).unwrap();
            let (up, down) = (s.eval(t + h).unwrap(), s.eval(t - h).unwrap());
            let fd_a = (up.alpha - down.alpha) / (2.0 * h);
            let fd_s = (up.sigma - down.sigma) / (2.0 * h);
            for (an, fd) in [(p.dalpha, fd_a), (p.dsigma, fd_s)] {
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
                let rel = if an == 0.0 && fd == 0.0 { 0.0 } else { rel };
                worst_fd = worst_fd.max(rel);
            }
        }
    }
    let mut worst_u: f64 = 0.0;
    let mut r = rng(11);
    let ot = Schedule::ot();
    let vp = Schedule::vp();
    for _ in 0..200 {
        let x_t = Array1::from_shape_simple_fn(3, || r.random_range(-3.0..3.0));
        let x1 = Array1::from_shape_simple_fn(3, || r.random_range(-3.0..3.0));
        let t = r.random_range(0.0..0.99);
        let got = ot.cond_velocity(x_t.view(), x1.view(), t).unwrap();
        let want = ot_explicit_velocity(&x_t, &x1, t, ot.sigma_min());
        worst_u = worst_u.max((&got - &want).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
        let got = vp.cond_velocity(x_t.view(), x1.view(), t).unwrap();
        let want = vp_explicit_velocity(&x_t, &x1, t);
        worst_u = worst_u.max((&got - &want).iter().fold(0.0, |m: f64, v| m.max(v.abs())));
    }
    let elapsed = secs(start);
    let pass = worst_fd <= 1e-5 && worst_u <= 1e-9 && elapsed < 5.0;
    suite.record(
        "1",
        "schedule correctness",
        Some(pass),
        format!("max rel FD err {worst_fd:.2e} (≤1e-5), max OT/VP velocity err {worst_u:.2e} (≤1e-9), {elapsed:.2}s (<5s)"),
    );
}

fn criterion_2(suite: &mut Suite) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let layout = small_layout();
    for (k, schedule) in [Schedule::ot(), Schedule::vp()].into_iter().enumerate() {
        let mut r = rng(20 + k as u64);
        let data = encoded_rows(&layout, 16, &mut r);
        let field = ExactPosterior {
            dataset: data.clone(),
            schedule,
        };
        for _ in 0..100 {
            let t = r.random_range(0.0..0.99);
            let x_t = uniform((1, layout.total_dim()), -2.0, 2.0, &mut r);
            let v = field.evaluate(x_t.view(), t, false).unwrap().velocity;
            let oracle = schedule.marginal_velocity_oracle(data.view(), x_t.row(0), t).unwrap();
            let err = v.row(0).iter().zip(&oracle).fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
            worst = worst.max(err);
        }
    }
    let elapsed = secs(start);
    suite.record(
        "2",
        "velocity-oracle equivalence",
        Some(worst <= 1e-10 && elapsed < 10.0),
        format!("max |Δv| {worst:.2e} over 200 pairs (≤1e-10), {elapsed:.2}s (<10s)"),
    );
}

fn criterion_3(suite: &mut Suite) {
    let mut worst_vfm: f64 = 0.0;
    for (i, s) in Schedule::all_defaults().into_iter().enumerate() {
        for mode in [VarianceMode::Relaxed, VarianceMode::Theoretical] {
            worst_vfm = worst_vfm.max(tabbyflow_grad_error(mode, s, 30 + i as u64));
        }
    }
    let mut worst_cfm: f64 = 0.0;
    for (i, s) in Schedule::all_defaults().into_iter().enumerate() {
        worst_cfm = worst_cfm.max(cfm_grad_error(s, 40 + i as u64));
    }
    suite.record(
        "3",
        "gradient integrity",
        Some(worst_vfm <= 1e-4 && worst_cfm <= 1e-4),
        format!("TabbyFlow rel err {worst_vfm:.2e}, CFM rel err {worst_cfm:.2e} (≤1e-4, widths ≤32)"),
    );
}

// Trained toy models

fn toy_config(epochs: usize, mode: VarianceMode) -> RunConfig {
    let mut c = RunConfig {
        model: ModelKind::Tabbyflow,
        path: Schedule::ot(),
        seed: 7,
        ..RunConfig::default()
    };
    c.training.epochs = epochs;
    c.training.batch_size = 1024;
    c.training.variance_mode = mode;
    c.network.hidden = vec![64, 128, 128, 64];
    c.network.time_embed_dim = 32;
    c.sampler = SampleRun {
        steps: 100,
        seed: 101,
        ..SampleRun::default()
    };
    c
}

fn criterion_4(suite: &mut Suite, field: &dyn VectorField, decode: &dyn Fn(Array2<f64>) -> DataTable) {
    let n = 10_000;
    let ode = SampleRun {
        steps: 100,
        seed: 5,
        ..SampleRun::default()
    };
    let sde_zero = SampleRun {
        dynamics: Dynamics::Sde,
        g: GSpec::Zero,
        ..ode.clone()
    };
    let sde_sigma = SampleRun {
        dynamics: Dynamics::Sde,
        g: GSpec::SigmaOfModel,
        ..ode.clone()
    };
    let a = sample_ode(field, n, &ode).unwrap();
    let b = sample_sde(field, n, &sde_zero).unwrap();
    let bitwise = a.values.iter().zip(b.values.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    let c = sample_sde(field, n, &sde_sigma).unwrap();
    let tv = max_marginal_tv(&decode(a.values), &decode(c.values));
    suite.record(
        "4",
        "ODE/SDE consistency",
        Some(bitwise && tv <= 0.05),
        format!("g≡0 bitwise equal: {bitwise}; g=σ_t max per-column TV {tv:.4} (≤0.05) at n=10⁴"),
    );
}

fn criterion_5_to_6(suite: &mut Suite) {
    let start = Instant::now();
    let orig = toy::generate(ToyKind::CoupledCats, 10_000, 1).unwrap();
    let spec = toy::eval_spec(ToyKind::CoupledCats).unwrap();
    let cfg = toy_config(500, VarianceMode::Relaxed);
    let fitted = train_model(&cfg, &orig, cfg.path).unwrap();
    let g = &fitted.generator;
    let (synth, nfe) = g.synthesize(orig.n_rows(), &cfg.sampler, cfg.chunk_rows).unwrap();
    let report = evaluate(&orig, &synth, &spec).unwrap();
    let elapsed = secs(start);
    suite.record(
        "5",
        "toy-data end-to-end",
        Some(report.roc_uni >= 0.95 && report.roc_biv >= 0.90 && elapsed <= 600.0 && nfe == 100),
        format!(
            "roc_uni {:.4} (≥0.95), roc_biv {:.4} (≥0.90), NFE {nfe}, {elapsed:.1}s (≤600s)",
            report.roc_uni, report.roc_biv
        ),
    );

    let codec = g.codec().clone();
    let decode = move |x: Array2<f64>| codec.decode(&codec.batch(x).unwrap()).unwrap();
    criterion_4(suite, g.field(), &decode);

    let at = |steps: usize| -> EvalReport {
        let run = SampleRun { steps, ..cfg.sampler.clone() };
        let (t, _) = g.synthesize(orig.n_rows(), &run, cfg.chunk_rows).unwrap();
        evaluate(&orig, &t, &spec).unwrap()
    };
    let (u128, u1024) = (at(128).utility, at(1024).utility);
    let gap = (u128 - u1024).abs();
    suite.record(
        "6",
        "NFE plateau",
        Some(gap <= 0.02),
        format!("utility NFE=128 {u128:.4}, NFE=1024 {u1024:.4}, gap {gap:.4} (≤0.02)"),
    );
}

fn criterion_7(suite: &mut Suite) {
    let orig = toy::generate(ToyKind::Composite, 10_000, 2).unwrap();
    let spec = toy::eval_spec(ToyKind::Composite).unwrap();
    let utility = |mode| {
        let cfg = toy_config(300, mode);
        let g = train_model(&cfg, &orig, cfg.path).unwrap().generator;
        let (synth, _) = g.synthesize(orig.n_rows(), &cfg.sampler, cfg.chunk_rows).unwrap();
        evaluate(&orig, &synth, &spec).unwrap()
    };
    let relaxed = utility(VarianceMode::Relaxed);
    let theoretical = utility(VarianceMode::Theoretical);
    suite.record(
        "7",
        "variance-mode direction",
        Some(relaxed.utility >= theoretical.utility),
        format!(
            "relaxed utility {:.4} (risk {:.4}) vs theoretical {:.4} (risk {:.4})",
            relaxed.utility, relaxed.risk, theoretical.utility, theoretical.risk
        ),
    );
}

// Metric oracles

fn keyed_table(n: usize, seed: u64, target: impl Fn(u32, u32, &mut common::Rand) -> u32) -> DataTable {
    let schema = TableSchema::new(vec![
        Column::categorical("k1", ["a", "b", "c", "d"]),
        Column::categorical("k2", ["p", "q", "r", "s", "u"]),
        Column::categorical("t", ["x", "y", "z"]),
    ])
    .unwrap();
    let mut r = rng(seed);
    let rows: Vec<Vec<Cell>> = (0..n)
        .map(|_| {
            let (a, b) = (r.random_range(0..4), r.random_range(0..5));
            let t = target(a, b, &mut r);
            vec![Cell::Cat(a), Cell::Cat(b), Cell::Cat(t)]
        })
        .collect();
    DataTable::from_rows(schema, &rows).unwrap()
}

fn criterion_8(suite: &mut Suite) {
    let mut exact = true;
    let mut identities = Vec::new();
    for kind in [ToyKind::CoupledCats, ToyKind::Composite, ToyKind::AdultLike] {
        let t = toy::generate(kind, 5_000, 3).unwrap();
        let u = evaluate(&t, &t, &toy::eval_spec(kind).unwrap()).unwrap().utility;
        exact &= u == 1.0;
        identities.push(format!("{kind} {u}"));
    }

    let keys = vec!["k1".to_string(), "k2".to_string()];
    let n = 10_000;
    let det = |a: u32, b: u32, _: &mut common::Rand| (a + b) % 3;
    let orig = keyed_table(n, 1, det);
    let synth = keyed_table(n, 2, det);
    let high = tcap_risk(&orig, &synth, &keys, "t", 1.0, WeapMode::Marginal, 5).unwrap().risk;

    let noise = |_: u32, _: u32, r: &mut common::Rand| r.random_range(0..3);
    let orig = keyed_table(n, 3, noise);
    let synth = keyed_table(n, 4, noise);
    let low_strict = tcap_risk(&orig, &synth, &keys, "t", 1.0, WeapMode::Marginal, 5).unwrap();
    let low_loose = tcap_risk(&orig, &synth, &keys, "t", 0.3, WeapMode::Marginal, 5).unwrap();
    let low = low_strict.risk.max(low_loose.risk);
    suite.record(
        "8",
        "metric oracles",
        Some(exact && high >= 0.9 && low <= 0.05),
        format!(
            "eval(orig, orig) utility [{}]; deterministic-target risk {high:.4} (≥0.9); key-independent risk {:.4} at τ=1 ({} retained), {:.4} at τ=0.3 ({} retained) (≤0.05)",
            identities.join(", "),
            low_strict.risk,
            low_strict.retained,
            low_loose.risk,
            low_loose.retained
        ),
    );
}

// Public data

fn infer_table(path: &Path) -> DataTable {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let records: Vec<Vec<String>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect::<Vec<_>>())
        .filter(|r: &Vec<String>| r.len() == header.len() && r.iter().all(|v| !v.is_empty() && v != "?"))
        .collect();
    let columns: Vec<Column> = header
        .iter()
        .enumerate()
        .map(|(c, name)| {
            if records.iter().all(|r| r[c].parse::<f64>().is_ok()) {
                Column::numeric(name)
            } else {
                let levels: BTreeSet<&str> = records.iter().map(|r| r[c].trim_end_matches('.')).collect();
                Column::categorical(name, levels)
            }
        })
        .collect();
    let schema = TableSchema::new(columns).unwrap();
    let mut text = header.join(",");
    text.push('\n');
    for r in &records {
        text.push_str(&r.iter().map(|v| v.trim_end_matches('.')).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    DataTable::read_csv(text.as_bytes(), &schema).unwrap()
}

fn adult_spec(table: &DataTable) -> EvalSpec {
    let s = |v: &[&str]| {
        v.iter()
            .filter(|c| table.schema().index_of(c).is_some())
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
    };
    let keys = s(&[
        "workclass",
        "education",
        "marital-status",
        "occupation",
        "relationship",
        "race",
        "sex",
        "native-country",
        "income",
    ]);
    let explanatory = s(&[
        "workclass",
        "education-num",
        "marital-status",
        "occupation",
        "relationship",
        "race",
        "sex",
        "native-country",
        "income",
        "age",
        "fnlwgt",
        "capital-gain",
        "capital-loss",
        "hours-per-week",
    ]);
    let targets = s(&["income", "marital-status"]);
    EvalSpec {
        key_vars: keys,
        cio_targets: targets
            .iter()
            .map(|t| CioTarget {
                target: t.clone(),
                kind: RegressorKind::Logistic,
                explanatory: explanatory.iter().filter(|e| *e != t).cloned().collect(),
            })
            .collect(),
        tau: 1.0,
        tcap_targets: targets,
        tcap_keys: None,
        weap: WeapMode::Marginal,
        tcap_bins: 5,
    }
}

fn criterion_9(suite: &mut Suite) {
    let Ok(path) = std::env::var("TABFLOW_ADULT_CSV") else {
        suite.record(
            "9",
            "public-data spot check",
            None,
            "TABFLOW_ADULT_CSV not set; no network access to fetch Adult".into(),
        );
        return;
    };
    let full = infer_table(Path::new(&path));
    let mut r = rng(9);
    let mut idx: Vec<usize> = (0..full.n_rows()).collect();
    for i in (1..idx.len()).rev() {
        idx.swap(i, r.random_range(0..=i));
    }
    idx.truncate(5_000);
    idx.sort_unstable();
    let orig = full.select_rows(&idx);
    let spec = adult_spec(&orig);
    let cfg = toy_config(300, VarianceMode::Relaxed);
    let g = train_model(&cfg, &orig, cfg.path).unwrap().generator;
    let (synth, _) = g.synthesize(orig.n_rows(), &cfg.sampler, cfg.chunk_rows).unwrap();
    let report = evaluate(&orig, &synth, &spec).unwrap();
    suite.record(
        "9",
        "public-data spot check (desk profile)",
        Some(report.utility >= 0.60),
        format!(
            "5k-row subsample utility {:.4} (≥0.60), risk {:.4}; full-configuration targets not run",
            report.utility, report.risk
        ),
    );
}

// Reproducibility

fn run_cli(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_tabflow"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "tabflow {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path) {
    let net = ["--epochs", "15", "--batch-size", "128", "--hidden", "16,16", "--time-embed-dim", "8"];
    run_cli(dir, &["--seed", "4", "--out-dir", "data", "toy-data", "--kind", "composite", "-n", "400"]);
    let data = ["--data", "data/composite.csv", "--schema", "data/composite.schema.json"];
    let mut fit: Vec<&str> = vec!["--seed", "4", "--out-dir", "vfm", "fit"];
    fit.extend(data);
    fit.extend(net);
    run_cli(dir, &fit);
    let mut fit_latent: Vec<&str> = vec!["--seed", "4", "--out-dir", "latent", "fit", "--model", "tabsynflow", "--latent-dim", "4"];
    fit_latent.extend(data);
    fit_latent.extend(net);
    run_cli(dir, &fit_latent);
    run_cli(dir, &["--seed", "4", "--out-dir", "synth", "synth", "--checkpoint", "vfm/model.json", "-n", "400", "--steps", "20", "--dynamics", "sde"]);
    run_cli(dir, &["--seed", "4", "--out-dir", "synth_latent", "synth", "--checkpoint", "latent/flow.json", "-n", "400", "--steps", "20"]);
    let mut eval: Vec<&str> = vec!["--seed", "4", "--out-dir", "eval", "eval", "--synth", "synth/synth.csv", "--spec", "data/composite.eval.json"];
    eval.extend(data);
    run_cli(dir, &eval);
    let mut bench: Vec<&str> = vec![
        "--seed", "4", "--out-dir", "bench", "bench", "--sweep", "nfe", "--grid", "4,16", "--replicates", "2",
        "--checkpoint", "vfm/model.json", "--spec", "data/composite.eval.json",
    ];
    bench.extend(data);
    run_cli(dir, &bench);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in std::fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in std::fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let rel = f.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            // Wall-clock timings are the one intentionally non-reproducible artifact.
            if !rel.ends_with("timing.csv") {
                out.push((rel, std::fs::read(&f).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_10(suite: &mut Suite) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let stamped = ta
        .iter()
        .filter(|(n, _)| n.ends_with(".meta.json") || n.ends_with("report.json"))
        .all(|(_, bytes)| {
            let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
            v["stamp"]["config_hash"].is_string() && v["stamp"]["seed"].is_u64()
        });
    let pass = ta.len() == tb.len() && differing.is_empty() && stamped;
    suite.record(
        "10",
        "reproducibility",
        Some(pass),
        format!(
            "{} files over toy-data/fit/synth/eval/bench compared byte-for-byte, {} differ; hash+seed stamps present: {stamped}",
            names.len(),
            differing.len()
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; there is nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite::default();
    criterion_1(&mut suite);
    criterion_2(&mut suite);
    criterion_3(&mut suite);
    criterion_8(&mut suite);
    criterion_10(&mut suite);
    criterion_5_to_6(&mut suite);
    criterion_7(&mut suite);
    criterion_9(&mut suite);

    suite.results.sort_by_key(|o| o.id.parse::<u32>().unwrap());
    let failed: Vec<&str> = suite.results.iter().filter(|o| o.status == "FAIL").map(|o| o.id).collect();
    println!(
        "acceptance: {} criteria, {} failed {:?}",
        suite.results.len(),
        failed.len(),
        failed
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
