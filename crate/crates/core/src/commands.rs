//! The work behind each CLI subcommand. Every artifact is either a file whose
//! bytes depend only on the inputs, or a `*.meta.json` sidecar recording the
//! config hash and seed that produced it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{Checkpoint, Generator, Payload};
use crate::config::{ModelKind, RunConfig};
use crate::error::{ensure, Error, Result};
use crate::eval::{evaluate, EvalReport, EvalSpec};
use crate::latent::TabSynFlow;
use crate::paths::Schedule;
use crate::sampler::{Dynamics, GSpec, SampleRun};
use crate::tabular::{Codec, DataTable, TableSchema};
use crate::toy::{self, ToyKind};
use crate::train;
use crate::vfm::TabbyFlow;

/// Effective configuration plus the output directory.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let out_dir = out_dir.into();
        std::fs::create_dir_all(&out_dir)?;
        Ok(Context { config, out_dir })
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn stamp(&self) -> serde_json::Value {
        json!({ "config_hash": self.config.hash(), "seed": self.config.seed })
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Param(format!("missing {what} path")))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_schema(cfg: &RunConfig) -> Result<TableSchema> {
    TableSchema::from_json_file(require(&cfg.io.schema, "schema")?)
}

fn load_data(cfg: &RunConfig, schema: &TableSchema) -> Result<DataTable> {
    DataTable::load_csv(require(&cfg.io.data, "data")?, schema)
}

fn eval_spec(cfg: &RunConfig) -> Result<EvalSpec> {
    match (&cfg.io.eval_spec, &cfg.eval) {
        (Some(p), _) => EvalSpec::from_json_file(p),
        (None, Some(s)) => Ok(s.clone()),
        (None, None) => Err(Error::Param("missing eval spec (io.eval_spec or eval)".into())),
    }
}

/// A trained model and its training logs.
pub struct Fitted {
    pub generator: Generator,
    pub logs: Vec<(&'static str, train::TrainLog)>,
}

/// Trains the configured model on `table` under `schedule`.
pub fn train_model(cfg: &RunConfig, table: &DataTable, schedule: Schedule) -> Result<Fitted> {
    let codec = Codec::fit(table)?;
    let data = codec.encode(table)?.values;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    match cfg.model {
        ModelKind::Tabbyflow => {
            let train_cfg = cfg.training.train();
            let mut model = TabbyFlow::new(codec.layout(), schedule, cfg.tabbyflow(), train_cfg.adam(), &mut rng)?;
            let log = train::fit(&mut model, data.view(), &train_cfg, &mut rng)?;
            Ok(Fitted {
                generator: Generator::TabbyFlow { model, codec },
                logs: vec![("flow", log)],
            })
        }
        ModelKind::Tabsynflow => {
            let (model, logs) = TabSynFlow::fit(
                data.view(),
                codec.layout(),
                schedule,
                cfg.vae.clone(),
                &cfg.flow(),
                &cfg.vae_train(),
                &cfg.training.train(),
                &mut rng,
            )?;
            Ok(Fitted {
                generator: Generator::TabSynFlow { model, codec },
                logs: vec![("vae", logs.vae), ("flow", logs.flow)],
            })
        }
    }
}

/// Trains and writes checkpoint(s), loss log(s) and `fit.meta.json`.
pub fn fit(ctx: &Context) -> Result<Fitted> {
    let cfg = &ctx.config;
    let schema = load_schema(cfg)?;
    let table = load_data(cfg, &schema)?;
    let fitted = train_model(cfg, &table, cfg.path)?;
    let hash = cfg.hash();
    let mut files = Vec::new();
    match &fitted.generator {
        Generator::TabbyFlow { model, codec } => {
            Checkpoint::tabbyflow(model, codec, &hash, cfg.seed).save(ctx.out("model.json"))?;
            files.push("model.json");
        }
        Generator::TabSynFlow { model, codec } => {
            Checkpoint::vae(&model.vae, cfg.path, codec, &hash, cfg.seed).save(ctx.out("vae.json"))?;
            Checkpoint::latent_flow(&model.flow, codec, &hash, cfg.seed).save(ctx.out("flow.json"))?;
            files.extend(["vae.json", "flow.json"]);
        }
    }
    let mut logs = serde_json::Map::new();
    for (stage, log) in &fitted.logs {
        let name = if *stage == "flow" { "loss.csv".to_string() } else { format!("{stage}_loss.csv") };
        std::fs::write(ctx.out(&name), log.to_csv())?;
        logs.insert(
            stage.to_string(),
            json!({ "file": name, "epochs": log.epoch_losses.len(), "best_epoch": log.best_epoch + 1, "best_loss": log.best_loss }),
        );
    }
    write_json(
        &ctx.out("fit.meta.json"),
        &json!({
            "stamp": ctx.stamp(),
            "model": cfg.model,
            "schema_hash": schema.hash(),
            "rows": table.n_rows(),
            "checkpoints": files,
            "training": logs,
            "config": cfg,
        }),
    )?;
    log::info!("fit: wrote {} to {}", files.join(", "), ctx.out_dir.display());
    Ok(fitted)
}

/// Loads the generator named by `io.checkpoint` (and `io.vae_checkpoint`,
/// defaulting to `vae.json` next to a latent flow checkpoint).
pub fn load_generator(cfg: &RunConfig) -> Result<Generator> {
    let path = require(&cfg.io.checkpoint, "checkpoint")?;
    let main = Checkpoint::load(path)?;
    let vae = match main.payload {
        Payload::LatentFlow { .. } => {
            let vae_path = cfg
                .io
                .vae_checkpoint
                .clone()
                .unwrap_or_else(|| path.with_file_name("vae.json"));
            Some(Checkpoint::load(vae_path)?)
        }
        _ => None,
    };
    Generator::from_checkpoints(main, vae)
}

/// Writes `synth.csv` and `synth.meta.json`.
pub fn synth(ctx: &Context, n: usize) -> Result<DataTable> {
    let cfg = &ctx.config;
    let generator = load_generator(cfg)?;
    let run = &cfg.sampler;
    let (table, nfe) = generator.synthesize(n, run, cfg.chunk_rows)?;
    table.save_csv(ctx.out("synth.csv"))?;
    write_json(
        &ctx.out("synth.meta.json"),
        &json!({
            "stamp": ctx.stamp(),
            "rows": n,
            "nfe": nfe,
            "sampler": run,
            "schema_hash": generator.codec().schema_hash(),
            "checkpoint": cfg.io.checkpoint,
        }),
    )?;
    Ok(table)
}

/// Writes `report.json` and `report.md`.
pub fn eval(ctx: &Context) -> Result<EvalReport> {
    let cfg = &ctx.config;
    let schema = load_schema(cfg)?;
    let orig = load_data(cfg, &schema)?;
    let synth = DataTable::load_csv(require(&cfg.io.synth, "synthetic data")?, &schema)?;
    let spec = eval_spec(cfg)?;
    let report = evaluate(&orig, &synth, &spec)?;
    write_json(&ctx.out("report.json"), &json!({ "stamp": ctx.stamp(), "report": report }))?;
    let label = cfg
        .io
        .synth
        .as_ref()
        .and_then(|p| p.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "synthetic".into());
    std::fs::write(ctx.out("report.md"), report.to_markdown(&label))?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Nfe,
    TEnd,
    G,
    Paths,
    Dynamics,
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nfe" => Sweep::Nfe,
            "t_end" | "t-end" => Sweep::TEnd,
            "g" | "g_t" => Sweep::G,
            "paths" => Sweep::Paths,
            "dynamics" => Sweep::Dynamics,
            other => return Err(Error::Param(format!("unknown sweep '{other}' (expected nfe|t_end|g|paths|dynamics)"))),
        })
    }
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::Nfe => "nfe",
            Sweep::TEnd => "t_end",
            Sweep::G => "g",
            Sweep::Paths => "paths",
            Sweep::Dynamics => "dynamics",
        }
    }

    /// Default grid labels.
    pub fn default_grid(&self) -> Vec<String> {
        match self {
            Sweep::Nfe => (2..=10).map(|k| (1usize << k).to_string()).collect(),
            Sweep::TEnd => ["0.6", "0.7", "0.8", "0.9", "0.95", "0.975", "1"].map(String::from).to_vec(),
            Sweep::G | Sweep::Paths => Schedule::all_defaults().iter().map(|s| s.name().to_string()).collect(),
            Sweep::Dynamics => vec!["ode".into(), "sde".into()],
        }
    }
}

/// One replicate at one grid point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub value: String,
    pub replicate: usize,
    pub sampler_seed: u64,
    pub nfe: usize,
    pub report: EvalReport,
    pub seconds: f64,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn parse_grid<T: FromStr>(grid: &[String]) -> Result<Vec<T>> {
    grid.iter()
        .map(|g| g.parse::<T>().map_err(|_| Error::Param(format!("bad grid value '{g}'"))))
        .collect()
}

/// Runs a sweep and returns the rows written to `sweep.csv`.
pub fn bench(ctx: &Context, sweep: Sweep, grid: Option<Vec<String>>) -> Result<Vec<BenchRow>> {
    let cfg = &ctx.config;
    let schema = load_schema(cfg)?;
    let orig = load_data(cfg, &schema)?;
    let spec = eval_spec(cfg)?;
    spec.validate(&schema)?;
    let grid = grid.unwrap_or_else(|| sweep.default_grid());
    ensure!(!grid.is_empty(), Param, "empty sweep grid");
    let n = orig.n_rows();
    let k = cfg.replicates;
    let seed_of = |r: usize| cfg.sampler.seed.wrapping_add(r as u64);
    let mut rows = Vec::new();
    let mut push = |value: &str, r: usize, table: &DataTable, nfe: usize, seconds: f64| -> Result<()> {
        rows.push(BenchRow {
            value: value.to_string(),
            replicate: r,
            sampler_seed: seed_of(r),
            nfe,
            report: evaluate(&orig, table, &spec)?,
            seconds,
        });
        Ok(())
    };

    match sweep {
        Sweep::TEnd => {
            let generator = load_generator(cfg)?;
            let times: Vec<f64> = parse_grid(&grid)?;
            let base = SampleRun {
                t_end: 1.0,
                ..cfg.sampler.clone()
            };
            for r in 0..k {
                let run = SampleRun {
                    seed: seed_of(r),
                    ..base.clone()
                };
                let start = Instant::now();
                let tables = generator.sweep(n, &times, &run)?;
                let seconds = start.elapsed().as_secs_f64();
                for (label, (table, nfe)) in grid.iter().zip(&tables) {
                    push(label, r, table, *nfe, seconds)?;
                }
            }
        }
        Sweep::Paths => {
            let schedules = grid.iter().map(|g| Schedule::by_name(g)).collect::<Result<Vec<_>>>()?;
            for (label, schedule) in grid.iter().zip(schedules) {
                log::info!("bench: training under the {label} path");
                let generator = train_model(cfg, &orig, schedule)?.generator;
                for r in 0..k {
                    let run = SampleRun {
                        seed: seed_of(r),
                        ..cfg.sampler.clone()
                    };
                    let start = Instant::now();
                    let (table, nfe) = generator.synthesize(n, &run, cfg.chunk_rows)?;
                    push(label, r, &table, nfe, start.elapsed().as_secs_f64())?;
                }
            }
        }
        Sweep::Nfe | Sweep::G | Sweep::Dynamics => {
            let generator = load_generator(cfg)?;
            let runs: Vec<SampleRun> = match sweep {
                Sweep::Nfe => parse_grid::<usize>(&grid)?
                    .into_iter()
                    .map(|steps| SampleRun {
                        steps,
                        ..cfg.sampler.clone()
                    })
                    .collect(),
                Sweep::G => grid
                    .iter()
                    .map(|g| {
                        Ok(SampleRun {
                            dynamics: Dynamics::Sde,
                            g: GSpec::SigmaOf(Schedule::by_name(g)?),
                            ..cfg.sampler.clone()
                        })
                    })
                    .collect::<Result<_>>()?,
                _ => parse_grid::<Dynamics>(&grid)?
                    .into_iter()
                    .map(|dynamics| SampleRun {
                        dynamics,
                        ..cfg.sampler.clone()
                    })
                    .collect(),
            };
            for (label, base) in grid.iter().zip(&runs) {
                for r in 0..k {
                    let run = SampleRun {
                        seed: seed_of(r),
                        ..base.clone()
                    };
                    let start = Instant::now();
                    let (table, nfe) = generator.synthesize(n, &run, cfg.chunk_rows)?;
                    push(label, r, &table, nfe, start.elapsed().as_secs_f64())?;
                }
            }
        }
    }
    write_bench(ctx, sweep, &grid, &rows)?;
    Ok(rows)
}

fn write_bench(ctx: &Context, sweep: Sweep, grid: &[String], rows: &[BenchRow]) -> Result<()> {
    let mut csv = String::from("sweep,value,replicate,sampler_seed,nfe,utility,risk,roc_uni,roc_biv,cio\n");
    let mut timing = String::from("sweep,value,replicate,seconds\n");
    for r in rows {
        let e = &r.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            sweep.name(),
            r.value,
            r.replicate,
            r.sampler_seed,
            r.nfe,
            e.utility,
            e.risk,
            e.roc_uni,
            e.roc_biv,
            e.cio
        );
        let _ = writeln!(timing, "{},{},{},{:.6}", sweep.name(), r.value, r.replicate, r.seconds);
    }
    let mut summary = String::from("sweep,value,replicates,utility_mean,utility_sd,risk_mean,risk_sd\n");
    let mut md = String::from("| Value | Utility | Risk |\n|---|---|---|\n");
    for value in grid {
        let group: Vec<_> = rows.iter().filter(|r| &r.value == value).collect();
        if group.is_empty() {
            continue;
        }
        let (um, us) = mean_sd(&group.iter().map(|r| r.report.utility).collect::<Vec<_>>());
        let (rm, rs) = mean_sd(&group.iter().map(|r| r.report.risk).collect::<Vec<_>>());
        let _ = writeln!(summary, "{},{},{},{},{},{},{}", sweep.name(), value, group.len(), um, us, rm, rs);
        let _ = writeln!(md, "| {value} | {um:.4} ± {us:.4} | {rm:.4} ± {rs:.4} |");
    }
    std::fs::write(ctx.out("sweep.csv"), csv)?;
    std::fs::write(ctx.out("summary.csv"), summary)?;
    std::fs::write(ctx.out("summary.md"), md)?;
    // Wall-clock varies between runs, so it lives apart from the reproducible outputs.
    std::fs::write(ctx.out("timing.csv"), timing)?;
    write_json(
        &ctx.out("bench.meta.json"),
        &json!({
            "stamp": ctx.stamp(),
            "sweep": sweep,
            "grid": grid,
            "replicates": ctx.config.replicates,
            "sampler": ctx.config.sampler,
        }),
    )
}

/// Writes `<kind>.csv`, `<kind>.schema.json`, `<kind>.meta.json`, and
/// `<kind>.eval.json` where the dataset supports evaluation.
pub fn toy_data(ctx: &Context, kind: ToyKind, n: usize) -> Result<DataTable> {
    let seed = ctx.config.seed;
    let table = toy::generate(kind, n, seed)?;
    let name = kind.name();
    table.save_csv(ctx.out(&format!("{name}.csv")))?;
    let mut schema = table.schema().to_json();
    schema.push('\n');
    std::fs::write(ctx.out(&format!("{name}.schema.json")), schema)?;
    if let Some(spec) = toy::eval_spec(kind) {
        write_json(&ctx.out(&format!("{name}.eval.json")), &spec)?;
    }
    write_json(
        &ctx.out(&format!("{name}.meta.json")),
        &json!({ "stamp": ctx.stamp(), "kind": kind, "rows": n, "schema_hash": table.schema().hash() }),
    )?;
    Ok(table)
}
