use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tabflow::commands::{self, Context, Sweep};
use tabflow::config::{ModelKind, RunConfig};
use tabflow::sampler::{Dynamics, GSpec};
use tabflow::toy::ToyKind;
use tabflow::vfm::VarianceMode;
use tabflow::{Error, Result, Schedule};

/// Flow matching synthesizers for mixed-type tables.
#[derive(Parser, Debug)]
#[command(name = "tabflow", version)]
struct Cli {
    /// JSON run config; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; also used as the sampler seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Train a model and write its checkpoint(s).
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sample a synthetic table from a checkpoint.
    Synth {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Rows to generate.
        #[arg(short, long)]
        n: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score a synthetic table against the original.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Sweep a sampling or path setting over replicates.
    Bench {
        /// nfe | t_end | g | paths | dynamics
        #[arg(long)]
        sweep: Sweep,
        /// Comma-separated grid overriding the default.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<String>>,
        #[arg(long)]
        replicates: Option<usize>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write a seeded ground-truth dataset with its schema.
    ToyData {
        /// mixture2d | coupled-cats | adult-like | composite
        #[arg(long)]
        kind: ToyKind,
        #[arg(short, long, default_value_t = 10_000)]
        n: usize,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Original data CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// VAE checkpoint for a latent flow; defaults to vae.json beside it.
    #[arg(long)]
    vae: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    /// ot | vp | ve | cosine | logit_normal
    #[arg(long)]
    path: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    variance_mode: Option<VarianceMode>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    time_embed_dim: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    dynamics: Option<Dynamics>,
    /// zero | sigma | sigma:<path>
    #[arg(long)]
    g: Option<GSpec>,
    #[arg(long)]
    clip_m: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, c: &mut RunConfig) {
        c.io.data = self.data.or(c.io.data.take());
        c.io.schema = self.schema.or(c.io.schema.take());
    }
}

impl CheckpointArgs {
    fn apply(self, c: &mut RunConfig) {
        c.io.checkpoint = self.checkpoint.or(c.io.checkpoint.take());
        c.io.vae_checkpoint = self.vae.or(c.io.vae_checkpoint.take());
    }
}

impl TrainArgs {
    fn apply(self, c: &mut RunConfig) -> Result<()> {
        set(&mut c.model, self.model);
        if let Some(p) = self.path {
            c.path = Schedule::by_name(&p)?;
        }
        set(&mut c.training.epochs, self.epochs);
        set(&mut c.training.batch_size, self.batch_size);
        set(&mut c.training.lr, self.lr);
        set(&mut c.training.variance_mode, self.variance_mode);
        set(&mut c.network.hidden, self.hidden);
        set(&mut c.network.time_embed_dim, self.time_embed_dim);
        set(&mut c.vae.latent_dim, self.latent_dim);
        Ok(())
    }
}

impl SamplerArgs {
    fn apply(self, c: &mut RunConfig) {
        let s = &mut c.sampler;
        set(&mut s.steps, self.steps);
        set(&mut s.t_end, self.t_end);
        set(&mut s.dynamics, self.dynamics);
        set(&mut s.g, self.g);
        s.clip_m = self.clip_m.or(s.clip_m);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.sampler.seed = seed;
    }
    match cli.command {
        Command::Fit { data, train } => {
            data.apply(&mut cfg);
            train.apply(&mut cfg)?;
            commands::fit(&Context::new(cfg, cli.out_dir)?)?;
        }
        Command::Synth { ckpt, n, sampler } => {
            ckpt.apply(&mut cfg);
            sampler.apply(&mut cfg);
            commands::synth(&Context::new(cfg, cli.out_dir)?, n)?;
        }
        Command::Eval { data, synth, spec } => {
            data.apply(&mut cfg);
            cfg.io.synth = synth.or(cfg.io.synth.take());
            cfg.io.eval_spec = spec.or(cfg.io.eval_spec.take());
            let report = commands::eval(&Context::new(cfg, cli.out_dir)?)?;
            println!("utility {:.6}  risk {:.6}", report.utility, report.risk);
        }
        Command::Bench {
            sweep,
            grid,
            replicates,
            spec,
            data,
            ckpt,
            sampler,
            train,
        } => {
            data.apply(&mut cfg);
            ckpt.apply(&mut cfg);
            sampler.apply(&mut cfg);
            train.apply(&mut cfg)?;
            set(&mut cfg.replicates, replicates);
            cfg.io.eval_spec = spec.or(cfg.io.eval_spec.take());
            commands::bench(&Context::new(cfg, cli.out_dir)?, sweep, grid)?;
        }
        Command::ToyData { kind, n } => {
            commands::toy_data(&Context::new(cfg, cli.out_dir)?, kind, n)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
