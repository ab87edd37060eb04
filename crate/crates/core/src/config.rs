//! Run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};
use crate::eval::EvalSpec;
use crate::latent::{FlowConfig, VaeConfig};
use crate::paths::Schedule;
use crate::sampler::SampleRun;
use crate::train::TrainConfig;
use crate::vfm::{TabbyFlowConfig, VarianceMode, A_MAX};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Tabbyflow,
    Tabsynflow,
}

impl std::str::FromStr for ModelKind {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabbyflow" => Ok(ModelKind::Tabbyflow),
            "tabsynflow" => Ok(ModelKind::Tabsynflow),
            other => Err(crate::Error::Param(format!("unknown model '{other}' (expected tabbyflow|tabsynflow)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub variance_mode: VarianceMode,
    pub a_max: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            variance_mode: VarianceMode::Relaxed,
            a_max: A_MAX,
        }
    }
}

impl TrainingConfig {
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let f = FlowConfig::default();
        NetworkConfig {
            hidden: f.hidden,
            time_embed_dim: f.time_embed_dim,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Training / original data CSV.
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub vae_checkpoint: Option<PathBuf>,
    pub synth: Option<PathBuf>,
    pub eval_spec: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub path: Schedule,
    pub sampler: SampleRun,
    pub training: TrainingConfig,
    /// VAE stage of TabSynFlow; falls back to `training` when absent.
    pub vae_training: Option<TrainingConfig>,
    pub network: NetworkConfig,
    pub vae: VaeConfig,
    pub eval: Option<EvalSpec>,
    pub seed: u64,
    /// Rows generated per sampling chunk.
    pub chunk_rows: usize,
    pub replicates: usize,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::default(),
            path: Schedule::ot(),
            sampler: SampleRun::default(),
            training: TrainingConfig::default(),
            vae_training: None,
            network: NetworkConfig::default(),
            vae: VaeConfig::default(),
            eval: None,
            seed: 0,
            chunk_rows: 8192,
            replicates: 5,
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Param(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.path.validate()?;
        self.sampler.validate()?;
        self.training.train().validate()?;
        if let Some(v) = &self.vae_training {
            v.train().validate()?;
        }
        self.tabbyflow().validate()?;
        self.vae.validate()?;
        ensure!(self.chunk_rows >= 1, Param, "chunk_rows must be positive");
        ensure!(self.replicates >= 1, Param, "replicates must be positive");
        Ok(())
    }

    pub fn tabbyflow(&self) -> TabbyFlowConfig {
        TabbyFlowConfig {
            hidden: self.network.hidden.clone(),
            time_embed_dim: self.network.time_embed_dim,
            variance_mode: self.training.variance_mode,
            a_max: self.training.a_max,
        }
    }

    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            hidden: self.network.hidden.clone(),
            time_embed_dim: self.network.time_embed_dim,
        }
    }

    pub fn vae_train(&self) -> TrainConfig {
        self.vae_training.as_ref().unwrap_or(&self.training).train()
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
