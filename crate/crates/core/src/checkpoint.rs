//! Versioned JSON checkpoints and the trained generators they restore.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::latent::{synthesize_latent, LatentFlow, TabSynFlow, Vae, VaeConfig};
use crate::nn::{Mlp, MlpConfig};
use crate::paths::Schedule;
use crate::sampler::{early_stop_sweep, sample_chunked, SampleRun, VectorField};
use crate::tabular::{Codec, DataTable};
use crate::vfm::{TabbyFlow, TabbyFlowConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkBlob {
    pub config: MlpConfig,
    pub params: Vec<f64>,
}

impl NetworkBlob {
    pub fn of(net: &Mlp) -> Self {
        NetworkBlob {
            config: net.config().clone(),
            params: net.params_flat(),
        }
    }

    pub fn build(&self) -> Result<Mlp> {
        Mlp::from_params(self.config.clone(), &self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Tabbyflow {
        config: TabbyFlowConfig,
        network: NetworkBlob,
    },
    Vae {
        config: VaeConfig,
        encoder: NetworkBlob,
        decoder: NetworkBlob,
    },
    LatentFlow {
        network: NetworkBlob,
        shift: Vec<f64>,
        scale: Vec<f64>,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Tabbyflow { .. } => "tabbyflow",
            Payload::Vae { .. } => "vae",
            Payload::LatentFlow { .. } => "latent_flow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub schedule: Schedule,
    pub codec: Codec,
    pub payload: Payload,
}

impl Checkpoint {
    pub fn new(codec: &Codec, schedule: Schedule, config_hash: &str, seed: u64, payload: Payload) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            schema_hash: codec.schema_hash(),
            config_hash: config_hash.to_string(),
            seed,
            schedule,
            codec: codec.clone(),
            payload,
        }
    }

    pub fn tabbyflow(model: &TabbyFlow, codec: &Codec, config_hash: &str, seed: u64) -> Self {
        let payload = Payload::Tabbyflow {
            config: model.config().clone(),
            network: NetworkBlob::of(model.net()),
        };
        Self::new(codec, model.schedule(), config_hash, seed, payload)
    }

    pub fn vae(model: &Vae, schedule: Schedule, codec: &Codec, config_hash: &str, seed: u64) -> Self {
        let payload = Payload::Vae {
            config: model.config().clone(),
            encoder: NetworkBlob::of(model.encoder()),
            decoder: NetworkBlob::of(model.decoder()),
        };
        Self::new(codec, schedule, config_hash, seed, payload)
    }

    pub fn latent_flow(model: &LatentFlow, codec: &Codec, config_hash: &str, seed: u64) -> Self {
        let payload = Payload::LatentFlow {
            network: NetworkBlob::of(model.net()),
            shift: model.shift.to_vec(),
            scale: model.scale.to_vec(),
        };
        Self::new(codec, model.schedule(), config_hash, seed, payload)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        ensure!(
            version == Some(FORMAT_VERSION as u64),
            Checkpoint,
            "unsupported checkpoint format version {version:?} (expected {FORMAT_VERSION})"
        );
        let ck: Checkpoint = serde_json::from_value(value)?;
        ensure!(
            ck.codec.schema_hash() == ck.schema_hash,
            Checkpoint,
            "checkpoint schema hash does not match its embedded schema"
        );
        Ok(ck)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn wrong_kind(&self, want: &str) -> crate::Error {
        crate::Error::Checkpoint(format!("expected a {want} checkpoint, found {}", self.payload.kind()))
    }

    pub fn into_tabbyflow(self) -> Result<TabbyFlow> {
        match self.payload {
            Payload::Tabbyflow { config, network } => {
                TabbyFlow::from_parts(network.build()?, self.codec.layout(), self.schedule, config)
            }
            _ => Err(self.wrong_kind("tabbyflow")),
        }
    }

    pub fn to_vae(&self) -> Result<Vae> {
        match &self.payload {
            Payload::Vae { config, encoder, decoder } => {
                Vae::from_parts(encoder.build()?, decoder.build()?, self.codec.layout(), config.clone())
            }
            _ => Err(self.wrong_kind("vae")),
        }
    }

    pub fn to_latent_flow(&self) -> Result<LatentFlow> {
        match &self.payload {
            Payload::LatentFlow { network, shift, scale } => LatentFlow::from_parts(
                network.build()?,
                self.schedule,
                Array1::from_vec(shift.clone()),
                Array1::from_vec(scale.clone()),
            ),
            _ => Err(self.wrong_kind("latent_flow")),
        }
    }
}

/// A trained model able to emit synthetic tables.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Generator {
    TabbyFlow { model: TabbyFlow, codec: Codec },
    TabSynFlow { model: TabSynFlow, codec: Codec },
}

impl Generator {
    /// From a TabbyFlow checkpoint, or a latent-flow checkpoint plus its VAE.
    pub fn from_checkpoints(main: Checkpoint, vae: Option<Checkpoint>) -> Result<Self> {
        match &main.payload {
            Payload::Tabbyflow { .. } => {
                let codec = main.codec.clone();
                Ok(Generator::TabbyFlow {
                    model: main.into_tabbyflow()?,
                    codec,
                })
            }
            Payload::LatentFlow { .. } => {
                let vae_ck = vae.ok_or_else(|| crate::Error::Checkpoint("latent flow needs its VAE checkpoint".into()))?;
                ensure!(
                    vae_ck.schema_hash == main.schema_hash,
                    Checkpoint,
                    "VAE and flow checkpoints were trained on different schemas"
                );
                Ok(Generator::TabSynFlow {
                    model: TabSynFlow {
                        vae: vae_ck.to_vae()?,
                        flow: main.to_latent_flow()?,
                    },
                    codec: main.codec,
                })
            }
            Payload::Vae { .. } => Err(crate::Error::Checkpoint(
                "a VAE checkpoint cannot sample on its own; pass the latent flow checkpoint".into(),
            )),
        }
    }

    pub fn codec(&self) -> &Codec {
        match self {
            Generator::TabbyFlow { codec, .. } | Generator::TabSynFlow { codec, .. } => codec,
        }
    }

    pub fn field(&self) -> &dyn VectorField {
        match self {
            Generator::TabbyFlow { model, .. } => model,
            Generator::TabSynFlow { model, .. } => &model.flow,
        }
    }

    /// Terminal states to encoded rows.
    fn to_encoded(&self, x: Array2<f64>) -> Result<Array2<f64>> {
        match self {
            Generator::TabbyFlow { .. } => Ok(x),
            Generator::TabSynFlow { model, .. } => model.vae.decode(model.flow.unstandardize(x.view()).view()),
        }
    }

    fn decode(&self, encoded: Array2<f64>) -> Result<DataTable> {
        let codec = self.codec();
        codec.decode(&codec.batch(encoded)?)
    }

    /// `n` synthetic rows and the evaluations spent per trajectory.
    pub fn synthesize(&self, n: usize, run: &SampleRun, chunk: usize) -> Result<(DataTable, usize)> {
        match self {
            Generator::TabbyFlow { .. } => {
                let (values, nfe) = sample_chunked(self.field(), n, run, chunk, Ok)?;
                Ok((self.decode(values)?, nfe))
            }
            Generator::TabSynFlow { model, codec } => synthesize_latent(&model.vae, &model.flow, codec, n, run, chunk),
        }
    }

    /// One table per terminal time along shared trajectories.
    pub fn sweep(&self, n: usize, grid: &[f64], run: &SampleRun) -> Result<Vec<(DataTable, usize)>> {
        early_stop_sweep(self.field(), n, grid, run)?
            .into_iter()
            .map(|s| Ok((self.decode(self.to_encoded(s.values)?)?, s.nfe)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::AdamConfig;
    use crate::toy::{generate, ToyKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (TabbyFlow, Codec) {
        let table = generate(ToyKind::Composite, 20, 1).unwrap();
        let codec = Codec::fit(&table).unwrap();
        let cfg = TabbyFlowConfig {
            hidden: vec![6],
            time_embed_dim: 4,
            ..TabbyFlowConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = TabbyFlow::new(codec.layout(), Schedule::ot(), cfg, AdamConfig::default(), &mut rng).unwrap();
        let enc = codec.encode(&table).unwrap();
        use crate::train::Trainable;
        model.train_step(enc.values.view(), &mut rng).unwrap();
        (model, codec)
    }

    #[test]
    fn round_trip_is_exact() {
        let (model, codec) = small();
        let ck = Checkpoint::tabbyflow(&model, &codec, "abc", 7);
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        let restored = back.into_tabbyflow().unwrap();
        assert_eq!(restored.net().params_flat(), model.net().params_flat());
    }

    #[test]
    fn rejects_version_and_hash_mismatch() {
        let (model, codec) = small();
        let ck = Checkpoint::tabbyflow(&model, &codec, "abc", 7);
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        v["format_version"] = 99.into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
        v["schema_hash"] = "00".into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn synthesized_cells_follow_schema() {
        let (model, codec) = small();
        let g = Generator::TabbyFlow { model, codec };
        let run = SampleRun {
            steps: 5,
            ..SampleRun::default()
        };
        let (t, nfe) = g.synthesize(7, &run, 3).unwrap();
        assert_eq!((t.n_rows(), nfe), (7, 5));
        let sweep = g.sweep(7, &[1.0], &run).unwrap();
        assert_eq!(sweep[0].0, t);
    }
}
