//! TabSynFlow-lite: an MLP β-VAE that embeds encoded rows in a continuous
//! latent space, and a conditional flow matching model on those latents.
//!
//! Training is two-stage. The VAE is fit first; the flow then learns on the
//! frozen encoder means, standardized per latent coordinate.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::nn::{Adam, AdamConfig, Mlp, MlpConfig};
use crate::paths::Schedule;
use crate::sampler::{sample_chunked, FieldValue, SampleRun, VectorField};
use crate::tabular::{Codec, DataTable, Layout};
use crate::train::{self, TrainConfig, TrainLog, Trainable};
use crate::vfm::{draw_interpolants, score_from_mean, weighted_recon_grad};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    /// KL weight.
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 32,
            hidden: vec![256, 256],
            beta: 1e-2,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_dim >= 1, Param, "latent_dim must be at least 1");
        ensure!(self.beta >= 0.0 && self.beta.is_finite(), Param, "beta must be non-negative");
        Ok(())
    }

    fn encoder(&self, data_dim: usize) -> MlpConfig {
        MlpConfig {
            input_dim: data_dim,
            hidden: self.hidden.clone(),
            output_dim: 2 * self.latent_dim,
            time_embed_dim: 0,
        }
    }

    fn decoder(&self, data_dim: usize) -> MlpConfig {
        let mut hidden = self.hidden.clone();
        hidden.reverse();
        MlpConfig {
            input_dim: self.latent_dim,
            hidden,
            output_dim: data_dim,
            time_embed_dim: 0,
        }
    }
}

/// `½·Σ(μ² + e^{lv} − 1 − lv)`, the KL divergence from `N(μ, e^{lv})` to `N(0, 1)`.
pub fn gaussian_kl(mu: &[f64], log_var: &[f64]) -> f64 {
    mu.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Encoder and decoder with their optimizers.
#[derive(Clone, Debug)]
pub struct Vae {
    encoder: Mlp,
    decoder: Mlp,
    adam_enc: Adam,
    adam_dec: Adam,
    layout: Layout,
    config: VaeConfig,
}

impl Vae {
    pub fn new(layout: Layout, config: VaeConfig, adam: AdamConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = layout.total_dim();
        let encoder = Mlp::new(config.encoder(d), rng)?;
        let decoder = Mlp::new(config.decoder(d), rng)?;
        Ok(Self::from_nets(encoder, decoder, layout, config, adam))
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, layout: Layout, config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let d = layout.total_dim();
        ensure!(
            encoder.config() == &config.encoder(d) && decoder.config() == &config.decoder(d),
            Checkpoint,
            "network shapes do not match the VAE configuration"
        );
        Ok(Self::from_nets(encoder, decoder, layout, config, AdamConfig::default()))
    }

    fn from_nets(encoder: Mlp, decoder: Mlp, layout: Layout, config: VaeConfig, adam: AdamConfig) -> Self {
        Vae {
            adam_enc: Adam::new(&encoder, adam),
            adam_dec: Adam::new(&decoder, adam),
            encoder,
            decoder,
            layout,
            config,
        }
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// `(μ, log σ²)` of `q(z | x)`.
    pub fn encode(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.encoder.forward(x, None)?;
        let l = self.config.latent_dim;
        let log_var = out.slice(s![.., l..]).to_owned();
        ensure!(log_var.iter().all(|v| v.is_finite()), Numerical, "non-finite encoder log-variance");
        Ok((out.slice(s![.., ..l]).to_owned(), log_var))
    }

    /// Raw decoder output: numeric means and categorical logits.
    pub fn decode(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.decoder.forward(z, None)
    }

    /// Loss for a fixed reparameterization noise `eps` (`n × L`), with
    /// gradients for both networks. Exposed for gradient checks.
    pub fn loss_grad(
        &self,
        x: ArrayView2<f64>,
        eps: ArrayView2<f64>,
    ) -> Result<(f64, crate::nn::Gradients, crate::nn::Gradients)> {
        let n = x.nrows();
        let l = self.config.latent_dim;
        ensure!(eps.dim() == (n, l), Shape, "noise shape {:?} != ({n}, {l})", eps.dim());
        let (enc_out, enc_tape) = self.encoder.forward_tape(x, None)?;
        let mu = enc_out.slice(s![.., ..l]);
        let log_var = enc_out.slice(s![.., l..]);
        ensure!(log_var.iter().all(|v| v.is_finite()), Numerical, "non-finite encoder log-variance");
        let std = log_var.mapv(|lv| (0.5 * lv).exp());
        let z = &mu + &(&std * &eps);
        let (raw, dec_tape) = self.decoder.forward_tape(z.view(), None)?;
        let (recon, upstream) = weighted_recon_grad(raw.view(), x, &self.layout, &vec![1.0; n])?;
        let (dec_grads, dz) = self.decoder.backward(&dec_tape, upstream.view(), true)?;
        let dz = dz.expect("decoder input gradient requested");

        let beta = self.config.beta;
        let inv_n = 1.0 / n as f64;
        let mut kl = 0.0;
        let mut d_enc = Array2::<f64>::zeros(enc_out.dim());
        for i in 0..n {
            for j in 0..l {
                let (m, lv) = (mu[[i, j]], log_var[[i, j]]);
                let var = lv.exp();
                kl += 0.5 * (m * m + var - 1.0 - lv);
                d_enc[[i, j]] = dz[[i, j]] + beta * m * inv_n;
                d_enc[[i, l + j]] = dz[[i, j]] * eps[[i, j]] * 0.5 * std[[i, j]] + beta * 0.5 * (var - 1.0) * inv_n;
            }
        }
        let (enc_grads, _) = self.encoder.backward(&enc_tape, d_enc.view(), false)?;
        Ok((recon + beta * kl * inv_n, enc_grads, dec_grads))
    }

    /// Reconstruction plus `β·KL`, averaged over rows, with fresh noise from `rng`.
    pub fn vae_loss(&self, x: ArrayView2<f64>, rng: &mut impl Rng) -> Result<f64> {
        let eps = standard_normal((x.nrows(), self.config.latent_dim), rng);
        Ok(self.loss_grad(x, eps.view())?.0)
    }
}

fn standard_normal(shape: (usize, usize), rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

impl Trainable for Vae {
    fn train_step(&mut self, batch: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let eps = standard_normal((batch.nrows(), self.config.latent_dim), rng);
        let (loss, enc, dec) = self.loss_grad(batch, eps.view())?;
        ensure!(loss.is_finite(), Numerical, "non-finite VAE loss");
        self.adam_enc.step(&mut self.encoder, &enc)?;
        self.adam_dec.step(&mut self.decoder, &dec)?;
        Ok(loss)
    }

    fn snapshot(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    fn restore(&mut self, params: &[f64]) -> Result<()> {
        let k = self.encoder.config().n_params();
        ensure!(params.len() >= k, Shape, "snapshot too short");
        self.encoder.set_params_flat(&params[..k])?;
        self.decoder.set_params_flat(&params[k..])
    }
}

/// Mean over all entries of `(pred − target)²`, and its gradient.
pub fn cfm_loss_grad(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    ensure!(pred.dim() == target.dim(), Shape, "prediction {:?} != target {:?}", pred.dim(), target.dim());
    ensure!(!pred.is_empty(), Data, "empty batch");
    let diff = &pred - &target;
    let scale = 1.0 / diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    Ok((loss, diff * (2.0 * scale)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            hidden: vec![1024, 2048, 2048, 1024],
            time_embed_dim: 128,
        }
    }
}

/// Velocity network on standardized latents.
#[derive(Clone, Debug)]
pub struct LatentFlow {
    net: Mlp,
    adam: Adam,
    schedule: Schedule,
    /// Per-coordinate mean and standard deviation of the training latents.
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl LatentFlow {
    pub fn new(latent_dim: usize, schedule: Schedule, config: &FlowConfig, adam: AdamConfig, rng: &mut impl Rng) -> Result<Self> {
        schedule.validate()?;
        let net = Mlp::new(
            MlpConfig {
                input_dim: latent_dim,
                hidden: config.hidden.clone(),
                output_dim: latent_dim,
                time_embed_dim: config.time_embed_dim,
            },
            rng,
        )?;
        Ok(LatentFlow {
            adam: Adam::new(&net, adam),
            net,
            schedule,
            shift: Array1::zeros(latent_dim),
            scale: Array1::ones(latent_dim),
        })
    }

    pub fn from_parts(net: Mlp, schedule: Schedule, shift: Array1<f64>, scale: Array1<f64>) -> Result<Self> {
        schedule.validate()?;
        let l = net.config().input_dim;
        ensure!(
            net.config().output_dim == l && shift.len() == l && scale.len() == l,
            Checkpoint,
            "latent flow widths are inconsistent"
        );
        ensure!(scale.iter().all(|&s| s > 0.0), Checkpoint, "latent scale must be positive");
        Ok(LatentFlow {
            adam: Adam::new(&net, AdamConfig::default()),
            net,
            schedule,
            shift,
            scale,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.net.config().input_dim
    }

    /// Sets the standardization from raw latents and returns them standardized.
    pub fn fit_standardizer(&mut self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure!(z.ncols() == self.latent_dim(), Shape, "latent width {} != {}", z.ncols(), self.latent_dim());
        ensure!(z.nrows() > 0, Data, "no latents");
        let mean = z.mean_axis(Axis(0)).expect("non-empty");
        let std = z.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        self.shift = mean;
        self.scale = std;
        Ok(self.standardize(z))
    }

    pub fn standardize(&self, z: ArrayView2<f64>) -> Array2<f64> {
        (&z - &self.shift) / &self.scale
    }

    pub fn unstandardize(&self, z: ArrayView2<f64>) -> Array2<f64> {
        &z * &self.scale + &self.shift
    }

    fn targets(&self, z1: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<(Array2<f64>, Vec<f64>, Array2<f64>)> {
        let (z_t, t) = draw_interpolants(&self.schedule, z1, rng)?;
        let mut u = Array2::zeros(z1.dim());
        for (i, mut row) in u.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&self.schedule.cond_velocity(z_t.row(i), z1.row(i), t[i])?);
        }
        Ok((z_t, t, u))
    }

    /// Conditional flow matching loss on a batch of (standardized) latents.
    pub fn cfm_loss(&self, z1: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (z_t, t, u) = self.targets(z1, rng)?;
        let pred = self.net.forward(z_t.view(), Some(&t))?;
        Ok(cfm_loss_grad(pred.view(), u.view())?.0)
    }
}

impl Trainable for LatentFlow {
    fn train_step(&mut self, batch: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (z_t, t, u) = self.targets(batch, rng)?;
        let (pred, tape) = self.net.forward_tape(z_t.view(), Some(&t))?;
        let (loss, upstream) = cfm_loss_grad(pred.view(), u.view())?;
        let (grads, _) = self.net.backward(&tape, upstream.view(), false)?;
        self.adam.step(&mut self.net, &grads)?;
        Ok(loss)
    }

    fn snapshot(&self) -> Vec<f64> {
        self.net.params_flat()
    }

    fn restore(&mut self, params: &[f64]) -> Result<()> {
        self.net.set_params_flat(params)
    }
}

impl VectorField for LatentFlow {
    fn dim(&self) -> usize {
        self.latent_dim()
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64, with_score: bool) -> Result<FieldValue> {
        let ts = vec![t; x.nrows()];
        let velocity = self.net.forward(x, Some(&ts))?;
        let score = if with_score {
            // The CFM velocity is A·E[z1|z_t] + B·z_t, so the implied posterior mean is (v − B·z_t)/A.
            let (a, b) = self.schedule.coefficients(t)?;
            let mut theta = velocity.clone();
            theta.scaled_add(-b, &x);
            theta /= a;
            Some(score_from_mean(&theta, x, &self.schedule, t)?)
        } else {
            None
        };
        Ok(FieldValue { velocity, score })
    }
}

/// The two TabSynFlow stages plus the schema they were fit on.
#[derive(Clone, Debug)]
pub struct TabSynFlow {
    pub vae: Vae,
    pub flow: LatentFlow,
}

/// Training logs of both stages.
#[derive(Clone, Debug)]
pub struct TabSynFlowLogs {
    pub vae: TrainLog,
    pub flow: TrainLog,
}

impl TabSynFlow {
    /// Fits the VAE, then the flow on the standardized encoder means.
    #[allow(clippy::too_many_arguments)]
    pub fn fit(
        data: ArrayView2<f64>,
        layout: Layout,
        schedule: Schedule,
        vae_cfg: VaeConfig,
        flow_cfg: &FlowConfig,
        vae_train: &TrainConfig,
        flow_train: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, TabSynFlowLogs)> {
        let mut vae = Vae::new(layout, vae_cfg, vae_train.adam(), rng)?;
        let vae_log = train::fit(&mut vae, data, vae_train, rng)?;
        let (mu, _) = vae.encode(data)?;
        let mut flow = LatentFlow::new(vae.config.latent_dim, schedule, flow_cfg, flow_train.adam(), rng)?;
        let z = flow.fit_standardizer(mu.view())?;
        let flow_log = train::fit(&mut flow, z.view(), flow_train, rng)?;
        Ok((
            TabSynFlow { vae, flow },
            TabSynFlowLogs {
                vae: vae_log,
                flow: flow_log,
            },
        ))
    }
}

/// Integrates the latent flow, decodes, and inverts the codec. Rows are
/// generated in chunks of `chunk` to bound memory.
pub fn synthesize_latent(
    vae: &Vae,
    flow: &LatentFlow,
    codec: &Codec,
    n: usize,
    run: &SampleRun,
    chunk: usize,
) -> Result<(DataTable, usize)> {
    ensure!(
        vae.config.latent_dim == flow.latent_dim(),
        Checkpoint,
        "VAE latent width {} != flow width {}",
        vae.config.latent_dim,
        flow.latent_dim()
    );
    ensure!(vae.layout == codec.layout(), Checkpoint, "VAE was trained on a different schema");
    let (values, nfe) = sample_chunked(flow, n, run, chunk, |z| {
        let z = flow.unstandardize(z.view());
        vae.decode(z.view())
    })?;
    Ok((codec.decode(&codec.batch(values)?)?, nfe))
}
