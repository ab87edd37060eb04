//! TabbyFlow: variational flow matching in the encoded data space.
//!
//! The network predicts a factorized posterior over the clean row: Gaussian
//! means for numeric slots and a softmax per one-hot block. The generative
//! velocity and score are recovered from the posterior mean `θ`:
//! `v = A·θ + B·x_t` and `s = −(x_t − α·θ)/σ²`.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{softmax_blocks, Adam, AdamConfig, Mlp, MlpConfig};
use crate::paths::{Schedule, EPS_T};
use crate::sampler::{FieldValue, VectorField};
use crate::tabular::Layout;
use crate::train::Trainable;

/// Upper clamp on the numeric loss weight; tames the `1/(1−t)` growth of `A` near `t = 1`.
pub const A_MAX: f64 = 1e3;
/// Floor inside the cross-entropy log.
pub const CE_FLOOR: f64 = 1e-12;
/// Smallest `σ` at which the score is evaluated.
pub const SIGMA_FLOOR: f64 = 1e-4;

const SUM_TOL: f64 = 1e-6;

/// Variance of the Gaussian numeric heads: `0.5·A⁻²` (theoretical) or `0.5·A⁻¹` (relaxed).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    Theoretical,
    #[default]
    Relaxed,
}

impl std::str::FromStr for VarianceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theoretical" => Ok(VarianceMode::Theoretical),
            "relaxed" => Ok(VarianceMode::Relaxed),
            other => Err(Error::Param(format!("unknown variance mode '{other}'"))),
        }
    }
}

/// Per-row numeric loss weight: `min(A, a_max)` or its square.
pub fn numeric_weight(a: f64, mode: VarianceMode, a_max: f64) -> Result<f64> {
    ensure!(a > 0.0 && a.is_finite(), Numerical, "velocity coefficient A = {a} is not positive");
    let a = a.min(a_max);
    Ok(match mode {
        VarianceMode::Relaxed => a,
        VarianceMode::Theoretical => a * a,
    })
}

/// Predicted posterior for a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorOutput {
    /// `n × D_num` numeric means.
    pub num: Array2<f64>,
    /// One `n × K_d` probability matrix per categorical column.
    pub cat: Vec<Array2<f64>>,
}

impl PosteriorOutput {
    /// Splits raw network output and applies the per-block softmax.
    pub fn from_logits(mut raw: Array2<f64>, layout: &Layout) -> Result<Self> {
        ensure!(
            raw.ncols() == layout.total_dim(),
            Shape,
            "network output width {} != encoded width {}",
            raw.ncols(),
            layout.total_dim()
        );
        softmax_blocks(&mut raw, &layout.blocks);
        Ok(Self::split(&raw, layout))
    }

    fn split(full: &Array2<f64>, layout: &Layout) -> Self {
        PosteriorOutput {
            num: full.slice(s![.., ..layout.num_dim]).to_owned(),
            cat: layout
                .blocks
                .iter()
                .map(|&(o, k)| full.slice(s![.., o..o + k]).to_owned())
                .collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.num.nrows()
    }

    /// Posterior mean of the whole encoded row.
    pub fn full(&self) -> Array2<f64> {
        let mut views = vec![self.num.view()];
        views.extend(self.cat.iter().map(|c| c.view()));
        ndarray::concatenate(Axis(1), &views).expect("blocks share the row count")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num.nrows();
        for (d, block) in self.cat.iter().enumerate() {
            ensure!(block.nrows() == n, Shape, "categorical block {d} has {} rows, expected {n}", block.nrows());
            for (i, row) in block.axis_iter(Axis(0)).enumerate() {
                let total = row.sum();
                ensure!(
                    (total - 1.0).abs() <= SUM_TOL && row.iter().all(|&p| (0.0..=1.0).contains(&p)),
                    Data,
                    "categorical block {d}, row {i} is not a probability vector (sum {total})"
                );
            }
        }
        Ok(())
    }
}

fn check_x1(x1: ArrayView2<f64>, layout: &Layout, n: usize, t: &[f64]) -> Result<()> {
    ensure!(
        x1.dim() == (n, layout.total_dim()),
        Shape,
        "target shape {:?} != ({n}, {})",
        x1.dim(),
        layout.total_dim()
    );
    ensure!(t.len() == n, Shape, "{} times for {n} rows", t.len());
    Ok(())
}

/// Mean over the batch of `w(t)·‖x_num − θ_num‖² + Σ_d CE(x_d, θ_d)`.
pub fn tabbyflow_loss(
    out: &PosteriorOutput,
    x1: ArrayView2<f64>,
    layout: &Layout,
    schedule: &Schedule,
    t: &[f64],
    mode: VarianceMode,
    a_max: f64,
) -> Result<f64> {
    out.validate()?;
    let n = out.n_rows();
    check_x1(x1, layout, n, t)?;
    ensure!(n > 0, Data, "empty batch");
    let mut total = 0.0;
    for i in 0..n {
        let w = numeric_weight(schedule.coefficients(t[i])?.0, mode, a_max)?;
        let sq: f64 = (0..layout.num_dim).map(|d| (x1[[i, d]] - out.num[[i, d]]).powi(2)).sum();
        total += w * sq;
        for (&(o, k), probs) in layout.blocks.iter().zip(&out.cat) {
            for j in 0..k {
                let x = x1[[i, o + j]];
                if x != 0.0 {
                    total -= x * probs[[i, j]].max(CE_FLOOR).ln();
                }
            }
        }
    }
    Ok(total / n as f64)
}

/// Loss and its gradient with respect to the raw network output (numeric
/// means and pre-softmax logits).
pub fn tabbyflow_loss_grad(
    raw: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    layout: &Layout,
    schedule: &Schedule,
    t: &[f64],
    mode: VarianceMode,
    a_max: f64,
) -> Result<(f64, Array2<f64>)> {
    check_x1(x1, layout, raw.nrows(), t)?;
    let weights = t
        .iter()
        .map(|&ti| numeric_weight(schedule.coefficients(ti)?.0, mode, a_max))
        .collect::<Result<Vec<_>>>()?;
    weighted_recon_grad(raw, x1, layout, &weights)
}

/// Mean over rows of `w_i·‖x_num − raw_num‖² + Σ_d CE(x_d, softmax(raw_d))`
/// and its gradient with respect to `raw`.
pub(crate) fn weighted_recon_grad(
    raw: ArrayView2<f64>,
    x1: ArrayView2<f64>,
    layout: &Layout,
    weights: &[f64],
) -> Result<(f64, Array2<f64>)> {
    let n = raw.nrows();
    check_x1(x1, layout, n, weights)?;
    ensure!(n > 0, Data, "empty batch");
    let mut probs = raw.to_owned();
    softmax_blocks(&mut probs, &layout.blocks);
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::<f64>::zeros(raw.dim());
    let mut total = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        for d in 0..layout.num_dim {
            let r = x1[[i, d]] - raw[[i, d]];
            total += w * r * r;
            grad[[i, d]] = -2.0 * w * r * inv_n;
        }
        for &(o, k) in &layout.blocks {
            // ∂/∂z_k of −Σ_l x_l·ln max(p_l, ε) is p_k·Σ_l x_l·a_l − x_k·a_k, where a_l marks p_l above the floor.
            let mut active_mass = 0.0;
            for j in 0..k {
                let (x, p) = (x1[[i, o + j]], probs[[i, o + j]]);
                if x != 0.0 {
                    total -= x * p.max(CE_FLOOR).ln();
                }
                if p > CE_FLOOR {
                    active_mass += x;
                }
            }
            for j in 0..k {
                let (x, p) = (x1[[i, o + j]], probs[[i, o + j]]);
                let own = if p > CE_FLOOR { x } else { 0.0 };
                grad[[i, o + j]] = (p * active_mass - own) * inv_n;
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// `v = A(t)·θ + B(t)·x_t` for a batch at a single time.
pub fn velocity_from_mean(theta: &Array2<f64>, x_t: ArrayView2<f64>, schedule: &Schedule, t: f64) -> Result<Array2<f64>> {
    ensure!(theta.dim() == x_t.dim(), Shape, "θ shape {:?} != x_t shape {:?}", theta.dim(), x_t.dim());
    let (a, b) = schedule.coefficients(t)?;
    let mut v = theta * a;
    v.scaled_add(b, &x_t);
    Ok(v)
}

/// `s = −(x_t − α(t)·θ)/σ(t)²`.
pub fn score_from_mean(theta: &Array2<f64>, x_t: ArrayView2<f64>, schedule: &Schedule, t: f64) -> Result<Array2<f64>> {
    ensure!(theta.dim() == x_t.dim(), Shape, "θ shape {:?} != x_t shape {:?}", theta.dim(), x_t.dim());
    let p = schedule.eval(t)?;
    ensure!(
        p.sigma >= SIGMA_FLOOR,
        Numerical,
        "sigma({t}) = {:e} is below the score floor {SIGMA_FLOOR:e}",
        p.sigma
    );
    let inv_var = 1.0 / (p.sigma * p.sigma);
    let mut s = theta * (p.alpha * inv_var);
    s.scaled_add(-inv_var, &x_t);
    Ok(s)
}

pub fn velocity_from_posterior(out: &PosteriorOutput, x_t: ArrayView2<f64>, schedule: &Schedule, t: f64) -> Result<Array2<f64>> {
    velocity_from_mean(&out.full(), x_t, schedule, t)
}

pub fn score_from_posterior(out: &PosteriorOutput, x_t: ArrayView2<f64>, schedule: &Schedule, t: f64) -> Result<Array2<f64>> {
    score_from_mean(&out.full(), x_t, schedule, t)
}

fn field_value(theta: &Array2<f64>, x: ArrayView2<f64>, schedule: &Schedule, t: f64, with_score: bool) -> Result<FieldValue> {
    Ok(FieldValue {
        velocity: velocity_from_mean(theta, x, schedule, t)?,
        score: if with_score {
            Some(score_from_mean(theta, x, schedule, t)?)
        } else {
            None
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabbyFlowConfig {
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub variance_mode: VarianceMode,
    pub a_max: f64,
}

impl Default for TabbyFlowConfig {
    fn default() -> Self {
        TabbyFlowConfig {
            hidden: vec![1024, 2048, 2048, 1024],
            time_embed_dim: 128,
            variance_mode: VarianceMode::Relaxed,
            a_max: A_MAX,
        }
    }
}

impl TabbyFlowConfig {
    pub fn mlp(&self, layout: &Layout) -> MlpConfig {
        let d = layout.total_dim();
        MlpConfig {
            input_dim: d,
            hidden: self.hidden.clone(),
            output_dim: d,
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.a_max > 0.0, Param, "a_max must be positive");
        Ok(())
    }
}

/// Posterior network plus its optimizer state.
#[derive(Clone, Debug)]
pub struct TabbyFlow {
    net: Mlp,
    adam: Adam,
    schedule: Schedule,
    layout: Layout,
    config: TabbyFlowConfig,
}

impl TabbyFlow {
    pub fn new(
        layout: Layout,
        schedule: Schedule,
        config: TabbyFlowConfig,
        adam: AdamConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let net = Mlp::new(config.mlp(&layout), rng)?;
        Ok(Self::from_net(net, layout, schedule, config, adam))
    }

    /// Wraps trained parameters; the output width must match the layout.
    pub fn from_parts(net: Mlp, layout: Layout, schedule: Schedule, config: TabbyFlowConfig) -> Result<Self> {
        ensure!(
            net.config() == &config.mlp(&layout),
            Checkpoint,
            "network shape does not match the TabbyFlow configuration"
        );
        schedule.validate()?;
        Ok(Self::from_net(net, layout, schedule, config, AdamConfig::default()))
    }

    fn from_net(net: Mlp, layout: Layout, schedule: Schedule, config: TabbyFlowConfig, adam: AdamConfig) -> Self {
        let adam = Adam::new(&net, adam);
        TabbyFlow {
            net,
            adam,
            schedule,
            layout,
            config,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &TabbyFlowConfig {
        &self.config
    }

    /// Posterior at a common time `t` for every row of `x_t`.
    pub fn posterior(&self, x_t: ArrayView2<f64>, t: f64) -> Result<PosteriorOutput> {
        let ts = vec![t; x_t.nrows()];
        PosteriorOutput::from_logits(self.net.forward(x_t, Some(&ts))?, &self.layout)
    }
}

/// Draws `t ~ U(0, 1 − ε)` per row, then `x0 ~ N(0, I)`, and returns `(x_t, t)`.
pub(crate) fn draw_interpolants(
    schedule: &Schedule,
    x1: ArrayView2<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = x1.nrows();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0 - EPS_T)).collect();
    let mut x_t = Array2::<f64>::zeros(x1.dim());
    for (i, (mut row, x1_row)) in x_t.axis_iter_mut(Axis(0)).zip(x1.axis_iter(Axis(0))).enumerate() {
        let p = schedule.eval(t[i])?;
        for (dst, &v) in row.iter_mut().zip(x1_row) {
            let z: f64 = StandardNormal.sample(rng);
            *dst = p.alpha * v + p.sigma * z;
        }
    }
    Ok((x_t, t))
}

impl Trainable for TabbyFlow {
    fn train_step(&mut self, batch: ArrayView2<f64>, rng: &mut ChaCha8Rng) -> Result<f64> {
        let (x_t, t) = draw_interpolants(&self.schedule, batch, rng)?;
        let (raw, tape) = self.net.forward_tape(x_t.view(), Some(&t))?;
        let (loss, upstream) = tabbyflow_loss_grad(
            raw.view(),
            batch,
            &self.layout,
            &self.schedule,
            &t,
            self.config.variance_mode,
            self.config.a_max,
        )?;
        ensure!(loss.is_finite(), Numerical, "non-finite TabbyFlow loss");
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

impl VectorField for TabbyFlow {
    fn dim(&self) -> usize {
        self.layout.total_dim()
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64, with_score: bool) -> Result<FieldValue> {
        let theta = self.posterior(x, t)?.full();
        field_value(&theta, x, &self.schedule, t, with_score)
    }
}

/// The exact marginal field of an empirical dataset, through its Bayes posterior mean.
#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub dataset: Array2<f64>,
    pub schedule: Schedule,
}

impl ExactPosterior {
    pub fn posterior_mean(&self, x_t: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let mut theta = Array2::zeros(x_t.dim());
        for (mut dst, row) in theta.axis_iter_mut(Axis(0)).zip(x_t.axis_iter(Axis(0))) {
            dst.assign(&self.schedule.posterior_mean(self.dataset.view(), row, t)?);
        }
        Ok(theta)
    }
}

impl VectorField for ExactPosterior {
    fn dim(&self) -> usize {
        self.dataset.ncols()
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64, with_score: bool) -> Result<FieldValue> {
        let theta = self.posterior_mean(x, t)?;
        field_value(&theta, x, &self.schedule, t, with_score)
    }
}
