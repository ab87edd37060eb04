//! Dense SiLU network with sinusoidal time conditioning and hand-written
//! reverse-mode gradients.

mod adam;

pub use adam::{Adam, AdamConfig};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::par;

const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Width of the data part of the input.
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Width of the sinusoidal time embedding appended to the input; 0 disables time conditioning.
    pub time_embed_dim: usize,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0 && self.output_dim > 0, Param, "network input and output widths must be positive");
        ensure!(self.hidden.iter().all(|&h| h > 0), Param, "hidden widths must be positive");
        ensure!(self.time_embed_dim.is_multiple_of(2), Param, "time embedding width must be even");
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim + self.time_embed_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// One affine layer, `y = x·W + b` with `W` of shape `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    config: MlpConfig,
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_tape`] for the matching backward pass.
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Parameter gradients, shaped like the network layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

/// Sinusoidal embedding of `t`: `[sin(ω_k·s·t)…, cos(ω_k·s·t)…]` with
/// geometrically spaced `ω_k` and `s = 1000`.
pub fn time_embedding(t: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (mut row, &ti) in out.rows_mut().into_iter().zip(t) {
        for k in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp();
            let angle = TIME_SCALE * ti * freq;
            row[k] = angle.sin();
            row[half + k] = angle.cos();
        }
    }
    out
}

impl Mlp {
    /// Hidden layers use uniform fan-in initialization; the output layer starts at zero.
    pub fn new(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut layer = Dense::zeros(w[0], w[1]);
                if i + 1 < n_layers {
                    let bound = 1.0 / (w[0] as f64).sqrt();
                    layer.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
                    layer.bias.mapv_inplace(|_| rng.random_range(-bound..bound));
                }
                layer
            })
            .collect();
        Ok(Mlp { config, layers })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        ensure!(
            params.len() == self.config.n_params(),
            Checkpoint,
            "parameter vector has {} entries, network expects {}",
            params.len(),
            self.config.n_params()
        );
        ensure!(params.iter().all(|p| p.is_finite()), Checkpoint, "non-finite parameter");
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn from_params(config: MlpConfig, params: &[f64]) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let layers = widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        let mut mlp = Mlp { config, layers };
        mlp.set_params_flat(params)?;
        Ok(mlp)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    fn assemble_input(&self, x: ArrayView2<f64>, t: Option<&[f64]>) -> Result<Array2<f64>> {
        let n = x.nrows();
        ensure!(
            x.ncols() == self.config.input_dim,
            Shape,
            "input width {} != network input width {}",
            x.ncols(),
            self.config.input_dim
        );
        ensure!(x.iter().all(|v| v.is_finite()), Data, "non-finite network input");
        let e = self.config.time_embed_dim;
        if e == 0 {
            return Ok(x.to_owned());
        }
        let t = t.ok_or_else(|| Error::Param("time-conditioned network needs t".into()))?;
        ensure!(t.len() == n, Shape, "{} time values for {n} rows", t.len());
        ensure!(
            t.iter().all(|v| (0.0..=1.0).contains(v)),
            Param,
            "network time input outside [0, 1]"
        );
        let mut h = Array2::zeros((n, self.config.input_dim + e));
        h.slice_mut(s![.., ..self.config.input_dim]).assign(&x);
        h.slice_mut(s![.., self.config.input_dim..]).assign(&time_embedding(t, e));
        Ok(h)
    }

    fn affine(layer: &Dense, h: &Array2<f64>) -> Array2<f64> {
        let mut z = par::matmul(&h.view(), &layer.weight.view());
        z += &layer.bias;
        z
    }

    /// Inference forward pass.
    pub fn forward(&self, x: ArrayView2<f64>, t: Option<&[f64]>) -> Result<Array2<f64>> {
        let mut h = self.assemble_input(x, t)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &h);
            if i < last {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass that records the activations needed by [`Mlp::backward`].
    pub fn forward_tape(&self, x: ArrayView2<f64>, t: Option<&[f64]>) -> Result<(Array2<f64>, Tape)> {
        let mut h = self.assemble_input(x, t)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        for (i, layer) in self.layers.iter().enumerate() {
            let z = Self::affine(layer, &h);
            inputs.push(h);
            if i < last {
                h = z.mapv(silu);
                pre_activations.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, Tape { inputs, pre_activations }))
    }

    /// Gradients of a scalar loss given `upstream = ∂loss/∂output`. When
    /// `input_grad` is set, also returns `∂loss/∂x` for the data part of the input.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: ArrayView2<f64>,
        input_grad: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        ensure!(
            tape.inputs.len() == self.layers.len(),
            Shape,
            "tape was recorded on a different network"
        );
        ensure!(
            upstream.dim() == (tape.batch_size(), self.config.output_dim),
            Shape,
            "upstream gradient shape {:?} does not match the recorded batch ({}, {})",
            upstream.dim(),
            tape.batch_size(),
            self.config.output_dim
        );
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        let mut x_grad = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            grads.push(Dense {
                weight: par::matmul_tn(&input.view(), &delta.view()),
                bias: par::col_sums(&delta.view()),
            });
            if i > 0 {
                let mut back = par::matmul(&delta.view(), &layer.weight.t());
                Zip::from(&mut back)
                    .and(&tape.pre_activations[i - 1])
                    .for_each(|d, &z| *d *= silu_grad(z));
                delta = back;
            } else if input_grad {
                let w_data = layer.weight.slice(s![..self.config.input_dim, ..]);
                x_grad = Some(par::matmul(&delta.view(), &w_data.t()));
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, x_grad))
    }
}

/// Row-wise softmax over each `(offset, size)` block of columns, in place.
pub fn softmax_blocks(values: &mut Array2<f64>, blocks: &[(usize, usize)]) {
    for &(offset, size) in blocks {
        for mut row in values.slice_mut(s![.., offset..offset + size]).axis_iter_mut(Axis(0)) {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64, embed: usize) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MlpConfig {
            input_dim: 3,
            hidden: vec![8, 6],
            output_dim: 4,
            time_embed_dim: embed,
        };
        let mut net = Mlp::new(cfg, &mut rng).unwrap();
        // Non-zero output layer so gradients flow everywhere.
        let last = net.layers.len() - 1;
        net.layers[last].weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        net.layers[last].bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        net
    }

    fn inputs(n: usize) -> (Array2<f64>, Vec<f64>) {
        let x = Array::from_shape_fn((n, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let t = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        (x, t)
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MlpConfig {
            input_dim: 3,
            hidden: vec![16, 16],
            output_dim: 5,
            time_embed_dim: 8,
        };
        let net = Mlp::new(cfg, &mut rng).unwrap();
        let (x, t) = inputs(7);
        assert!(net.forward(x.view(), Some(&t)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_rows_identical_outputs() {
        let net = small_net(2, 4);
        let row = Array::from_shape_vec((1, 3), vec![0.3, -0.2, 1.1]).unwrap();
        let x = Array::from_shape_fn((300, 3), |(_, j)| row[[0, j]]);
        let out = net.forward(x.view(), Some(&vec![0.25; 300])).unwrap();
        let single = net.forward(row.view(), Some(&[0.25])).unwrap();
        for r in out.rows() {
            assert_eq!(r, single.row(0));
        }
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = small_net(3, 4);
        let (x, t) = inputs(4);
        assert!(net.forward(x.slice(s![.., ..2]), Some(&t)).is_err());
        assert!(net.forward(x.view(), Some(&t[..3])).is_err());
        assert!(net.forward(x.view(), None).is_err());
        let mut bad = x.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(net.forward(bad.view(), Some(&t)).is_err());
    }

    #[test]
    fn tape_matches_forward() {
        let net = small_net(4, 4);
        let (x, t) = inputs(5);
        let (y, _) = net.forward_tape(x.view(), Some(&t)).unwrap();
        assert_eq!(y, net.forward(x.view(), Some(&t)).unwrap());
    }

    fn loss(net: &Mlp, x: &Array2<f64>, t: &[f64], target: &Array2<f64>) -> f64 {
        let y = net.forward(x.view(), Some(t)).unwrap();
        0.5 * (&y - target).mapv(|d| d * d).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut net = small_net(5, 4);
        let (x, t) = inputs(6);
        let target = Array::from_shape_fn((6, 4), |(i, j)| ((i + 2 * j) as f64).cos());
        let (y, tape) = net.forward_tape(x.view(), Some(&t)).unwrap();
        let (grads, xg) = net.backward(&tape, (&y - &target).view(), true).unwrap();
        let analytic = grads.flatten();
        let mut params = net.params_flat();
        let h = 1e-4;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            net.set_params_flat(&params).unwrap();
            let up = loss(&net, &x, &t, &target);
            params[i] = orig - h;
            net.set_params_flat(&params).unwrap();
            let down = loss(&net, &x, &t, &target);
            params[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-4, "param {i}: analytic {} numeric {numeric}", analytic[i]);
        }
        net.set_params_flat(&params).unwrap();
        let xg = xg.unwrap();
        for (r, c) in [(0, 0), (3, 2), (5, 1)] {
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let up = loss(&net, &xp, &t, &target);
            xp[[r, c]] -= 2.0 * h;
            let down = loss(&net, &xp, &t, &target);
            let numeric = (up - down) / (2.0 * h);
            assert!((numeric - xg[[r, c]]).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let net = small_net(6, 0);
        let (x, _) = inputs(5);
        let (y, tape) = net.forward_tape(x.view(), None).unwrap();
        let (g1, _) = net.backward(&tape, y.view(), false).unwrap();
        let (g2, _) = net.backward(&tape, (&y * 2.0).view(), false).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let (g0, _) = net.backward(&tape, Array2::zeros(y.dim()).view(), false).unwrap();
        assert!(g0.flatten().iter().all(|&v| v == 0.0));
        assert!(net.backward(&tape, Array2::zeros((2, 4)).view(), false).is_err());
    }

    #[test]
    fn flat_params_roundtrip() {
        let net = small_net(7, 4);
        let rebuilt = Mlp::from_params(net.config().clone(), &net.params_flat()).unwrap();
        assert_eq!(rebuilt, net);
        assert!(Mlp::from_params(net.config().clone(), &[0.0; 3]).is_err());
    }

    #[test]
    fn softmax_blocks_normalize() {
        let mut v = Array::from_shape_fn((3, 5), |(i, j)| (i * j) as f64 - 2.0);
        softmax_blocks(&mut v, &[(0, 2), (2, 3)]);
        for r in v.rows() {
            assert!((r.slice(s![..2]).sum() - 1.0).abs() < 1e-12);
            assert!((r.slice(s![2..]).sum() - 1.0).abs() < 1e-12);
        }
    }
}
