#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabflow::latent::cfm_loss_grad;
use tabflow::nn::{Mlp, MlpConfig};
use tabflow::tabular::Layout;
use tabflow::vfm::{tabbyflow_loss, tabbyflow_loss_grad, PosteriorOutput, VarianceMode};
use tabflow::Schedule;

pub type Rand = ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: (usize, usize), lo: f64, hi: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// `‖analytic − fd‖ / ‖fd‖` with central differences of step `h`.
pub fn fd_relative_error(params: &[f64], analytic: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut p = params.to_vec();
    let mut num = vec![0.0; p.len()];
    for i in 0..p.len() {
        let o = p[i];
        p[i] = o + h;
        let up = f(&p);
        p[i] = o - h;
        let down = f(&p);
        p[i] = o;
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

/// Random encoded rows: numeric block in `[-2, 2]`, then one-hot blocks.
pub fn encoded_rows(layout: &Layout, n: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut x = Array2::zeros((n, layout.total_dim()));
    for i in 0..n {
        for d in 0..layout.num_dim {
            x[[i, d]] = rng.random_range(-2.0..2.0);
        }
        for &(o, k) in &layout.blocks {
            x[[i, o + rng.random_range(0..k)]] = 1.0;
        }
    }
    x
}

pub fn small_layout() -> Layout {
    Layout {
        num_dim: 2,
        blocks: vec![(2, 3), (5, 2)],
    }
}

/// Relative finite-difference error of the TabbyFlow loss gradient through a small net.
pub fn tabbyflow_grad_error(mode: VarianceMode, schedule: Schedule, seed: u64) -> f64 {
    let layout = small_layout();
    let d = layout.total_dim();
    let mut r = rng(seed);
    let cfg = MlpConfig {
        input_dim: d,
        hidden: vec![16, 32],
        output_dim: d,
        time_embed_dim: 8,
    };
    let net = Mlp::new(cfg.clone(), &mut r).unwrap();
    let n = 6;
    let x1 = encoded_rows(&layout, n, &mut r);
    let x_t = uniform((n, d), -1.5, 1.5, &mut r);
    let t: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.9)).collect();
    let a_max = 1e3;

    let (raw, tape) = net.forward_tape(x_t.view(), Some(&t)).unwrap();
    let (_, upstream) = tabbyflow_loss_grad(raw.view(), x1.view(), &layout, &schedule, &t, mode, a_max).unwrap();
    let (grads, _) = net.backward(&tape, upstream.view(), false).unwrap();

    let loss = |p: &[f64]| {
        let net = Mlp::from_params(cfg.clone(), p).unwrap();
        let raw = net.forward(x_t.view(), Some(&t)).unwrap();
        let out = PosteriorOutput::from_logits(raw, &layout).unwrap();
        tabbyflow_loss(&out, x1.view(), &layout, &schedule, &t, mode, a_max).unwrap()
    };
    fd_relative_error(&net.params_flat(), &grads.flatten(), 1e-6, loss)
}

/// Relative finite-difference error of the CFM loss gradient through a small net.
pub fn cfm_grad_error(schedule: Schedule, seed: u64) -> f64 {
    let l = 4;
    let mut r = rng(seed);
    let cfg = MlpConfig {
        input_dim: l,
        hidden: vec![32, 32],
        output_dim: l,
        time_embed_dim: 8,
    };
    let net = Mlp::new(cfg.clone(), &mut r).unwrap();
    let n = 6;
    let z1 = uniform((n, l), -2.0, 2.0, &mut r);
    let z0 = uniform((n, l), -2.0, 2.0, &mut r);
    let t: Vec<f64> = (0..n).map(|_| r.random_range(0.05..0.9)).collect();
    let mut x_t = Array2::zeros((n, l));
    let mut u = Array2::zeros((n, l));
    for (i, &ti) in t.iter().enumerate() {
        let xt = schedule.interpolate(z0.row(i), z1.row(i), ti).unwrap();
        u.row_mut(i).assign(&schedule.cond_velocity(xt.view(), z1.row(i), ti).unwrap());
        x_t.row_mut(i).assign(&xt);
    }
    let (pred, tape) = net.forward_tape(x_t.view(), Some(&t)).unwrap();
    let (_, upstream) = cfm_loss_grad(pred.view(), u.view()).unwrap();
    let (grads, _) = net.backward(&tape, upstream.view(), false).unwrap();
    let loss = |p: &[f64]| {
        let net = Mlp::from_params(cfg.clone(), p).unwrap();
        let pred = net.forward(x_t.view(), Some(&t)).unwrap();
        let diff = &pred - &u;
        diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64
    };
    fd_relative_error(&net.params_flat(), &grads.flatten(), 1e-6, loss)
}

/// Largest per-column total variation between the category frequencies of two tables.
pub fn max_marginal_tv(a: &tabflow::DataTable, b: &tabflow::DataTable) -> f64 {
    let mut worst: f64 = 0.0;
    for (c, col) in a.schema().columns.iter().enumerate() {
        if !col.is_categorical() {
            continue;
        }
        let k = col.categories.len();
        let freq = |t: &tabflow::DataTable| {
            let codes = t.categorical(c).unwrap();
            let mut f = vec![0.0; k];
            for &x in codes {
                f[x as usize] += 1.0 / codes.len() as f64;
            }
            f
        };
        let (fa, fb) = (freq(a), freq(b));
        let tv = 0.5 * fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}
