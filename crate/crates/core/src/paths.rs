//! Probability paths `x_t = α(t)·x1 + σ(t)·x0` with data at `t = 1` and noise
//! at `t = 0`, their time derivatives, and the conditional velocity
//! `u(x_t | x1) = A(t)·x1 + B(t)·x_t` with `A = α̇ − (σ̇/σ)·α`, `B = σ̇/σ`.

use std::f64::consts::FRAC_PI_2;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Training times are drawn from `Uniform(0, 1 − EPS_T)` to stay clear of `σ → 0`.
pub const EPS_T: f64 = 1e-3;

/// Largest dataset accepted by the brute-force mixture oracles.
pub const ORACLE_MAX_ROWS: usize = 1024;

const ENDPOINT_TOL: f64 = 1e-6;

fn default_ot_sigma_min() -> f64 {
    1e-4
}
fn default_beta_min() -> f64 {
    0.1
}
fn default_beta_max() -> f64 {
    20.0
}
fn default_ve_sigma_min() -> f64 {
    0.01
}
fn default_ve_sigma_max() -> f64 {
    50.0
}
fn default_mu() -> f64 {
    3f64.ln()
}
fn default_one() -> f64 {
    1.0
}

/// An interpolation schedule. Serialized as `{"kind": "ot", "sigma_min": 1e-4}` etc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// Straight-line path `α = t`, `σ = 1 − (1 − σ_min)·t`.
    Ot {
        #[serde(default = "default_ot_sigma_min")]
        sigma_min: f64,
    },
    /// Variance preserving: `α = exp(−½·∫₀^{1−t} β)`, `σ = √(1 − α²)`, `β` linear in time.
    Vp {
        #[serde(default = "default_beta_min")]
        beta_min: f64,
        #[serde(default = "default_beta_max")]
        beta_max: f64,
    },
    /// Variance exploding: `α = 1`, `σ = σ_max·(σ_min/σ_max)^t`.
    Ve {
        #[serde(default = "default_ve_sigma_min")]
        sigma_min: f64,
        #[serde(default = "default_ve_sigma_max")]
        sigma_max: f64,
    },
    /// `α = sin(πt/2)`, `σ = cos(πt/2)`.
    Cosine,
    /// `α = e^μ / (e^μ + (1/(ct) − 1)^λ)`, `σ = 1 − α`.
    LogitNormal {
        #[serde(default = "default_mu")]
        mu: f64,
        #[serde(default = "default_one")]
        lambda: f64,
        #[serde(default = "default_one")]
        c: f64,
    },
}

/// Path coefficients and their time derivatives at one time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub dalpha: f64,
    pub dsigma: f64,
}

impl PathPoint {
    /// `(A, B)` of the conditional velocity.
    pub fn coefficients(&self) -> Result<(f64, f64)> {
        ensure!(self.sigma > 0.0, Numerical, "sigma({}) = 0: conditional velocity undefined", self.t);
        let b = self.dsigma / self.sigma;
        Ok((self.dalpha - b * self.alpha, b))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::ot()
    }
}

impl Schedule {
    pub fn ot() -> Self {
        Schedule::Ot {
            sigma_min: default_ot_sigma_min(),
        }
    }

    pub fn vp() -> Self {
        Schedule::Vp {
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        }
    }

    pub fn ve() -> Self {
        Schedule::Ve {
            sigma_min: default_ve_sigma_min(),
            sigma_max: default_ve_sigma_max(),
        }
    }

    pub fn logit_normal() -> Self {
        Schedule::LogitNormal {
            mu: default_mu(),
            lambda: 1.0,
            c: 1.0,
        }
    }

    /// The five schedules with default parameters.
    pub fn all_defaults() -> [Schedule; 5] {
        [Schedule::ot(), Schedule::vp(), Schedule::ve(), Schedule::Cosine, Schedule::logit_normal()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::Ot { .. } => "ot",
            Schedule::Vp { .. } => "vp",
            Schedule::Ve { .. } => "ve",
            Schedule::Cosine => "cosine",
            Schedule::LogitNormal { .. } => "logit_normal",
        }
    }

    /// Default-parameter schedule by name.
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(match name {
            "ot" | "linear" => Schedule::ot(),
            "vp" => Schedule::vp(),
            "ve" => Schedule::ve(),
            "cosine" | "cos" => Schedule::Cosine,
            "logit_normal" | "logit-normal" | "logit" => Schedule::logit_normal(),
            other => return Err(Error::Param(format!("unknown schedule '{other}'"))),
        })
    }

    /// Noise floor at `t = 1` (zero for variants without a `σ_min`).
    pub fn sigma_min(&self) -> f64 {
        match *self {
            Schedule::Ot { sigma_min } | Schedule::Ve { sigma_min, .. } => sigma_min,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Schedule::Ot { sigma_min } => {
                ensure!(
                    (0.0..1.0).contains(&sigma_min),
                    Param,
                    "ot sigma_min must lie in [0, 1), got {sigma_min}"
                )
            }
            Schedule::Vp { beta_min, beta_max } => ensure!(
                beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite(),
                Param,
                "vp needs 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            ),
            Schedule::Ve { sigma_min, sigma_max } => ensure!(
                sigma_min > 0.0 && sigma_max > sigma_min && sigma_max.is_finite(),
                Param,
                "ve needs 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})"
            ),
            Schedule::Cosine => {}
            Schedule::LogitNormal { mu, lambda, c } => ensure!(
                mu.is_finite() && lambda > 0.0 && c > 0.0 && lambda.is_finite() && c.is_finite(),
                Param,
                "logit-normal needs finite mu, lambda > 0, c > 0"
            ),
        }
        let end = self.point(1.0);
        let alpha_ok = match self {
            Schedule::Ve { .. } => end.alpha == 1.0,
            _ => end.alpha >= 1.0 - ENDPOINT_TOL && end.alpha <= 1.0,
        };
        ensure!(
            alpha_ok && end.sigma <= self.sigma_min() + ENDPOINT_TOL,
            Param,
            "{} schedule does not reach the data endpoint at t = 1 (alpha = {}, sigma = {})",
            self.name(),
            end.alpha,
            end.sigma
        );
        Ok(())
    }

    /// Closed-form `α, σ, α̇, σ̇` without range checks.
    fn point(&self, t: f64) -> PathPoint {
        let (alpha, sigma, dalpha, dsigma) = match *self {
            Schedule::Ot { sigma_min } => {
                let slope = 1.0 - sigma_min;
                (t, 1.0 - slope * t, 1.0, -slope)
            }
            Schedule::Vp { beta_min, beta_max } => {
                // T(t) = ∫₀^{1−t} β(s) ds, so dT/dt = −β(1 − t).
                let u = 1.0 - t;
                let integral = beta_min * u + 0.5 * (beta_max - beta_min) * u * u;
                let beta_u = beta_min + u * (beta_max - beta_min);
                let alpha = (-0.5 * integral).exp();
                let sigma = (-(-integral).exp_m1()).sqrt();
                let dalpha = 0.5 * beta_u * alpha;
                let dsigma = if sigma > 0.0 {
                    -alpha * dalpha / sigma
                } else {
                    f64::NEG_INFINITY
                };
                (alpha, sigma, dalpha, dsigma)
            }
            Schedule::Ve { sigma_min, sigma_max } => {
                let ratio = sigma_min / sigma_max;
                let sigma = sigma_max * ratio.powf(t);
                (1.0, sigma, 0.0, sigma * ratio.ln())
            }
            Schedule::Cosine => {
                let (s, c) = (FRAC_PI_2 * t).sin_cos();
                (s, c, FRAC_PI_2 * c, -FRAC_PI_2 * s)
            }
            Schedule::LogitNormal { mu, lambda, c } => {
                // α = a/(a+b) with a = e^μ (ct)^λ, b = (1 − ct)^λ, which stays finite at t = 0.
                let ct = c * t;
                let rest = (1.0 - ct).max(0.0);
                let e_mu = mu.exp();
                let a = e_mu * ct.powf(lambda);
                let b = rest.powf(lambda);
                let da = lambda * c * e_mu * ct.powf(lambda - 1.0);
                let db = if rest > 0.0 || lambda >= 1.0 {
                    -lambda * c * rest.powf(lambda - 1.0)
                } else {
                    0.0
                };
                let sum = a + b;
                let dalpha = (da * b - a * db) / (sum * sum);
                (a / sum, b / sum, dalpha, -dalpha)
            }
        };
        PathPoint {
            t,
            alpha,
            sigma,
            dalpha,
            dsigma,
        }
    }

    /// `α, σ, α̇, σ̇` at `t ∈ [0, 1]`.
    pub fn eval(&self, t: f64) -> Result<PathPoint> {
        ensure!((0.0..=1.0).contains(&t), Param, "t = {t} outside [0, 1]");
        let p = self.point(t);
        if t <= 1.0 - EPS_T {
            ensure!(
                p.sigma > 0.0,
                Numerical,
                "{} schedule: sigma underflows to 0 at t = {t}",
                self.name()
            );
            ensure!(
                [p.alpha, p.sigma, p.dalpha, p.dsigma].iter().all(|v| v.is_finite()),
                Numerical,
                "{} schedule: non-finite path value at t = {t}",
                self.name()
            );
        }
        Ok(p)
    }

    /// `(A, B)` such that `u(x_t | x1) = A·x1 + B·x_t`.
    pub fn coefficients(&self, t: f64) -> Result<(f64, f64)> {
        self.eval(t)?.coefficients()
    }

    /// `α_t·x1 + σ_t·x0`.
    pub fn interpolate(&self, x0: ArrayView1<f64>, x1: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        ensure!(x0.len() == x1.len(), Shape, "x0 has {} dims, x1 has {}", x0.len(), x1.len());
        let p = self.eval(t)?;
        Ok(&x1 * p.alpha + &x0 * p.sigma)
    }

    /// Conditional velocity toward the fixed endpoint `x1`.
    pub fn cond_velocity(&self, x_t: ArrayView1<f64>, x1: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        ensure!(x_t.len() == x1.len(), Shape, "x_t has {} dims, x1 has {}", x_t.len(), x1.len());
        let (a, b) = self.coefficients(t)?;
        Ok(&x1 * a + &x_t * b)
    }

    /// Normalized Bayes weights `w_i ∝ N(x_t; α_t·x1_i, σ_t² I)` over the rows of `dataset`.
    pub fn posterior_weights(&self, dataset: ArrayView2<f64>, x_t: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        ensure!(dataset.nrows() > 0, Data, "oracle dataset is empty");
        ensure!(
            dataset.nrows() <= ORACLE_MAX_ROWS,
            Param,
            "oracle dataset has {} rows (limit {ORACLE_MAX_ROWS})",
            dataset.nrows()
        );
        ensure!(
            dataset.ncols() == x_t.len(),
            Shape,
            "dataset width {} != x_t width {}",
            dataset.ncols(),
            x_t.len()
        );
        let p = self.eval(t)?;
        ensure!(p.sigma > 0.0, Numerical, "sigma({t}) = 0");
        let inv_two_var = 0.5 / (p.sigma * p.sigma);
        let log_w: Array1<f64> = dataset
            .rows()
            .into_iter()
            .map(|x1| {
                -x1.iter()
                    .zip(x_t.iter())
                    .map(|(a, b)| (b - p.alpha * a).powi(2))
                    .sum::<f64>()
                    * inv_two_var
            })
            .collect();
        let max = log_w.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        ensure!(max.is_finite(), Numerical, "all posterior weights underflow at t = {t}");
        let w = log_w.mapv(|v| (v - max).exp());
        let total = w.sum();
        Ok(w / total)
    }

    /// Exact posterior mean `E[x1 | x_t]` under the empirical data distribution.
    pub fn posterior_mean(&self, dataset: ArrayView2<f64>, x_t: ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        let w = self.posterior_weights(dataset, x_t, t)?;
        Ok(w.dot(&dataset))
    }

    /// Exact marginal velocity: the posterior-weighted mixture of conditional
    /// velocities over every dataset row. Intended as a test oracle.
    pub fn marginal_velocity_oracle(
        &self,
        dataset: ArrayView2<f64>,
        x_t: ArrayView1<f64>,
        t: f64,
    ) -> Result<Array1<f64>> {
        let w = self.posterior_weights(dataset, x_t, t)?;
        let mut v = Array1::<f64>::zeros(x_t.len());
        for (wi, x1) in w.iter().zip(dataset.rows()) {
            v.scaled_add(*wi, &self.cond_velocity(x_t, x1, t)?);
        }
        Ok(v)
    }
}
