//! Euler ODE and Euler–Maruyama SDE integration of learned fields from noise
//! at `t = 0` toward data.
//!
//! Each row owns a noise stream seeded from `(seed, global row index)`, so
//! output does not depend on thread count or on how rows are chunked.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, ArrayViewMut1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::paths::Schedule;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Velocity (and optionally score) at time `t` for each row of `x`.
#[derive(Clone, Debug)]
pub struct FieldValue {
    pub velocity: Array2<f64>,
    pub score: Option<Array2<f64>>,
}

/// A learned or exact generative field over `dim`-dimensional states.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn schedule(&self) -> Schedule;

    fn evaluate(&self, x: ArrayView2<f64>, t: f64, with_score: bool) -> Result<FieldValue>;

    /// Scale of the initial Gaussian draw, `σ(0)` of the field's path.
    fn prior_std(&self) -> f64 {
        self.schedule().eval(0.0).map(|p| p.sigma).unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dynamics {
    Ode,
    Sde,
}

impl FromStr for Dynamics {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(Dynamics::Ode),
            "sde" => Ok(Dynamics::Sde),
            other => Err(Error::Param(format!("unknown dynamics '{other}' (expected ode|sde)"))),
        }
    }
}

/// Diffusion coefficient `g_t` of the stochastic sampler.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GSpec {
    Zero,
    /// `σ(t)` of the field's own schedule.
    SigmaOfModel,
    /// `σ(t)` of a named schedule with default parameters.
    SigmaOf(Schedule),
}

impl GSpec {
    pub fn at(&self, model: &Schedule, t: f64) -> Result<f64> {
        Ok(match self {
            GSpec::Zero => 0.0,
            GSpec::SigmaOfModel => model.eval(t)?.sigma,
            GSpec::SigmaOf(s) => s.eval(t)?.sigma,
        })
    }
}

impl fmt::Display for GSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GSpec::Zero => write!(f, "zero"),
            GSpec::SigmaOfModel => write!(f, "sigma"),
            GSpec::SigmaOf(s) => write!(f, "sigma:{}", s.name()),
        }
    }
}

impl FromStr for GSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(GSpec::Zero),
            "sigma" => Ok(GSpec::SigmaOfModel),
            _ => match s.strip_prefix("sigma:") {
                Some(name) => Ok(GSpec::SigmaOf(Schedule::by_name(name)?)),
                None => Err(Error::Param(format!("unknown g spec '{s}' (expected zero|sigma|sigma:<path>)"))),
            },
        }
    }
}

impl TryFrom<String> for GSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GSpec> for String {
    fn from(g: GSpec) -> String {
        g.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleRun {
    /// Euler steps, equal to the number of field evaluations.
    pub steps: usize,
    pub t_end: f64,
    pub dynamics: Dynamics,
    pub g: GSpec,
    /// Per-coordinate bound on the velocity.
    pub clip_m: Option<f64>,
    pub seed: u64,
}

impl Default for SampleRun {
    fn default() -> Self {
        SampleRun {
            steps: 100,
            t_end: 1.0,
            dynamics: Dynamics::Ode,
            g: GSpec::SigmaOfModel,
            clip_m: None,
            seed: 0,
        }
    }
}

impl SampleRun {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, Param, "steps must be at least 1");
        ensure!(
            self.t_end > 0.0 && self.t_end <= 1.0,
            Param,
            "t_end must lie in (0, 1], got {}",
            self.t_end
        );
        if let Some(m) = self.clip_m {
            ensure!(m > 0.0, Param, "clip_m must be positive, got {m}");
        }
        Ok(())
    }
}

/// Generated states plus the number of field evaluations spent.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub values: Array2<f64>,
    pub nfe: usize,
}

fn row_streams(seed: u64, rows: std::ops::Range<usize>) -> Vec<ChaCha8Rng> {
    rows.map(|r| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        rng
    })
    .collect()
}

fn for_each_row_with<F>(x: &mut Array2<f64>, streams: &mut [ChaCha8Rng], f: F)
where
    F: Fn(usize, ArrayViewMut1<f64>, &mut ChaCha8Rng) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if crate::par::is_parallel() {
        x.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(streams.par_iter_mut())
            .enumerate()
            .for_each(|(i, (row, rng))| f(i, row, rng));
        return;
    }
    for (i, (row, rng)) in x.axis_iter_mut(Axis(0)).zip(streams.iter_mut()).enumerate() {
        f(i, row, rng);
    }
}

fn initial_state(field: &dyn VectorField, streams: &mut [ChaCha8Rng]) -> Array2<f64> {
    let scale = field.prior_std();
    let mut x = Array2::zeros((streams.len(), field.dim()));
    for_each_row_with(&mut x, streams, |_, mut row, rng| {
        row.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        });
    });
    x
}

fn clip(v: &mut Array2<f64>, m: Option<f64>) {
    if let Some(m) = m {
        v.mapv_inplace(|x| x.clamp(-m, m));
    }
}

fn check_finite(x: &Array2<f64>, step: usize) -> Result<()> {
    ensure!(
        x.iter().all(|v| v.is_finite()),
        Numerical,
        "non-finite sampler state after step {step}"
    );
    Ok(())
}

struct Integrator<'a> {
    field: &'a dyn VectorField,
    schedule: Schedule,
    run: &'a SampleRun,
    nfe: usize,
}

impl Integrator<'_> {
    /// Drift at `(x, t)`: clipped velocity, plus the score term when `g > 0`.
    fn drift(&mut self, x: &Array2<f64>, t: f64, g: f64) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let stochastic = self.run.dynamics == Dynamics::Sde && g > 0.0;
        let value = self.field.evaluate(x.view(), t, stochastic)?;
        self.nfe += 1;
        let mut v = value.velocity;
        ensure!(v.dim() == x.dim(), Shape, "field returned shape {:?} for state {:?}", v.dim(), x.dim());
        clip(&mut v, self.run.clip_m);
        if !stochastic {
            return Ok((v, None));
        }
        let score = value
            .score
            .ok_or_else(|| Error::Param("field does not provide a score for SDE sampling".into()))?;
        let mut drift = v.clone();
        drift.scaled_add(0.5 * g * g, &score);
        Ok((v, Some(drift)))
    }

    fn g_at(&self, t: f64, last: bool) -> Result<f64> {
        if last || self.run.dynamics == Dynamics::Ode {
            return Ok(0.0);
        }
        self.run.g.at(&self.schedule, t)
    }

    /// `x ← x + Δ·drift + g·√Δ·ξ`, or `x ← x + Δ·v` when the step is deterministic.
    fn advance(
        x: &mut Array2<f64>,
        v: &Array2<f64>,
        drift: Option<&Array2<f64>>,
        dt: f64,
        g: f64,
        streams: &mut [ChaCha8Rng],
    ) {
        match drift {
            None => x.scaled_add(dt, v),
            Some(drift) => {
                x.scaled_add(dt, drift);
                let noise_scale = g * dt.sqrt();
                for_each_row_with(x, streams, |_, mut row, rng| {
                    row.mapv_inplace(|xi| {
                        let z: f64 = StandardNormal.sample(rng);
                        xi + noise_scale * z
                    });
                });
            }
        }
    }
}

/// Integrates `rows` (global row indices, for noise streams) from `t = 0` to `run.t_end`.
pub fn sample_rows(field: &dyn VectorField, rows: std::ops::Range<usize>, run: &SampleRun) -> Result<Samples> {
    run.validate()?;
    let mut streams = row_streams(run.seed, rows);
    let mut x = initial_state(field, &mut streams);
    let mut it = Integrator {
        field,
        schedule: field.schedule(),
        run,
        nfe: 0,
    };
    if x.nrows() == 0 {
        return Ok(Samples { values: x, nfe: 0 });
    }
    let dt = run.t_end / run.steps as f64;
    for i in 0..run.steps {
        let t = i as f64 * dt;
        let g = it.g_at(t, i + 1 == run.steps)?;
        let (v, drift) = it.drift(&x, t, g)?;
        Integrator::advance(&mut x, &v, drift.as_ref(), dt, g, &mut streams);
        check_finite(&x, i)?;
    }
    Ok(Samples { values: x, nfe: it.nfe })
}

/// Runs the configured dynamics for `n` rows.
pub fn sample(field: &dyn VectorField, n: usize, run: &SampleRun) -> Result<Samples> {
    sample_rows(field, 0..n, run)
}

/// Deterministic Euler integration.
pub fn sample_ode(field: &dyn VectorField, n: usize, run: &SampleRun) -> Result<Samples> {
    ensure!(run.dynamics == Dynamics::Ode, Param, "sample_ode needs dynamics = ode");
    sample(field, n, run)
}

/// Euler–Maruyama integration; the final step is deterministic.
pub fn sample_sde(field: &dyn VectorField, n: usize, run: &SampleRun) -> Result<Samples> {
    ensure!(run.dynamics == Dynamics::Sde, Param, "sample_sde needs dynamics = sde");
    sample(field, n, run)
}

/// Samples at several terminal times along one shared trajectory.
///
/// The step size is `1 / run.steps` regardless of the grid. A terminal time
/// between grid points is reached by a shortened deterministic step from the
/// last grid point, so every snapshot is a truncation of the same paired
/// trajectory. Returns one batch per grid value, in grid order; each batch's
/// `nfe` counts the evaluations needed to reach it.
pub fn early_stop_sweep(field: &dyn VectorField, n: usize, grid: &[f64], run: &SampleRun) -> Result<Vec<Samples>> {
    run.validate()?;
    ensure!(!grid.is_empty(), Param, "empty t_end grid");
    for &t in grid {
        ensure!(t > 0.0 && t <= 1.0, Param, "grid value {t} outside (0, 1]");
    }
    let dt = 1.0 / run.steps as f64;
    let t_max = grid.iter().cloned().fold(0.0, f64::max);
    let total_steps = ((t_max / dt) - 1e-9).ceil().max(1.0) as usize;

    let mut streams = row_streams(run.seed, 0..n);
    let mut x = initial_state(field, &mut streams);
    let mut it = Integrator {
        field,
        schedule: field.schedule(),
        run,
        nfe: 0,
    };
    let mut out: Vec<Option<Samples>> = vec![None; grid.len()];
    if n == 0 {
        return Ok(grid
            .iter()
            .map(|_| Samples {
                values: x.clone(),
                nfe: 0,
            })
            .collect());
    }
    for i in 0..total_steps {
        let t = i as f64 * dt;
        let t_next = (i + 1) as f64 * dt;
        let g = it.g_at(t, i + 1 == total_steps)?;
        let (v, drift) = it.drift(&x, t, g)?;
        for (slot, &t_end) in out.iter_mut().zip(grid) {
            if slot.is_none() && t_end <= t_next + 1e-12 {
                let h = if (t_end - t_next).abs() <= 1e-12 { dt } else { t_end - t };
                let mut snap = x.clone();
                snap.scaled_add(h, &v);
                check_finite(&snap, i)?;
                *slot = Some(Samples {
                    values: snap,
                    nfe: it.nfe,
                });
            }
        }
        Integrator::advance(&mut x, &v, drift.as_ref(), dt, g, &mut streams);
        check_finite(&x, i)?;
    }
    Ok(out.into_iter().map(|s| s.expect("every grid value reached")).collect())
}

/// Samples `n` rows through `field` in chunks, mapping each chunk through
/// `post`. Returns the concatenated rows and the evaluations per trajectory.
pub fn sample_chunked(
    field: &dyn VectorField,
    n: usize,
    run: &SampleRun,
    chunk: usize,
    post: impl Fn(Array2<f64>) -> Result<Array2<f64>>,
) -> Result<(Array2<f64>, usize)> {
    ensure!(chunk >= 1, Param, "chunk size must be positive");
    let mut parts = Vec::new();
    let mut nfe = 0;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let Samples { values, nfe: k } = sample_rows(field, start..end, run)?;
        nfe = k;
        parts.push(post(values)?);
        start = end;
    }
    if parts.is_empty() {
        let empty = post(Array2::zeros((0, field.dim())))?;
        return Ok((empty, 0));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok((concatenate(Axis(0), &views).expect("chunks share width"), nfe))
}

/// Field that is identically zero; useful as a baseline.
#[derive(Clone, Debug)]
pub struct ZeroField {
    pub dim: usize,
    pub schedule: Schedule,
}

impl VectorField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> Schedule {
        self.schedule
    }

    fn evaluate(&self, x: ArrayView2<f64>, _t: f64, with_score: bool) -> Result<FieldValue> {
        Ok(FieldValue {
            velocity: Array2::zeros(x.dim()),
            score: with_score.then(|| Array2::zeros(x.dim())),
        })
    }
}

/// Counts evaluations of the wrapped field.
pub struct CountingField<'a> {
    pub inner: &'a dyn VectorField,
    pub calls: std::sync::atomic::AtomicUsize,
}

impl<'a> CountingField<'a> {
    pub fn new(inner: &'a dyn VectorField) -> Self {
        CountingField {
            inner,
            calls: Default::default(),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::SeqCst)
    }
}

impl VectorField for CountingField<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn schedule(&self) -> Schedule {
        self.inner.schedule()
    }

    fn prior_std(&self) -> f64 {
        self.inner.prior_std()
    }

    fn evaluate(&self, x: ArrayView2<f64>, t: f64, with_score: bool) -> Result<FieldValue> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        self.inner.evaluate(x, t, with_score)
    }
}

/// Mean and variance across rows for each column.
pub fn column_moments(x: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
    let var = x
        .axis_iter(Axis(1))
        .zip(&mean)
        .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n)
        .collect();
    (mean, var)
}
