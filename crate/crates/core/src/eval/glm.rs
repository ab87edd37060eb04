//! Ordinary least squares and logistic regression with Wald intervals.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tabular::{ColumnData, ColumnKind, DataTable};

pub const RIDGE: f64 = 1e-6;
pub const MAX_ITER: usize = 100;
const TOL: f64 = 1e-8;
const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Logistic,
    Linear,
}

/// Coefficients with standard errors and 95% intervals, one per design column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl RegressionFit {
    fn from_cov(names: Vec<String>, beta: &DVector<f64>, cov: &DMatrix<f64>, converged: bool, iterations: usize) -> Self {
        let coefficients: Vec<f64> = beta.iter().copied().collect();
        let std_errors: Vec<f64> = (0..beta.len()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        let finite = coefficients.iter().chain(&std_errors).all(|v| v.is_finite());
        RegressionFit {
            ci_low: coefficients.iter().zip(&std_errors).map(|(b, s)| b - Z95 * s).collect(),
            ci_high: coefficients.iter().zip(&std_errors).map(|(b, s)| b + Z95 * s).collect(),
            names,
            coefficients,
            std_errors,
            converged: converged && finite,
            iterations,
        }
    }
}

/// How a table's columns become regressors: numeric columns are centred and
/// scaled with fixed statistics, categorical columns are one-hot with the
/// first category dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignSpec {
    pub columns: Vec<usize>,
    /// `(mean, std)` per numeric explanatory column, aligned with `columns`.
    pub scaling: Vec<Option<(f64, f64)>>,
}

impl DesignSpec {
    /// Takes numeric scaling from `reference`.
    pub fn new(reference: &DataTable, columns: Vec<usize>) -> Result<Self> {
        let scaling = columns
            .iter()
            .map(|&c| {
                Ok(match reference.column_data(c) {
                    ColumnData::Numeric(v) => {
                        ensure!(!v.is_empty(), Data, "no rows to standardize column {c}");
                        let n = v.len() as f64;
                        let mean = v.iter().sum::<f64>() / n;
                        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                        Some((mean, if std > 0.0 { std } else { 1.0 }))
                    }
                    ColumnData::Categorical(_) => None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignSpec { columns, scaling })
    }

    pub fn names(&self, table: &DataTable) -> Vec<String> {
        let mut names = vec!["(intercept)".to_string()];
        for &c in &self.columns {
            let col = &table.schema().columns[c];
            match col.kind {
                ColumnKind::Numeric => names.push(col.name.clone()),
                ColumnKind::Categorical => {
                    names.extend(col.categories.iter().skip(1).map(|k| format!("{}={}", col.name, k)));
                }
            }
        }
        names
    }

    pub fn matrix(&self, table: &DataTable) -> DMatrix<f64> {
        let n = table.n_rows();
        let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
        for (&c, scaling) in self.columns.iter().zip(&self.scaling) {
            match (table.column_data(c), scaling) {
                (ColumnData::Numeric(v), Some((m, s))) => cols.push(v.iter().map(|x| (x - m) / s).collect()),
                (ColumnData::Categorical(v), _) => {
                    let k = table.schema().columns[c].categories.len();
                    for level in 1..k as u32 {
                        cols.push(v.iter().map(|&x| if x == level { 1.0 } else { 0.0 }).collect());
                    }
                }
                (ColumnData::Numeric(_), None) => unreachable!("scaling exists for numeric columns"),
            }
        }
        DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i])
    }
}

fn gram(x: &DMatrix<f64>, w: Option<&DVector<f64>>) -> DMatrix<f64> {
    match w {
        None => x.tr_mul(x),
        Some(w) => {
            let mut xw = x.clone();
            for mut col in xw.column_iter_mut() {
                col.component_mul_assign(w);
            }
            x.tr_mul(&xw)
        }
    }
}

fn cholesky(mut h: DMatrix<f64>, ridge: f64) -> Result<Cholesky<f64, Dyn>> {
    for i in 0..h.nrows() {
        h[(i, i)] += ridge;
    }
    Cholesky::new(h).ok_or_else(|| crate::Error::Numerical("singular design matrix".into()))
}

/// Least squares with classical standard errors `σ̂²·(XᵀX)⁻¹`. A rank-deficient
/// design falls back to the ridge-stabilized normal equations.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>, names: Vec<String>) -> Result<RegressionFit> {
    let (n, p) = x.shape();
    ensure!(n > p, Data, "linear regression needs more than {p} rows, got {n}");
    let xtx = gram(x, None);
    let chol = match cholesky(xtx.clone(), 0.0) {
        Ok(c) => c,
        Err(_) => cholesky(xtx, RIDGE)?,
    };
    let beta = chol.solve(&x.tr_mul(y));
    let resid = y - x * &beta;
    let sigma2 = resid.norm_squared() / (n - p) as f64;
    let cov = chol.inverse() * sigma2;
    Ok(RegressionFit::from_cov(names, &beta, &cov, true, 1))
}

/// Ridge-stabilized Newton/IRLS for the binary logit model.
pub fn logistic(x: &DMatrix<f64>, y: &DVector<f64>, names: Vec<String>) -> Result<RegressionFit> {
    let (n, p) = x.shape();
    ensure!(n > p, Data, "logistic regression needs more than {p} rows, got {n}");
    ensure!(y.iter().all(|&v| v == 0.0 || v == 1.0), Data, "logistic response must be 0/1");
    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut chol = None;
    for it in 1..=MAX_ITER {
        iterations = it;
        let eta = x * &beta;
        let prob = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = prob.map(|q| q * (1.0 - q));
        let c = cholesky(gram(x, Some(&w)), RIDGE)?;
        let grad = x.tr_mul(&(y - &prob)) - &beta * RIDGE;
        let step = c.solve(&grad);
        beta += &step;
        chol = Some(c);
        if !beta.iter().all(|b| b.is_finite()) {
            break;
        }
        if step.amax() < TOL {
            converged = true;
            break;
        }
    }
    let eta = x * &beta;
    let w = eta.map(|e| {
        let q = 1.0 / (1.0 + (-e).exp());
        q * (1.0 - q)
    });
    let cov = match cholesky(gram(x, Some(&w)), RIDGE) {
        Ok(c) => c.inverse(),
        Err(_) => {
            converged = false;
            chol.map(|c| c.inverse()).unwrap_or_else(|| DMatrix::from_element(p, p, f64::NAN))
        }
    };
    Ok(RegressionFit::from_cov(names, &beta, &cov, converged, iterations))
}

/// Response coding for a logistic target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Binarization {
    /// Category index mapped to 1.
    pub positive: u32,
}

impl Binarization {
    /// Two classes: the second category is positive. More: the most frequent
    /// class of `reference` against the rest.
    pub fn for_target(reference: &DataTable, target: usize) -> Result<Self> {
        let k = reference.schema().columns[target].categories.len();
        let codes = reference
            .categorical(target)
            .ok_or_else(|| crate::Error::Param("logistic target must be categorical".into()))?;
        if k == 2 {
            return Ok(Binarization { positive: 1 });
        }
        let mut counts = vec![0usize; k];
        for &c in codes {
            counts[c as usize] += 1;
        }
        let best = (0..k).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).unwrap_or(0);
        Ok(Binarization { positive: best as u32 })
    }

    pub fn response(&self, codes: &[u32]) -> DVector<f64> {
        DVector::from_iterator(codes.len(), codes.iter().map(|&c| if c == self.positive { 1.0 } else { 0.0 }))
    }
}

/// Fits `target ~ explanatory` on `table`, taking numeric scaling and the
/// binarization of a multi-class target from `reference`.
pub fn fit_glm_with(
    table: &DataTable,
    reference: &DataTable,
    target: &str,
    explanatory: &[String],
    kind: RegressorKind,
) -> Result<RegressionFit> {
    let (t, _) = table.schema().column(target)?;
    let cols = explanatory
        .iter()
        .map(|e| {
            let (i, _) = table.schema().column(e)?;
            ensure!(i != t, Param, "target '{target}' cannot explain itself");
            Ok(i)
        })
        .collect::<Result<Vec<_>>>()?;
    let design = DesignSpec::new(reference, cols)?;
    let x = design.matrix(table);
    let names = design.names(table);
    match kind {
        RegressorKind::Linear => {
            let y = table
                .numeric(t)
                .ok_or_else(|| crate::Error::Param(format!("linear target '{target}' must be numeric")))?;
            ols(&x, &DVector::from_column_slice(y), names)
        }
        RegressorKind::Logistic => {
            let bin = Binarization::for_target(reference, t)?;
            let y = bin.response(table.categorical(t).expect("checked by for_target"));
            logistic(&x, &y, names)
        }
    }
}

/// Fits with the table's own statistics.
pub fn fit_glm(table: &DataTable, target: &str, explanatory: &[String], kind: RegressorKind) -> Result<RegressionFit> {
    fit_glm_with(table, table, target, explanatory, kind)
}
