//! Confidence-interval overlap between regressions fit on original and synthetic data.

use serde::{Deserialize, Serialize};

use super::glm::{fit_glm_with, RegressionFit, RegressorKind};
use crate::error::{ensure, Result};
use crate::par;
use crate::tabular::DataTable;

/// One regression compared across the two tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CioTarget {
    pub target: String,
    pub kind: RegressorKind,
    pub explanatory: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CioTerm {
    pub target: String,
    pub coefficient: String,
    pub orig: [f64; 2],
    pub synth: [f64; 2],
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CioResult {
    pub value: f64,
    pub terms: Vec<CioTerm>,
    /// Targets left out because a fit did not converge.
    pub excluded: Vec<String>,
}

/// Share of `[l, u]` covered by `[l2, u2]`. A degenerate interval counts as
/// covered when its point lies inside the other interval.
fn covered(l: f64, u: f64, l2: f64, u2: f64) -> f64 {
    let width = u - l;
    if width > 0.0 {
        (u.min(u2) - l.max(l2)).max(0.0) / width
    } else if l >= l2 && l <= u2 {
        1.0
    } else {
        0.0
    }
}

/// `½·[o/(u−l) + o/(u′−l′)]` with `o` the length of the intersection.
pub fn ci_overlap(a: [f64; 2], b: [f64; 2]) -> f64 {
    0.5 * (covered(a[0], a[1], b[0], b[1]) + covered(b[0], b[1], a[0], a[1]))
}

fn fit_pair(orig: &DataTable, synth: &DataTable, t: &CioTarget) -> Result<(RegressionFit, RegressionFit)> {
    Ok((
        fit_glm_with(orig, orig, &t.target, &t.explanatory, t.kind)?,
        fit_glm_with(synth, orig, &t.target, &t.explanatory, t.kind)?,
    ))
}

/// Mean overlap over every coefficient of every converged pair of fits.
pub fn cio(orig: &DataTable, synth: &DataTable, targets: &[CioTarget]) -> Result<CioResult> {
    ensure!(!targets.is_empty(), Param, "CIO needs at least one regression target");
    let fits = par::map_indices(targets.len(), |i| fit_pair(orig, synth, &targets[i]));
    let mut terms = Vec::new();
    let mut excluded = Vec::new();
    for (t, fit) in targets.iter().zip(fits) {
        let (fo, fs) = fit?;
        if !(fo.converged && fs.converged) {
            log::warn!("CIO: fit for '{}' did not converge; excluded", t.target);
            excluded.push(t.target.clone());
            continue;
        }
        for k in 0..fo.coefficients.len() {
            let a = [fo.ci_low[k], fo.ci_high[k]];
            let b = [fs.ci_low[k], fs.ci_high[k]];
            terms.push(CioTerm {
                target: t.target.clone(),
                coefficient: fo.names[k].clone(),
                orig: a,
                synth: b,
                overlap: ci_overlap(a, b),
            });
        }
    }
    ensure!(!terms.is_empty(), Numerical, "every CIO regression failed to converge");
    let value = terms.iter().map(|t| t.overlap).sum::<f64>() / terms.len() as f64;
    Ok(CioResult { value, terms, excluded })
}
