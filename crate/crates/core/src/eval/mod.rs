//! Utility (ROC, CIO) and disclosure risk (TCAP) of a synthetic table
//! against the original.

pub mod cio;
pub mod glm;
pub mod roc;
pub mod tcap;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use cio::{ci_overlap, cio, CioResult, CioTarget, CioTerm};
pub use glm::{fit_glm, fit_glm_with, RegressionFit, RegressorKind};
pub use roc::{roc, roc_cells, RocCells, RocMode};
pub use tcap::{tcap_risk, TcapResult, WeapMode};

use crate::error::{ensure, Result};
use crate::tabular::{ColumnKind, DataTable, TableSchema};

fn default_tau() -> f64 {
    1.0
}

fn default_bins() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Categorical columns for ROC and, by default, TCAP equivalence classes.
    pub key_vars: Vec<String>,
    pub cio_targets: Vec<CioTarget>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    pub tcap_targets: Vec<String>,
    /// TCAP keys; `key_vars` minus the target when absent.
    #[serde(default)]
    pub tcap_keys: Option<Vec<String>>,
    #[serde(default)]
    pub weap: WeapMode,
    /// Quantile bins for numeric TCAP targets.
    #[serde(default = "default_bins")]
    pub tcap_bins: usize,
}

impl EvalSpec {
    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self, schema: &TableSchema) -> Result<()> {
        ensure!(!self.key_vars.is_empty(), Param, "eval spec needs key_vars");
        ensure!(!self.cio_targets.is_empty(), Param, "eval spec needs cio_targets");
        ensure!(!self.tcap_targets.is_empty(), Param, "eval spec needs tcap_targets");
        ensure!((0.0..=1.0).contains(&self.tau), Param, "tau must lie in [0, 1]");
        ensure!(self.tcap_bins >= 2, Param, "tcap_bins must be at least 2");
        let categorical = |name: &str| -> Result<()> {
            let (_, c) = schema.column(name)?;
            ensure!(c.is_categorical(), Param, "'{name}' must be categorical");
            Ok(())
        };
        for k in self.key_vars.iter().chain(self.tcap_keys.iter().flatten()) {
            categorical(k)?;
        }
        for t in &self.cio_targets {
            let (_, c) = schema.column(&t.target)?;
            match t.kind {
                RegressorKind::Logistic => ensure!(
                    c.kind == ColumnKind::Categorical,
                    Param,
                    "logistic target '{}' must be categorical",
                    t.target
                ),
                RegressorKind::Linear => {
                    ensure!(c.kind == ColumnKind::Numeric, Param, "linear target '{}' must be numeric", t.target)
                }
            }
            for e in &t.explanatory {
                schema.column(e)?;
                ensure!(e != &t.target, Param, "'{e}' is both target and predictor");
            }
        }
        for t in &self.tcap_targets {
            schema.column(t)?;
            ensure!(
                !self.keys_for(t).is_empty(),
                Param,
                "TCAP target '{t}' has no key variables left"
            );
        }
        Ok(())
    }

    pub fn keys_for(&self, target: &str) -> Vec<String> {
        self.tcap_keys
            .as_ref()
            .unwrap_or(&self.key_vars)
            .iter()
            .filter(|k| k.as_str() != target)
            .cloned()
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub roc_uni: f64,
    pub roc_biv: f64,
    pub cio: f64,
    pub utility: f64,
    pub risk: f64,
    pub roc_uni_cells: Vec<RocCells>,
    pub roc_biv_cells: Vec<RocCells>,
    pub cio_terms: Vec<CioTerm>,
    pub cio_excluded: Vec<String>,
    pub tcap: Vec<TcapResult>,
}

fn pooled(parts: &[RocCells]) -> Result<f64> {
    let cells: usize = parts.iter().map(|p| p.cells).sum();
    ensure!(cells > 0, Data, "no cells to compare");
    Ok(parts.iter().map(|p| p.ratio_sum).sum::<f64>() / cells as f64)
}

/// `(ROC_uni + ROC_biv + CIO)/3`.
pub fn utility(roc_uni: f64, roc_biv: f64, cio: f64) -> f64 {
    (roc_uni + roc_biv + cio) / 3.0
}

pub fn evaluate(orig: &DataTable, synth: &DataTable, spec: &EvalSpec) -> Result<EvalReport> {
    spec.validate(orig.schema())?;
    let uni = roc_cells(orig, synth, &spec.key_vars, RocMode::Uni)?;
    let biv = roc_cells(orig, synth, &spec.key_vars, RocMode::Biv)?;
    let (roc_uni, roc_biv) = (pooled(&uni)?, pooled(&biv)?);
    let c = cio(orig, synth, &spec.cio_targets)?;
    let tcap = spec
        .tcap_targets
        .iter()
        .map(|t| tcap_risk(orig, synth, &spec.keys_for(t), t, spec.tau, spec.weap, spec.tcap_bins))
        .collect::<Result<Vec<_>>>()?;
    let risk = tcap.iter().map(|r| r.risk).sum::<f64>() / tcap.len() as f64;
    Ok(EvalReport {
        roc_uni,
        roc_biv,
        cio: c.value,
        utility: utility(roc_uni, roc_biv, c.value),
        risk,
        roc_uni_cells: uni,
        roc_biv_cells: biv,
        cio_terms: c.terms,
        cio_excluded: c.excluded,
        tcap,
    })
}

impl EvalReport {
    /// Markdown summary: a headline table, then the breakdowns.
    pub fn to_markdown(&self, label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Model | Utility | Risk | ROC uni | ROC biv | CIO |");
        let _ = writeln!(s, "|---|---|---|---|---|---|");
        let _ = writeln!(
            s,
            "| {label} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            self.utility, self.risk, self.roc_uni, self.roc_biv, self.cio
        );
        let _ = writeln!(s, "\n## ROC by variable\n\n| Variables | Cells | ROC |\n|---|---|---|");
        for c in self.roc_uni_cells.iter().chain(&self.roc_biv_cells) {
            let _ = writeln!(s, "| {} | {} | {:.4} |", c.variables.join(" × "), c.cells, c.mean());
        }
        let _ = writeln!(
            s,
            "\n## Confidence-interval overlap\n\n| Target | Coefficient | Original CI | Synthetic CI | Overlap |\n|---|---|---|---|---|"
        );
        for t in &self.cio_terms {
            let _ = writeln!(
                s,
                "| {} | {} | [{:.4}, {:.4}] | [{:.4}, {:.4}] | {:.4} |",
                t.target, t.coefficient, t.orig[0], t.orig[1], t.synth[0], t.synth[1], t.overlap
            );
        }
        if !self.cio_excluded.is_empty() {
            let _ = writeln!(s, "\nExcluded (not converged): {}", self.cio_excluded.join(", "));
        }
        let _ = writeln!(s, "\n## TCAP\n\n| Target | Keys | Retained | Mean TCAP | Risk |\n|---|---|---|---|---|");
        for r in &self.tcap {
            let _ = writeln!(
                s,
                "| {} | {} | {}/{} | {:.4} | {:.4} |",
                r.target,
                r.keys.join(", "),
                r.retained,
                r.total,
                r.mean_tcap,
                r.risk
            );
        }
        s
    }
}
