//! Targeted correct attribution probability and the derived disclosure risk.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tabular::{ColumnData, DataTable};

/// Baseline attribution probability without the synthetic data.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeapMode {
    /// Marginal frequency of the target value in the original table.
    #[default]
    Marginal,
    /// Frequency of the target value within the original equivalence class.
    /// Identical to the attribution probability itself, so risk is always 0.
    WithinClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcapResult {
    pub target: String,
    pub keys: Vec<String>,
    pub risk: f64,
    /// Synthetic records that passed the `τ` filter.
    pub retained: usize,
    pub total: usize,
    /// Mean attribution probability over retained records.
    pub mean_tcap: f64,
}

/// Bin edges at the `k`-quantiles of `values`; a value `v` falls in bin
/// `#{edges ≤ v}`.
pub fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins)
        .filter(|_| n > 0)
        .map(|q| sorted[(q * n / bins).min(n - 1)])
        .collect();
    edges.dedup();
    edges
}

fn bin_of(edges: &[f64], v: f64) -> u32 {
    edges.partition_point(|&e| e <= v) as u32
}

/// Categorical codes for a column; numeric columns are binned at the
/// quantiles of the original table.
fn codes(orig: &DataTable, table: &DataTable, col: usize, bins: usize) -> Vec<u32> {
    match (orig.column_data(col), table.column_data(col)) {
        (_, ColumnData::Categorical(v)) => v.clone(),
        (ColumnData::Numeric(o), ColumnData::Numeric(v)) => {
            let edges = quantile_edges(o, bins);
            v.iter().map(|&x| bin_of(&edges, x)).collect()
        }
        _ => unreachable!("tables share a schema"),
    }
}

fn class_key(cols: &[Vec<u32>], i: usize) -> Vec<u32> {
    cols.iter().map(|c| c[i]).collect()
}

fn count<K: std::hash::Hash + Eq>(it: impl Iterator<Item = K>) -> HashMap<K, usize> {
    let mut m = HashMap::new();
    for k in it {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

/// Mean per-record risk `max(0, (TCAP − WEAP)/(1 − WEAP))` over synthetic
/// records whose own class is at least `τ`-pure for their target value.
pub fn tcap_risk(
    orig: &DataTable,
    synth: &DataTable,
    keys: &[String],
    target: &str,
    tau: f64,
    weap: WeapMode,
    numeric_bins: usize,
) -> Result<TcapResult> {
    ensure!((0.0..=1.0).contains(&tau), Param, "tau must lie in [0, 1], got {tau}");
    ensure!(!keys.is_empty(), Param, "TCAP needs at least one key variable");
    ensure!(orig.schema() == synth.schema(), Schema, "original and synthetic tables have different schemas");
    ensure!(numeric_bins >= 2, Param, "numeric targets need at least 2 bins");
    let (t, _) = orig.schema().column(target)?;
    let key_idx = keys
        .iter()
        .map(|k| {
            let (i, col) = orig.schema().column(k)?;
            ensure!(col.is_categorical(), Param, "TCAP key '{k}' must be categorical");
            ensure!(i != t, Param, "TCAP target '{target}' cannot be a key");
            Ok(i)
        })
        .collect::<Result<Vec<_>>>()?;

    let o_keys: Vec<Vec<u32>> = key_idx.iter().map(|&c| codes(orig, orig, c, numeric_bins)).collect();
    let s_keys: Vec<Vec<u32>> = key_idx.iter().map(|&c| codes(orig, synth, c, numeric_bins)).collect();
    let o_t = codes(orig, orig, t, numeric_bins);
    let s_t = codes(orig, synth, t, numeric_bins);
    let (n_o, n_s) = (orig.n_rows(), synth.n_rows());

    let o_class = count((0..n_o).map(|i| class_key(&o_keys, i)));
    let o_joint = count((0..n_o).map(|i| (class_key(&o_keys, i), o_t[i])));
    let o_marg = count(o_t.iter().copied());
    let s_class = count((0..n_s).map(|i| class_key(&s_keys, i)));
    let s_joint = count((0..n_s).map(|i| (class_key(&s_keys, i), s_t[i])));

    let mut retained = 0;
    let mut risk_sum = 0.0;
    let mut tcap_sum = 0.0;
    let mut degenerate = 0;
    for (j, &y) in s_t.iter().enumerate() {
        let k = class_key(&s_keys, j);
        let purity = s_joint[&(k.clone(), y)] as f64 / s_class[&k] as f64;
        if purity < tau - 1e-12 {
            continue;
        }
        retained += 1;
        let Some(&class_n) = o_class.get(&k) else {
            continue;
        };
        let tcap = o_joint.get(&(k, y)).copied().unwrap_or(0) as f64 / class_n as f64;
        tcap_sum += tcap;
        let base = match weap {
            WeapMode::Marginal => o_marg.get(&y).copied().unwrap_or(0) as f64 / n_o as f64,
            WeapMode::WithinClass => tcap,
        };
        if base >= 1.0 {
            degenerate += 1;
            continue;
        }
        risk_sum += ((tcap - base) / (1.0 - base)).max(0.0);
    }
    if degenerate > 0 {
        log::warn!("TCAP '{target}': {degenerate} records have baseline 1 and contribute 0");
    }
    let (risk, mean_tcap) = if retained == 0 {
        (0.0, 0.0)
    } else {
        (risk_sum / retained as f64, tcap_sum / retained as f64)
    };
    Ok(TcapResult {
        target: target.to_string(),
        keys: keys.to_vec(),
        risk,
        retained,
        total: n_s,
        mean_tcap,
    })
}
