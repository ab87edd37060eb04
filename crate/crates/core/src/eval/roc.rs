//! Ratio of counts between original and synthetic frequency tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::tabular::DataTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RocMode {
    Uni,
    Biv,
}

/// Summed cell ratios for one variable or variable pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCells {
    pub variables: Vec<String>,
    pub cells: usize,
    pub ratio_sum: f64,
}

impl RocCells {
    pub fn mean(&self) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            self.ratio_sum / self.cells as f64
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    a.min(b) as f64 / a.max(b) as f64
}

/// `min/max` over the union of cells observed in either table.
fn compare<K: Ord>(orig: &BTreeMap<K, usize>, synth: &BTreeMap<K, usize>) -> (usize, f64) {
    let mut cells = 0;
    let mut sum = 0.0;
    for (k, &a) in orig {
        cells += 1;
        sum += ratio(a, synth.get(k).copied().unwrap_or(0));
    }
    cells += synth.keys().filter(|k| !orig.contains_key(k)).count();
    (cells, sum)
}

fn key_codes<'a>(table: &'a DataTable, keys: &[String]) -> Result<Vec<&'a [u32]>> {
    keys.iter()
        .map(|k| {
            table.categorical_by_name(k).map_err(|_| crate::Error::Param(format!("ROC key '{k}' must be a categorical column")))
        })
        .collect()
}

fn counts<K: Ord>(keys: impl Iterator<Item = K>) -> BTreeMap<K, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(k).or_insert(0) += 1;
    }
    m
}

/// Per-variable (uni) or per-pair (biv) cell comparisons.
pub fn roc_cells(orig: &DataTable, synth: &DataTable, keys: &[String], mode: RocMode) -> Result<Vec<RocCells>> {
    ensure!(!keys.is_empty(), Param, "ROC needs at least one key variable");
    ensure!(
        orig.schema() == synth.schema(),
        Schema,
        "original and synthetic tables have different schemas"
    );
    let o = key_codes(orig, keys)?;
    let s = key_codes(synth, keys)?;
    let mut out = Vec::new();
    match mode {
        RocMode::Uni => {
            for (i, name) in keys.iter().enumerate() {
                let (cells, ratio_sum) = compare(&counts(o[i].iter().copied()), &counts(s[i].iter().copied()));
                out.push(RocCells {
                    variables: vec![name.clone()],
                    cells,
                    ratio_sum,
                });
            }
        }
        RocMode::Biv => {
            ensure!(keys.len() >= 2, Param, "bivariate ROC needs at least two key variables");
            for i in 0..keys.len() {
                for j in i + 1..keys.len() {
                    let co = counts(o[i].iter().copied().zip(o[j].iter().copied()));
                    let cs = counts(s[i].iter().copied().zip(s[j].iter().copied()));
                    let (cells, ratio_sum) = compare(&co, &cs);
                    out.push(RocCells {
                        variables: vec![keys[i].clone(), keys[j].clone()],
                        cells,
                        ratio_sum,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Mean of `min/max` count ratios pooled over every cell.
pub fn roc(orig: &DataTable, synth: &DataTable, keys: &[String], mode: RocMode) -> Result<f64> {
    let parts = roc_cells(orig, synth, keys, mode)?;
    let cells: usize = parts.iter().map(|p| p.cells).sum();
    ensure!(cells > 0, Data, "no cells to compare: both tables are empty");
    Ok(parts.iter().map(|p| p.ratio_sum).sum::<f64>() / cells as f64)
}
