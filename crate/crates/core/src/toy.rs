//! Seeded ground-truth datasets with known dependencies.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{CioTarget, EvalSpec, RegressorKind, WeapMode};
use crate::tabular::{Cell, Column, DataTable, TableSchema};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ToyKind {
    /// Two numeric columns: modes at `(±2, 0)` with standard deviation 0.5.
    Mixture2d,
    /// Two binary columns with odds ratio 4.
    CoupledCats,
    /// Census-shaped table with numeric and categorical columns.
    AdultLike,
    /// `mixture2d` and `coupled-cats` side by side, with the mode chosen by `A`.
    Composite,
}

impl ToyKind {
    pub const ALL: [ToyKind; 4] = [ToyKind::Mixture2d, ToyKind::CoupledCats, ToyKind::AdultLike, ToyKind::Composite];

    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::Mixture2d => "mixture2d",
            ToyKind::CoupledCats => "coupled-cats",
            ToyKind::AdultLike => "adult-like",
            ToyKind::Composite => "composite",
        }
    }
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ToyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown toy dataset '{s}'")))
    }
}

/// `P(B = b1 | A = a)`: logit `−ln 2 + ln 4·a`, i.e. 1/3 and 2/3.
pub fn coupled_b_prob(a: u32) -> f64 {
    let logit = -(2f64.ln()) + 4f64.ln() * a as f64;
    1.0 / (1.0 + (-logit).exp())
}

fn bernoulli(rng: &mut impl Rng, p: f64) -> u32 {
    u32::from(rng.random::<f64>() < p)
}

fn categorical(rng: &mut impl Rng, probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

fn coupled_pair(rng: &mut impl Rng) -> (u32, u32) {
    let a = bernoulli(rng, 0.5);
    (a, bernoulli(rng, coupled_b_prob(a)))
}

pub fn schema(kind: ToyKind) -> TableSchema {
    let cols = match kind {
        ToyKind::Mixture2d => vec![Column::numeric("x"), Column::numeric("y")],
        ToyKind::CoupledCats => vec![Column::categorical("A", ["a0", "a1"]), Column::categorical("B", ["b0", "b1"])],
        ToyKind::Composite => vec![
            Column::numeric("x"),
            Column::numeric("y"),
            Column::categorical("A", ["a0", "a1"]),
            Column::categorical("B", ["b0", "b1"]),
        ],
        ToyKind::AdultLike => vec![
            Column::numeric("age"),
            Column::categorical("workclass", ["private", "self-employed", "government"]),
            Column::categorical("education", ["hs", "college", "bachelors", "postgrad"]),
            Column::categorical("sex", ["female", "male"]),
            Column::numeric("hours"),
            Column::categorical("income", ["<=50k", ">50k"]),
        ],
    };
    TableSchema::new(cols).expect("toy schemas are valid")
}

/// `n` rows of the named dataset; identical for identical `(kind, n, seed)`.
pub fn generate(kind: ToyKind, n: usize, seed: u64) -> Result<DataTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).expect("valid");
    let rows: Vec<Vec<Cell>> = (0..n)
        .map(|_| match kind {
            ToyKind::Mixture2d => {
                let m = if rng.random::<bool>() { 2.0 } else { -2.0 };
                vec![Cell::Num(m + noise.sample(&mut rng)), Cell::Num(noise.sample(&mut rng))]
            }
            ToyKind::CoupledCats => {
                let (a, b) = coupled_pair(&mut rng);
                vec![Cell::Cat(a), Cell::Cat(b)]
            }
            ToyKind::Composite => {
                let (a, b) = coupled_pair(&mut rng);
                let m = if a == 1 { 2.0 } else { -2.0 };
                vec![
                    Cell::Num(m + noise.sample(&mut rng)),
                    Cell::Num(noise.sample(&mut rng)),
                    Cell::Cat(a),
                    Cell::Cat(b),
                ]
            }
            ToyKind::AdultLike => adult_row(&mut rng),
        })
        .collect();
    DataTable::from_rows(schema(kind), &rows)
}

fn adult_row(rng: &mut impl Rng) -> Vec<Cell> {
    let std: Normal<f64> = Normal::new(0.0, 1.0).expect("valid");
    let age = (38.0 + 12.0 * std.sample(rng)).clamp(17.0, 90.0).round();
    let workclass = categorical(rng, &[0.7, 0.12, 0.18]);
    let education = categorical(rng, &[0.42, 0.28, 0.2, 0.1]);
    let sex = bernoulli(rng, 0.67);
    let hours = (38.0 + 5.0 * sex as f64 + 3.0 * f64::from(u8::from(workclass == 1)) + 9.0 * std.sample(rng))
        .clamp(1.0, 99.0)
        .round();
    let logit = -3.2 + 0.75 * education as f64 + 0.04 * (age - 38.0) + 0.04 * (hours - 40.0) + 0.6 * sex as f64;
    let income = bernoulli(rng, 1.0 / (1.0 + (-logit).exp()));
    vec![
        Cell::Num(age),
        Cell::Cat(workclass),
        Cell::Cat(education),
        Cell::Cat(sex),
        Cell::Num(hours),
        Cell::Cat(income),
    ]
}

/// A ready-made evaluation spec, for datasets with at least two categorical columns.
pub fn eval_spec(kind: ToyKind) -> Option<EvalSpec> {
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let target = |t: &str, kind: RegressorKind, e: &[&str]| CioTarget {
        target: t.into(),
        kind,
        explanatory: s(e),
    };
    let (keys, cio, tcap) = match kind {
        ToyKind::Mixture2d => return None,
        ToyKind::CoupledCats => (s(&["A", "B"]), vec![target("B", RegressorKind::Logistic, &["A"])], s(&["B"])),
        ToyKind::Composite => (
            s(&["A", "B"]),
            vec![
                target("B", RegressorKind::Logistic, &["A"]),
                target("x", RegressorKind::Linear, &["A"]),
            ],
            s(&["B"]),
        ),
        ToyKind::AdultLike => (
            s(&["workclass", "education", "sex", "income"]),
            vec![
                target("income", RegressorKind::Logistic, &["age", "education", "sex", "hours"]),
                target("hours", RegressorKind::Linear, &["age", "sex", "workclass"]),
            ],
            s(&["income", "education"]),
        ),
    };
    Some(EvalSpec {
        key_vars: keys,
        cio_targets: cio,
        tau: 1.0,
        tcap_targets: tcap,
        tcap_keys: None,
        weap: WeapMode::Marginal,
        tcap_bins: 5,
    })
}
