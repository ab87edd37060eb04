//! Mixed-type tables: schema, storage, CSV I/O and the numeric codec that maps
//! rows to real vectors (z-scored numerics followed by one-hot blocks) and back.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

impl Column {
    pub fn numeric(name: impl Into<String>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
        }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Column {
            name: name.into(),
            kind: ColumnKind::Categorical,
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == ColumnKind::Categorical
    }

    /// Index of `value` in the category list.
    pub fn category_index(&self, value: &str) -> Option<u32> {
        self.categories.iter().position(|c| c == value).map(|i| i as u32)
    }
}

/// Ordered column typing for a mixed numeric/categorical table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let schema = TableSchema { columns };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.columns.is_empty(), Schema, "schema has no columns");
        let mut names = HashSet::new();
        for col in &self.columns {
            ensure!(!col.name.is_empty(), Schema, "empty column name");
            ensure!(names.insert(col.name.as_str()), Schema, "duplicate column name '{}'", col.name);
            match col.kind {
                ColumnKind::Numeric => ensure!(
                    col.categories.is_empty(),
                    Schema,
                    "numeric column '{}' must not list categories",
                    col.name
                ),
                ColumnKind::Categorical => {
                    ensure!(
                        col.categories.len() >= 2,
                        Schema,
                        "categorical column '{}' needs at least 2 categories",
                        col.name
                    );
                    let mut seen = HashSet::new();
                    for c in &col.categories {
                        ensure!(seen.insert(c.as_str()), Schema, "column '{}' lists category '{}' twice", col.name, c);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: TableSchema = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Stable content hash (hex SHA-256 of the compact JSON form).
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<(usize, &Column)> {
        self.index_of(name)
            .map(|i| (i, &self.columns[i]))
            .ok_or_else(|| Error::Schema(format!("unknown column '{name}'")))
    }

    pub fn numeric_count(&self) -> usize {
        self.columns.iter().filter(|c| !c.is_categorical()).count()
    }

    /// Category counts of the categorical columns, in schema order.
    pub fn category_sizes(&self) -> Vec<usize> {
        self.columns
            .iter()
            .filter(|c| c.is_categorical())
            .map(|c| c.categories.len())
            .collect()
    }

    /// Encoded width: numeric count plus the sum of category counts.
    pub fn encoded_dim(&self) -> usize {
        self.numeric_count() + self.category_sizes().iter().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical(Vec<u32>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A single cell value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(u32),
}

/// Column-major storage of `n` validated records.
#[derive(Clone, Debug, PartialEq)]
pub struct DataTable {
    schema: TableSchema,
    columns: Vec<ColumnData>,
    n_rows: usize,
}

impl DataTable {
    pub fn new(schema: TableSchema, columns: Vec<ColumnData>) -> Result<Self> {
        schema.validate()?;
        ensure!(
            columns.len() == schema.columns.len(),
            Shape,
            "{} data columns for {} schema columns",
            columns.len(),
            schema.columns.len()
        );
        let n_rows = columns.first().map_or(0, ColumnData::len);
        for (col, data) in schema.columns.iter().zip(&columns) {
            ensure!(data.len() == n_rows, Shape, "column '{}' has {} rows, expected {n_rows}", col.name, data.len());
            match (col.kind, data) {
                (ColumnKind::Numeric, ColumnData::Numeric(v)) => {
                    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                        return Err(Error::Data(format!("non-finite value in column '{}' at row {i}", col.name)));
                    }
                }
                (ColumnKind::Categorical, ColumnData::Categorical(v)) => {
                    let k = col.categories.len() as u32;
                    if let Some(i) = v.iter().position(|&c| c >= k) {
                        return Err(Error::Data(format!(
                            "category index {} out of range for column '{}' at row {i}",
                            v[i], col.name
                        )));
                    }
                }
                _ => return Err(Error::Shape(format!("column '{}' has the wrong storage kind", col.name))),
            }
        }
        Ok(DataTable { schema, columns, n_rows })
    }

    /// Builds a table from row-major cells.
    pub fn from_rows(schema: TableSchema, rows: &[Vec<Cell>]) -> Result<Self> {
        let mut columns: Vec<ColumnData> = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numeric => ColumnData::Numeric(Vec::with_capacity(rows.len())),
                ColumnKind::Categorical => ColumnData::Categorical(Vec::with_capacity(rows.len())),
            })
            .collect();
        for (r, row) in rows.iter().enumerate() {
            ensure!(row.len() == columns.len(), Shape, "row {r} has {} cells", row.len());
            for (data, cell) in columns.iter_mut().zip(row) {
                match (data, cell) {
                    (ColumnData::Numeric(v), Cell::Num(x)) => v.push(*x),
                    (ColumnData::Categorical(v), Cell::Cat(c)) => v.push(*c),
                    _ => return Err(Error::Data(format!("row {r}: cell kind does not match schema"))),
                }
            }
        }
        DataTable::new(schema, columns)
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn column_data(&self, idx: usize) -> &ColumnData {
        &self.columns[idx]
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        match &self.columns[col] {
            ColumnData::Numeric(v) => Cell::Num(v[row]),
            ColumnData::Categorical(v) => Cell::Cat(v[row]),
        }
    }

    pub fn numeric(&self, col: usize) -> Option<&[f64]> {
        match &self.columns[col] {
            ColumnData::Numeric(v) => Some(v),
            ColumnData::Categorical(_) => None,
        }
    }

    pub fn categorical(&self, col: usize) -> Option<&[u32]> {
        match &self.columns[col] {
            ColumnData::Categorical(v) => Some(v),
            ColumnData::Numeric(_) => None,
        }
    }

    /// Category codes of a named categorical column.
    pub fn categorical_by_name(&self, name: &str) -> Result<&[u32]> {
        let (idx, _) = self.schema.column(name)?;
        self.categorical(idx)
            .ok_or_else(|| Error::Schema(format!("column '{name}' is not categorical")))
    }

    /// Rows `idx` in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DataTable {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                ColumnData::Numeric(v) => ColumnData::Numeric(idx.iter().map(|&i| v[i]).collect()),
                ColumnData::Categorical(v) => ColumnData::Categorical(idx.iter().map(|&i| v[i]).collect()),
            })
            .collect();
        DataTable {
            schema: self.schema.clone(),
            columns,
            n_rows: idx.len(),
        }
    }

    /// Equality with numeric cells compared to within `tol` (absolute, scaled by magnitude).
    pub fn approx_eq(&self, other: &DataTable, tol: f64) -> bool {
        if self.schema != other.schema || self.n_rows != other.n_rows {
            return false;
        }
        self.columns.iter().zip(&other.columns).all(|pair| match pair {
            (ColumnData::Numeric(a), ColumnData::Numeric(b)) => {
                a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
            }
            (a, b) => a == b,
        })
    }

    pub fn read_csv(reader: impl Read, schema: &TableSchema) -> Result<Self> {
        schema.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            Some(h) => h?,
            None => return Err(Error::Data("empty file: no header row".into())),
        };
        let mut position = vec![usize::MAX; schema.columns.len()];
        for (file_idx, name) in header.iter().enumerate() {
            let name = name.trim();
            let col = schema
                .index_of(name)
                .ok_or_else(|| Error::Data(format!("column '{name}' is not in the schema")))?;
            ensure!(position[col] == usize::MAX, Data, "column '{name}' appears twice in the header");
            position[col] = file_idx;
        }
        if let Some(missing) = position.iter().position(|&p| p == usize::MAX) {
            return Err(Error::Data(format!("missing column '{}'", schema.columns[missing].name)));
        }

        let mut columns: Vec<ColumnData> = schema
            .columns
            .iter()
            .map(|c| match c.kind {
                ColumnKind::Numeric => ColumnData::Numeric(Vec::new()),
                ColumnKind::Categorical => ColumnData::Categorical(Vec::new()),
            })
            .collect();
        let lookups: Vec<HashMap<&str, u32>> = schema
            .columns
            .iter()
            .map(|c| c.categories.iter().enumerate().map(|(i, s)| (s.as_str(), i as u32)).collect())
            .collect();

        for (line, record) in records.enumerate() {
            let record = record?;
            let row = line + 2;
            ensure!(
                record.len() == header.len(),
                Data,
                "line {row}: {} fields, header has {}",
                record.len(),
                header.len()
            );
            for (col_idx, col) in schema.columns.iter().enumerate() {
                let raw = record[position[col_idx]].trim();
                ensure!(!raw.is_empty(), Data, "line {row}: missing value in column '{}'", col.name);
                match &mut columns[col_idx] {
                    ColumnData::Numeric(v) => {
                        let x: f64 = raw.parse().map_err(|_| {
                            Error::Data(format!("line {row}: non-numeric value '{raw}' in column '{}'", col.name))
                        })?;
                        ensure!(x.is_finite(), Data, "line {row}: non-finite value in column '{}'", col.name);
                        v.push(x);
                    }
                    ColumnData::Categorical(v) => {
                        let idx = lookups[col_idx].get(raw).ok_or_else(|| {
                            Error::Data(format!("line {row}: unknown category '{raw}' in column '{}'", col.name))
                        })?;
                        v.push(*idx);
                    }
                }
            }
        }
        DataTable::new(schema.clone(), columns)
    }

    /// Loads a CSV whose header names the schema columns in any order.
    pub fn load_csv(path: impl AsRef<Path>, schema: &TableSchema) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::read_csv(std::io::BufReader::new(file), schema)
    }

    /// Writes the table in schema column order.
    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        let mut record = Vec::with_capacity(self.columns.len());
        for r in 0..self.n_rows {
            record.clear();
            for (col, data) in self.schema.columns.iter().zip(&self.columns) {
                record.push(match data {
                    ColumnData::Numeric(v) => v[r].to_string(),
                    ColumnData::Categorical(v) => col.categories[v[r] as usize].clone(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub column: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalBlock {
    pub column: usize,
    pub offset: usize,
    pub size: usize,
}

/// Layout of the encoded vector: numeric slots first, then one-hot blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub num_dim: usize,
    pub blocks: Vec<(usize, usize)>,
}

impl Layout {
    pub fn total_dim(&self) -> usize {
        self.num_dim + self.blocks.iter().map(|b| b.1).sum::<usize>()
    }
}

/// Fitted standardization and one-hot layout for one schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codec {
    pub schema: TableSchema,
    pub numeric: Vec<NumericStats>,
    pub categorical: Vec<CategoricalBlock>,
    pub total_dim: usize,
}

/// Encoded rows plus the hash of the schema they were produced from.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub values: Array2<f64>,
    pub schema_hash: String,
}

impl Codec {
    /// Population mean/std per numeric column; numeric slots first, then
    /// categorical blocks in schema order.
    pub fn fit(table: &DataTable) -> Result<Codec> {
        ensure!(table.n_rows() > 0, Data, "cannot fit a codec on an empty table");
        let schema = table.schema().clone();
        let mut numeric = Vec::new();
        for (idx, col) in schema.columns.iter().enumerate() {
            if let Some(values) = table.numeric(idx) {
                let n = values.len() as f64;
                let mean = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let std = var.sqrt();
                ensure!(
                    std > 0.0 && std.is_finite(),
                    Data,
                    "numeric column '{}' has zero variance",
                    col.name
                );
                numeric.push(NumericStats { column: idx, mean, std });
            }
        }
        let mut offset = numeric.len();
        let mut categorical = Vec::new();
        for (idx, col) in schema.columns.iter().enumerate() {
            if col.is_categorical() {
                categorical.push(CategoricalBlock {
                    column: idx,
                    offset,
                    size: col.categories.len(),
                });
                offset += col.categories.len();
            }
        }
        Ok(Codec {
            schema,
            numeric,
            categorical,
            total_dim: offset,
        })
    }

    pub fn layout(&self) -> Layout {
        Layout {
            num_dim: self.numeric.len(),
            blocks: self.categorical.iter().map(|b| (b.offset, b.size)).collect(),
        }
    }

    pub fn schema_hash(&self) -> String {
        self.schema.hash()
    }

    pub fn encode(&self, table: &DataTable) -> Result<EncodedBatch> {
        ensure!(table.schema() == &self.schema, Schema, "table schema does not match the codec");
        let n = table.n_rows();
        let mut values = Array2::<f64>::zeros((n, self.total_dim));
        for (slot, stats) in self.numeric.iter().enumerate() {
            let col = table.numeric(stats.column).expect("numeric column");
            for (r, x) in col.iter().enumerate() {
                values[[r, slot]] = (x - stats.mean) / stats.std;
            }
        }
        for block in &self.categorical {
            let col = table.categorical(block.column).expect("categorical column");
            for (r, &c) in col.iter().enumerate() {
                values[[r, block.offset + c as usize]] = 1.0;
            }
        }
        Ok(EncodedBatch {
            values,
            schema_hash: self.schema_hash(),
        })
    }

    /// Wraps raw encoded values produced elsewhere (samplers, decoders).
    pub fn batch(&self, values: Array2<f64>) -> Result<EncodedBatch> {
        ensure!(
            values.ncols() == self.total_dim,
            Shape,
            "encoded width {} != codec width {}",
            values.ncols(),
            self.total_dim
        );
        Ok(EncodedBatch {
            values,
            schema_hash: self.schema_hash(),
        })
    }

    /// De-standardizes numeric slots and maps each categorical block to the
    /// index of its largest entry (lowest index on ties).
    pub fn decode(&self, batch: &EncodedBatch) -> Result<DataTable> {
        ensure!(batch.schema_hash == self.schema_hash(), Schema, "batch was encoded under a different schema");
        let values = &batch.values;
        ensure!(
            values.ncols() == self.total_dim,
            Shape,
            "encoded width {} != codec width {}",
            values.ncols(),
            self.total_dim
        );
        if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite encoded value at row {}",
                pos / self.total_dim.max(1)
            )));
        }
        let mut columns: Vec<Option<ColumnData>> = vec![None; self.schema.columns.len()];
        for (slot, stats) in self.numeric.iter().enumerate() {
            let col = values.column(slot).iter().map(|z| z * stats.std + stats.mean).collect();
            columns[stats.column] = Some(ColumnData::Numeric(col));
        }
        for block in &self.categorical {
            let col = values
                .rows()
                .into_iter()
                .map(|row| argmax(row.slice(ndarray::s![block.offset..block.offset + block.size])) as u32)
                .collect();
            columns[block.column] = Some(ColumnData::Categorical(col));
        }
        DataTable::new(self.schema.clone(), columns.into_iter().map(|c| c.expect("every column decoded")).collect())
    }
}

/// Index of the maximum entry; the lowest index wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
