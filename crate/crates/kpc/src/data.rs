//! Typed datasets, CSV ingestion, standardization, and metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{KpcError, Result};

/// Row-major 3×3 rotation matrix.
pub type Rotation = [f64; 9];

pub const ROTATION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Numeric(Vec<f64>),
    Categorical { codes: Vec<u32>, labels: Vec<String> },
    Rotation(Vec<Rotation>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Numeric(v) => v.len(),
            Payload::Categorical { codes, .. } => codes.len(),
            Payload::Rotation(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnType {
        match self {
            Payload::Numeric(_) => ColumnType::Numeric,
            Payload::Categorical { .. } => ColumnType::Categorical,
            Payload::Rotation(_) => ColumnType::Rotation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Numeric,
    Categorical,
    Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub payload: Payload,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column { name: name.into(), payload: Payload::Numeric(values) }
    }

    /// Categorical column; codes are assigned in order of first appearance.
    pub fn categorical<S: AsRef<str>>(name: impl Into<String>, values: &[S]) -> Self {
        let mut labels: Vec<String> = Vec::new();
        let mut index: HashMap<String, u32> = HashMap::new();
        let codes = values
            .iter()
            .map(|v| {
                let v = v.as_ref();
                *index.entry(v.to_string()).or_insert_with(|| {
                    labels.push(v.to_string());
                    (labels.len() - 1) as u32
                })
            })
            .collect();
        Column { name: name.into(), payload: Payload::Categorical { codes, labels } }
    }

    /// Rotation column; every matrix is checked for orthogonality and unit determinant.
    pub fn rotation(name: impl Into<String>, values: Vec<Rotation>) -> Result<Self> {
        let name = name.into();
        for (row, r) in values.iter().enumerate() {
            check_rotation(r).map_err(|msg| KpcError::InvalidRotation {
                column: name.clone(),
                row,
                msg,
            })?;
        }
        Ok(Column { name, payload: Payload::Rotation(values) })
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

pub fn check_rotation(r: &Rotation) -> std::result::Result<(), String> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err("non-finite entry".into());
    }
    for a in 0..3 {
        for b in 0..3 {
            let dot: f64 = (0..3).map(|k| r[3 * k + a] * r[3 * k + b]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            if (dot - target).abs() > ROTATION_TOL {
                return Err(format!("RᵀR deviates from I by {:e}", (dot - target).abs()));
            }
        }
    }
    let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
        + r[2] * (r[3] * r[7] - r[4] * r[6]);
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(format!("determinant {det} is not 1"));
    }
    Ok(())
}

/// Immutable collection of equally long, uniquely named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n: usize,
}

impl Dataset {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let n = columns.first().map(|c| c.len()).unwrap_or(0);
        if n == 0 {
            return Err(KpcError::EmptyData);
        }
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if c.len() != n {
                return Err(KpcError::SizeMismatch { expected: n, got: c.len() });
            }
            if !seen.insert(c.name.as_str()) {
                return Err(KpcError::InvalidConfig(format!("duplicate column name '{}'", c.name)));
            }
        }
        Ok(Dataset { columns, n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> &Column {
        &self.columns[i]
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| KpcError::UnknownColumn(name.to_string()))
    }

    pub fn numeric(&self, i: usize) -> Result<&[f64]> {
        match &self.columns[i].payload {
            Payload::Numeric(v) => Ok(v),
            _ => Err(KpcError::TypeMismatch(format!("column '{}' is not numeric", self.columns[i].name))),
        }
    }

    pub fn numeric_by_name(&self, name: &str) -> Result<&[f64]> {
        self.numeric(self.index_of(name)?)
    }

    /// Copy with column `i` replaced (same name).
    pub fn with_payload(&self, i: usize, payload: Payload) -> Result<Dataset> {
        let mut columns = self.columns.clone();
        columns[i].payload = payload;
        Dataset::new(columns)
    }

    /// Copy with the rows reordered by `perm` (row r of the result is row perm[r]).
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Dataset> {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                payload: match &c.payload {
                    Payload::Numeric(v) => Payload::Numeric(perm.iter().map(|&r| v[r]).collect()),
                    Payload::Categorical { codes, labels } => Payload::Categorical {
                        codes: perm.iter().map(|&r| codes[r]).collect(),
                        labels: labels.clone(),
                    },
                    Payload::Rotation(v) => Payload::Rotation(perm.iter().map(|&r| v[r]).collect()),
                },
            })
            .collect();
        Dataset::new(columns)
    }
}

/// Assignment of dataset columns to the response, the tested block and the conditioning block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableRoles {
    pub y: Vec<usize>,
    pub z: Vec<usize>,
    pub x: Vec<usize>,
}

impl VariableRoles {
    pub fn new(y: Vec<usize>, z: Vec<usize>, x: Vec<usize>) -> Self {
        VariableRoles { y, z, x }
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.y.is_empty() || self.z.is_empty() {
            return Err(KpcError::InvalidConfig("y and z column lists must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &c in self.y.iter().chain(&self.z).chain(&self.x) {
            if c >= ds.ncols() {
                return Err(KpcError::UnknownColumn(format!("#{c}")));
            }
            if !seen.insert(c) {
                return Err(KpcError::InvalidConfig(format!("column #{c} assigned to more than one role")));
            }
        }
        Ok(())
    }

    /// Conditioning columns followed by the tested columns.
    pub fn xz(&self) -> Vec<usize> {
        self.x.iter().chain(&self.z).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricFamily {
    /// sqrt of the weighted sum of squared coordinate differences; numeric columns only.
    Euclidean,
    /// Weighted count of differing categorical columns.
    Hamming01,
    /// sqrt of the weighted sum of squared Frobenius distances; rotation columns only.
    Frobenius,
    /// sqrt of the weighted sum of squared per-column distances, any column types.
    Product,
}

/// Metric over a block of columns. Weights are keyed by dataset column index (default 1).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSpec {
    pub family: MetricFamily,
    pub weights: BTreeMap<usize, f64>,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec::product()
    }
}

impl MetricSpec {
    pub fn new(family: MetricFamily) -> Self {
        MetricSpec { family, weights: BTreeMap::new() }
    }

    pub fn euclidean() -> Self {
        Self::new(MetricFamily::Euclidean)
    }

    pub fn product() -> Self {
        Self::new(MetricFamily::Product)
    }

    pub fn with_weight(mut self, col: usize, w: f64) -> Self {
        self.weights.insert(col, w);
        self
    }

    pub fn weight(&self, col: usize) -> f64 {
        self.weights.get(&col).copied().unwrap_or(1.0)
    }

    fn check(&self, ds: &Dataset, cols: &[usize]) -> Result<()> {
        if let Some((c, w)) = self.weights.iter().find(|(_, w)| !(**w >= 0.0 && w.is_finite())) {
            return Err(KpcError::InvalidConfig(format!("metric weight {w} for column #{c}")));
        }
        let want = match self.family {
            MetricFamily::Euclidean => Some(ColumnType::Numeric),
            MetricFamily::Hamming01 => Some(ColumnType::Categorical),
            MetricFamily::Frobenius => Some(ColumnType::Rotation),
            MetricFamily::Product => None,
        };
        for &c in cols {
            if c >= ds.ncols() {
                return Err(KpcError::UnknownColumn(format!("#{c}")));
            }
            if let Some(t) = want {
                if ds.column(c).payload.kind() != t {
                    return Err(KpcError::IncompatibleMetric(format!(
                        "{:?} metric on {:?} column '{}'",
                        self.family,
                        ds.column(c).payload.kind(),
                        ds.column(c).name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn column_sq_dist(p: &Payload, i: usize, j: usize) -> f64 {
    match p {
        Payload::Numeric(v) => (v[i] - v[j]) * (v[i] - v[j]),
        Payload::Categorical { codes, .. } => (codes[i] != codes[j]) as u8 as f64,
        Payload::Rotation(v) => v[i].iter().zip(&v[j]).map(|(a, b)| (a - b) * (a - b)).sum(),
    }
}

/// Distance between rows `i` and `j` restricted to `cols`.
pub fn distance(m: &MetricSpec, ds: &Dataset, cols: &[usize], i: usize, j: usize) -> Result<f64> {
    m.check(ds, cols)?;
    if i >= ds.n() || j >= ds.n() {
        return Err(KpcError::SizeMismatch { expected: ds.n(), got: i.max(j) + 1 });
    }
    let s: f64 = cols.iter().map(|&c| m.weight(c) * column_sq_dist(&ds.column(c).payload, i, j)).sum();
    Ok(match m.family {
        MetricFamily::Hamming01 => s,
        _ => s.sqrt(),
    })
}

/// Coordinates whose Euclidean distances are an increasing function of the metric.
///
/// Numeric columns map to `sqrt(w)·x`, rotations to their 9 scaled entries and
/// categorical columns to scaled one-hot vectors with `‖e_a − e_b‖² = w`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl Embedding {
    pub fn n(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coords.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn sq_dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.row(i), self.row(j));
        let mut s = 0.0;
        for k in 0..self.dim {
            let d = a[k] - b[k];
            s += d * d;
        }
        s
    }
}

pub fn embed(m: &MetricSpec, ds: &Dataset, cols: &[usize]) -> Result<Embedding> {
    m.check(ds, cols)?;
    if cols.is_empty() {
        return Err(KpcError::InvalidConfig("cannot embed an empty column set".into()));
    }
    let mut dim = 0;
    for &c in cols {
        dim += match &ds.column(c).payload {
            Payload::Numeric(_) => 1,
            Payload::Rotation(_) => 9,
            Payload::Categorical { labels, .. } => labels.len().max(1),
        };
    }
    let n = ds.n();
    let mut coords = vec![0.0; n * dim];
    let mut off = 0;
    for &c in cols {
        let w = m.weight(c);
        match &ds.column(c).payload {
            Payload::Numeric(v) => {
                let s = w.sqrt();
                for i in 0..n {
                    coords[i * dim + off] = if w == 1.0 { v[i] } else { s * v[i] };
                }
                off += 1;
            }
            Payload::Rotation(v) => {
                let s = w.sqrt();
                for i in 0..n {
                    for k in 0..9 {
                        coords[i * dim + off + k] = if w == 1.0 { v[i][k] } else { s * v[i][k] };
                    }
                }
                off += 9;
            }
            Payload::Categorical { codes, labels } => {
                let s = (w / 2.0).sqrt();
                for i in 0..n {
                    coords[i * dim + off + codes[i] as usize] = s;
                }
                off += labels.len().max(1);
            }
        }
    }
    Ok(Embedding { dim, coords })
}

/// Center and scale the given numeric columns to mean 0 and unit sample variance (n−1).
pub fn standardize(ds: &Dataset, cols: &[usize]) -> Result<Dataset> {
    let mut columns = ds.columns().to_vec();
    for &c in cols {
        if c >= ds.ncols() {
            return Err(KpcError::UnknownColumn(format!("#{c}")));
        }
        let v = ds.numeric(c)?;
        let z = standardize_slice(v).ok_or_else(|| KpcError::ZeroVariance(ds.column(c).name.clone()))?;
        columns[c].payload = Payload::Numeric(z);
    }
    Dataset::new(columns)
}

/// Standardized copy of `v`, or `None` when the sample variance is zero or undefined.
pub fn standardize_slice(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.len();
    if n < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return None;
    }
    let sd = var.sqrt();
    Some(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Column type declarations for CSV ingestion. Undeclared fields are numeric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    pub types: BTreeMap<String, ColumnType>,
}

impl Schema {
    /// Parse `name = numeric|categorical|rotation9` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Schema> {
        let mut types = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                KpcError::InvalidConfig(format!("schema line {}: expected 'name = type'", lineno + 1))
            })?;
            let t = match v.trim() {
                "numeric" => ColumnType::Numeric,
                "categorical" => ColumnType::Categorical,
                "rotation9" => ColumnType::Rotation,
                other => {
                    return Err(KpcError::InvalidConfig(format!(
                        "schema line {}: unknown type '{other}'",
                        lineno + 1
                    )))
                }
            };
            types.insert(k.trim().to_string(), t);
        }
        Ok(Schema { types })
    }

    pub fn with(mut self, name: &str, t: ColumnType) -> Self {
        self.types.insert(name.to_string(), t);
        self
    }
}

const ROT_SUFFIX: [&str; 9] = ["11", "12", "13", "21", "22", "23", "31", "32", "33"];

pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_csv(f, schema)
}

/// Parse CSV text. A rotation column `r` occupies the fields `r.11, r.12, …, r.33` in that order.
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| KpcError::MalformedCsv { line: 1, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(KpcError::MalformedCsv { line: 1, msg: "missing header".into() });
    }

    enum Slot {
        Numeric(usize),
        Categorical(usize),
        Rotation(usize),
    }
    let mut slots: Vec<(String, Slot)> = Vec::new();
    let mut f = 0;
    while f < headers.len() {
        let h = &headers[f];
        let rot_name = h.strip_suffix(".11").filter(|b| schema.types.get(*b) == Some(&ColumnType::Rotation));
        if let Some(base) = rot_name {
            for (k, suf) in ROT_SUFFIX.iter().enumerate() {
                let want = format!("{base}.{suf}");
                if headers.get(f + k) != Some(&want) {
                    return Err(KpcError::MalformedCsv {
                        line: 1,
                        msg: format!("rotation column '{base}' needs field '{want}' at position {}", f + k + 1),
                    });
                }
            }
            slots.push((base.to_string(), Slot::Rotation(f)));
            f += 9;
            continue;
        }
        match schema.types.get(h.as_str()) {
            Some(ColumnType::Categorical) => slots.push((h.clone(), Slot::Categorical(f))),
            Some(ColumnType::Rotation) => {
                return Err(KpcError::MalformedCsv {
                    line: 1,
                    msg: format!("rotation column '{h}' must be written as fields '{h}.11' … '{h}.33'"),
                })
            }
            _ => slots.push((h.clone(), Slot::Numeric(f))),
        }
        f += 1;
    }
    for (name, t) in &schema.types {
        if !slots.iter().any(|(s, _)| s == name) {
            return Err(KpcError::MalformedCsv {
                line: 1,
                msg: format!("declared {t:?} column '{name}' not found in header"),
            });
        }
    }

    let mut num: Vec<Vec<f64>> = vec![Vec::new(); slots.len()];
    let mut cat: Vec<Vec<String>> = vec![Vec::new(); slots.len()];
    let mut rot: Vec<Vec<Rotation>> = vec![Vec::new(); slots.len()];
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| KpcError::MalformedCsv { line, msg: e.to_string() })?;
        if rec.len() != headers.len() {
            return Err(KpcError::MalformedCsv {
                line,
                msg: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        let parse = |k: usize| -> Result<f64> {
            let cell = rec[k].trim();
            if cell.is_empty() {
                return Err(KpcError::MalformedCsv { line, msg: format!("missing value in '{}'", headers[k]) });
            }
            let v: f64 = cell.parse().map_err(|_| KpcError::MalformedCsv {
                line,
                msg: format!("cannot parse '{cell}' in '{}' as a number", headers[k]),
            })?;
            if !v.is_finite() {
                return Err(KpcError::MalformedCsv { line, msg: format!("non-finite value in '{}'", headers[k]) });
            }
            Ok(v)
        };
        for (s, (_, slot)) in slots.iter().enumerate() {
            match *slot {
                Slot::Numeric(k) => num[s].push(parse(k)?),
                Slot::Categorical(k) => {
                    let cell = rec[k].trim();
                    if cell.is_empty() {
                        return Err(KpcError::MalformedCsv { line, msg: format!("missing value in '{}'", headers[k]) });
                    }
                    cat[s].push(cell.to_string());
                }
                Slot::Rotation(k) => {
                    let mut m = [0.0; 9];
                    for (q, v) in m.iter_mut().enumerate() {
                        *v = parse(k + q)?;
                    }
                    rot[s].push(m);
                }
            }
        }
    }

    let mut columns = Vec::with_capacity(slots.len());
    for (s, (name, slot)) in slots.into_iter().enumerate() {
        columns.push(match slot {
            Slot::Numeric(_) => Column::numeric(name, std::mem::take(&mut num[s])),
            Slot::Categorical(_) => Column::categorical(name, &cat[s]),
            Slot::Rotation(_) => Column::rotation(name, std::mem::take(&mut rot[s]))?,
        });
    }
    Dataset::new(columns)
}

/// Schema describing the non-numeric columns of `ds`.
pub fn schema_of(ds: &Dataset) -> Schema {
    let mut s = Schema::default();
    for c in ds.columns() {
        let t = c.payload.kind();
        if t != ColumnType::Numeric {
            s.types.insert(c.name.clone(), t);
        }
    }
    s
}

/// Write `ds` as CSV; floats use the shortest representation that parses back to the same bits.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = Vec::new();
    for c in ds.columns() {
        match c.payload {
            Payload::Rotation(_) => header.extend(ROT_SUFFIX.iter().map(|s| format!("{}.{s}", c.name))),
            _ => header.push(c.name.clone()),
        }
    }
    let csv_err = |e: csv::Error| KpcError::Io(std::io::Error::other(e.to_string()));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for c in ds.columns() {
            match &c.payload {
                Payload::Numeric(v) => rec.push(format!("{:?}", v[i])),
                Payload::Categorical { codes, labels } => rec.push(labels[codes[i] as usize].clone()),
                Payload::Rotation(v) => rec.extend(v[i].iter().map(|x| format!("{x:?}"))),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(f))
}
