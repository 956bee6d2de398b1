//! Typed tabular datasets: loading, stratified splits, standardisation and
//! accuracy bookkeeping.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
    pub index: usize,
}

/// One table cell. `raw` is the CSV token verbatim; `value` is set for
/// numeric columns whose token parses as a finite number.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub raw: String,
    pub value: Option<f64>,
}

impl Cell {
    pub fn is_missing(&self, kind: FeatureKind) -> bool {
        match kind {
            FeatureKind::Numeric => self.value.is_none(),
            FeatureKind::Categorical => self.raw.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Feature(usize),
    Label,
}

#[derive(Debug, Clone)]
pub struct DatasetTable {
    pub name: String,
    pub schema: Vec<FeatureSchema>,
    /// Row-major `N x M`.
    cells: Vec<Cell>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub label_column: String,
    layout: Vec<Slot>,
}

impl DatasetTable {
    /// Build a table from in-memory rows (raw text per feature) and raw labels.
    pub fn from_rows(
        name: &str,
        columns: &[(String, FeatureKind)],
        label_column: &str,
        rows: &[Vec<String>],
        raw_labels: &[String],
        class_names: Option<&[String]>,
    ) -> Result<Self> {
        if rows.len() != raw_labels.len() {
            return Err(Error::Invalid(format!(
                "{} rows but {} labels",
                rows.len(),
                raw_labels.len()
            )));
        }
        let schema = build_schema(columns)?;
        let mut cells = Vec::with_capacity(rows.len() * schema.len());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Structural {
                    path: PathBuf::from(name),
                    row: i + 1,
                    detail: format!("expected {} cells, found {}", schema.len(), row.len()),
                });
            }
            for (raw, f) in row.iter().zip(&schema) {
                cells.push(parse_cell(raw, f.kind));
            }
        }
        let (labels, class_names) = encode_labels(raw_labels, class_names)?;
        let mut layout: Vec<Slot> = (0..schema.len()).map(Slot::Feature).collect();
        layout.push(Slot::Label);
        let table = Self {
            name: name.to_string(),
            schema,
            cells,
            labels,
            class_names,
            label_column: label_column.to_string(),
            layout,
        };
        table.check_invariants()?;
        Ok(table)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Invalid("dataset has no rows".into()));
        }
        if self.class_names.len() < 2 {
            return Err(Error::Invalid(format!(
                "need at least 2 classes, found {}",
                self.class_names.len()
            )));
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_kind(&self, kind: FeatureKind) -> usize {
        self.schema.iter().filter(|f| f.kind == kind).count()
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row * self.schema.len() + col]
    }

    pub fn row(&self, row: usize) -> &[Cell] {
        let m = self.schema.len();
        &self.cells[row * m..(row + 1) * m]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|f| f.name == name)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Write the table back as CSV in its source column order.
    pub fn write_csv<W: std::io::Write>(&self, out: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
        let header: Vec<&str> = self
            .layout
            .iter()
            .map(|s| match s {
                Slot::Feature(m) => self.schema[*m].name.as_str(),
                Slot::Label => self.label_column.as_str(),
            })
            .collect();
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let rec: Vec<&str> = self
                .layout
                .iter()
                .map(|s| match s {
                    Slot::Feature(m) => self.cell(i, *m).raw.as_str(),
                    Slot::Label => self.class_names[self.labels[i]].as_str(),
                })
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn build_schema(columns: &[(String, FeatureKind)]) -> Result<Vec<FeatureSchema>> {
    if columns.is_empty() {
        return Err(Error::Invalid("no feature columns declared".into()));
    }
    let mut seen = HashSet::new();
    columns
        .iter()
        .enumerate()
        .map(|(index, (name, kind))| {
            if name.is_empty() {
                return Err(Error::Invalid(format!("column {index} has an empty name")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Invalid(format!("duplicate column `{name}`")));
            }
            Ok(FeatureSchema {
                name: name.clone(),
                kind: *kind,
                index,
            })
        })
        .collect()
}

fn parse_cell(raw: &str, kind: FeatureKind) -> Cell {
    let value = match kind {
        FeatureKind::Numeric => raw.trim().parse::<f64>().ok().filter(|v| v.is_finite()),
        FeatureKind::Categorical => None,
    };
    Cell {
        raw: raw.to_string(),
        value,
    }
}

/// Class ids follow `declared` when given; otherwise distinct labels sorted
/// numerically when they all parse as numbers, lexicographically if not.
fn encode_labels(raw: &[String], declared: Option<&[String]>) -> Result<(Vec<usize>, Vec<String>)> {
    let names: Vec<String> = match declared {
        Some(d) => d.to_vec(),
        None => {
            let mut distinct: Vec<String> = raw
                .iter()
                .collect::<HashSet<_>>()
                .into_iter()
                .cloned()
                .collect();
            let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.trim().parse().ok()).collect();
            if numeric.is_some() {
                distinct.sort_by(|a, b| {
                    let (x, y): (f64, f64) = (a.trim().parse().unwrap(), b.trim().parse().unwrap());
                    x.total_cmp(&y).then_with(|| a.cmp(b))
                });
            } else {
                distinct.sort();
            }
            distinct
        }
    };
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = raw
        .iter()
        .map(|l| {
            index
                .get(l.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("label `{l}` not among declared classes")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, names))
}

// ------------------------------------------------------------------ manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_categorical: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_numeric: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

/// JSON description of a CSV dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    /// CSV location, relative to the manifest file. Defaults to `<name>.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    pub label_column: String,
    pub columns: Vec<ColumnSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delimiter: Option<char>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub expected: ExpectedCounts,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn csv_path(&self, manifest_path: &Path) -> PathBuf {
        let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        match &self.csv {
            Some(p) => dir.join(p),
            None => dir.join(format!("{}.csv", self.name)),
        }
    }

    pub fn delimiter_byte(&self) -> Result<u8> {
        let d = self.delimiter.unwrap_or(',');
        u8::try_from(d as u32)
            .ok()
            .filter(|b| b.is_ascii())
            .ok_or_else(|| Error::Config(format!("delimiter {d:?} is not a single ASCII byte")))
    }

    pub fn validate(&self, table: &DatasetTable) -> Result<()> {
        let checks = [
            ("n", self.expected.n, table.n_rows()),
            ("m", self.expected.m, table.n_features()),
            (
                "n_categorical",
                self.expected.n_categorical,
                table.n_kind(FeatureKind::Categorical),
            ),
            ("n_numeric", self.expected.n_numeric, table.n_kind(FeatureKind::Numeric)),
            ("classes", self.expected.classes, table.n_classes()),
        ];
        for (field, want, got) in checks {
            if let Some(want) = want {
                if want != got {
                    return Err(Error::Manifest(format!(
                        "{}: expected {field} = {want}, found {got}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Load `<manifest>` and the CSV it points at.
pub fn load_dataset(manifest_path: &Path) -> Result<(Manifest, DatasetTable)> {
    let manifest = Manifest::load(manifest_path)?;
    let table = load_csv(&manifest.csv_path(manifest_path), &manifest)?;
    Ok((manifest, table))
}

/// Parse a headed CSV according to `manifest` and check the declared counts.
///
/// Columns absent from the manifest (other than the label) are ignored.
/// Numeric tokens that do not parse are kept verbatim and marked missing.
pub fn load_csv(path: &Path, manifest: &Manifest) -> Result<DatasetTable> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(manifest.delimiter_byte()?)
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let position = |name: &str| header.iter().position(|h| h == name);

    let label_pos = position(&manifest.label_column).ok_or_else(|| {
        Error::Manifest(format!(
            "label column `{}` not in header of {}",
            manifest.label_column,
            path.display()
        ))
    })?;
    let feature_pos = manifest
        .columns
        .iter()
        .map(|c| {
            position(&c.name).ok_or_else(|| {
                Error::Manifest(format!("column `{}` not in header of {}", c.name, path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ignored: Vec<&str> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_pos && !feature_pos.contains(i))
        .map(|(_, h)| h.as_str())
        .collect();
    if !ignored.is_empty() {
        log::warn!("{}: ignoring undeclared columns {ignored:?}", path.display());
    }

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        // header is line 1
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::Structural {
                path: path.to_path_buf(),
                row: line,
                detail: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push(feature_pos.iter().map(|&p| rec[p].to_string()).collect::<Vec<_>>());
        labels.push(rec[label_pos].to_string());
    }

    let columns: Vec<(String, FeatureKind)> =
        manifest.columns.iter().map(|c| (c.name.clone(), c.kind)).collect();
    let mut table = DatasetTable::from_rows(
        &manifest.name,
        &columns,
        &manifest.label_column,
        &rows,
        &labels,
        manifest.class_names.as_deref(),
    )?;

    let mut slots: Vec<(usize, Slot)> = feature_pos
        .iter()
        .enumerate()
        .map(|(m, &p)| (p, Slot::Feature(m)))
        .collect();
    slots.push((label_pos, Slot::Label));
    slots.sort_by_key(|(p, _)| *p);
    table.layout = slots.into_iter().map(|(_, s)| s).collect();

    for (m, f) in table.schema.iter().enumerate() {
        if f.kind == FeatureKind::Numeric {
            let missing = (0..table.n_rows()).filter(|&i| table.cell(i, m).value.is_none()).count();
            if missing > 0 {
                log::debug!("{}: column `{}` has {missing} missing numeric cells", table.name, f.name);
            }
        }
    }
    manifest.validate(&table)?;
    Ok(table)
}

// -------------------------------------------------------------------- splits

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fraction: f64,
}

/// Per-class held-out counts: `floor(n_c * fraction)` plus the remainder up
/// to `round(n * fraction)`, handed out one each by descending fractional
/// part, ties to the lower class id.
pub fn stratified_counts(class_sizes: &[usize], fraction: f64) -> Vec<usize> {
    let total_n: usize = class_sizes.iter().sum();
    let target = (total_n as f64 * fraction).round() as usize;
    let mut counts = Vec::with_capacity(class_sizes.len());
    let mut fracs = Vec::with_capacity(class_sizes.len());
    for (c, &n) in class_sizes.iter().enumerate() {
        let exact = n as f64 * fraction;
        let base = ((exact + 1e-9).floor() as usize).min(n);
        counts.push(base);
        // quantised so float noise cannot reorder genuine ties
        let frac = ((exact - base as f64).max(0.0) * 1e9).round() as i64;
        fracs.push((c, frac));
    }
    let assigned: usize = counts.iter().sum();
    let mut remainder = target.saturating_sub(assigned);
    fracs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, frac) in fracs {
        if remainder == 0 {
            break;
        }
        if frac > 0 && counts[c] < class_sizes[c] {
            counts[c] += 1;
            remainder -= 1;
        }
    }
    counts
}

/// Split `indices` so that each class contributes its [`stratified_counts`]
/// share to the held-out part. Returns `(kept, held_out)`, both ascending.
fn stratified_partition(
    indices: &[usize],
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in indices {
        let l = *labels
            .get(i)
            .ok_or_else(|| Error::Split(format!("index {i} has no label")))?;
        if l >= n_classes {
            return Err(Error::Split(format!("label {l} >= {n_classes} classes")));
        }
        by_class[l].push(i);
    }
    if let Some(empty) = by_class.iter().position(|m| m.is_empty()) {
        return Err(Error::Split(format!("class {empty} has no samples")));
    }
    let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let counts = stratified_counts(&sizes, fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::new();
    let mut held = Vec::new();
    for (members, k) in by_class.iter_mut().zip(counts) {
        members.sort_unstable();
        members.shuffle(&mut rng);
        held.extend_from_slice(&members[..k]);
        kept.extend_from_slice(&members[k..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    Ok((kept, held))
}

pub fn stratified_split(table: &DatasetTable, test_fraction: f64, seed: u64) -> Result<SplitIndices> {
    let all: Vec<usize> = (0..table.n_rows()).collect();
    let (train, test) = stratified_partition(&all, &table.labels, table.n_classes(), test_fraction, seed)?;
    Ok(SplitIndices {
        train,
        test,
        seed,
        fraction: test_fraction,
    })
}

/// Carve a stratified validation set out of `train`. Strata are the classes
/// present in `train`. Returns `(fit, val)`.
pub fn validation_split(
    train: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let present: BTreeMap<usize, usize> = train
        .iter()
        .map(|&i| labels.get(i).copied())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Split("training index without a label".into()))?
        .into_iter()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(dense, class)| (class, dense))
        .collect();
    let dense_labels: Vec<usize> = labels
        .iter()
        .map(|l| present.get(l).copied().unwrap_or(usize::MAX))
        .collect();
    stratified_partition(train, &dense_labels, present.len(), fraction, seed)
}

// -------------------------------------------------------------- standardiser

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// `(mean, std)` per schema column; `None` for categorical columns.
    pub stats: Vec<Option<(f64, f64)>>,
}

impl Standardizer {
    pub const MIN_STD: f64 = 1e-12;

    /// Population mean and standard deviation over the non-missing cells of
    /// `rows`.
    pub fn fit(table: &DatasetTable, rows: &[usize]) -> Self {
        let stats = table
            .schema
            .iter()
            .enumerate()
            .map(|(m, f)| {
                if f.kind != FeatureKind::Numeric {
                    return None;
                }
                let vals: Vec<f64> = rows.iter().filter_map(|&i| table.cell(i, m).value).collect();
                if vals.is_empty() {
                    return Some((0.0, 1.0));
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let std = var.sqrt();
                Some((mean, if std < Self::MIN_STD { 1.0 } else { std }))
            })
            .collect();
        Self { stats }
    }

    /// z-score of a numeric cell; missing cells impute to the fitted mean (z = 0).
    pub fn transform(&self, table: &DatasetTable, row: usize, col: usize) -> f64 {
        match (self.stats[col], table.cell(row, col).value) {
            (Some((mean, std)), Some(v)) => (v - mean) / std,
            _ => 0.0,
        }
    }
}

// ------------------------------------------------------------------- metrics

/// Percentage of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Mean and sample standard deviation (n - 1); a single value has std 0.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Invalid("no runs to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
