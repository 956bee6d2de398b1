//! Feature/value pairs rendered as sentences.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetTable, FeatureKind};
use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "The {col} is {value}.";
pub const ALT_TEMPLATE: &str = "This {col} is {value}.";
/// Stand-in text for empty or unparseable cells.
pub const UNKNOWN: &str = "unknown";

/// A sentence template with exactly one `{col}` followed by one `{value}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    prefix: String,
    middle: String,
    suffix: String,
}

impl Template {
    pub fn parse(source: &str) -> Result<Self> {
        let bad = || Error::Config(format!("template {source:?} needs one {{col}} followed by one {{value}}"));
        let (prefix, rest) = source.split_once("{col}").ok_or_else(bad)?;
        let (middle, suffix) = rest.split_once("{value}").ok_or_else(bad)?;
        if [prefix, middle, suffix].iter().any(|p| p.contains("{col}") || p.contains("{value}")) {
            return Err(bad());
        }
        Ok(Self {
            source: source.to_string(),
            prefix: prefix.to_string(),
            middle: middle.to_string(),
            suffix: suffix.to_string(),
        })
    }

    pub fn as_str(&self) -> &str {
        &self.source
    }

    /// Instantiate the template. Values are inserted verbatim; an empty value
    /// becomes [`UNKNOWN`].
    pub fn render(&self, column: &str, value: &str) -> String {
        let value = if value.is_empty() { UNKNOWN } else { value };
        let mut s = String::with_capacity(
            self.prefix.len() + column.len() + self.middle.len() + value.len() + self.suffix.len(),
        );
        s.push_str(&self.prefix);
        s.push_str(column);
        s.push_str(&self.middle);
        s.push_str(value);
        s.push_str(&self.suffix);
        s
    }

    /// Inverse of [`render`](Self::render) for sentences whose column and
    /// value do not themselves contain the middle separator.
    pub fn strip<'a>(&self, sentence: &'a str) -> Option<(&'a str, &'a str)> {
        let body = sentence.strip_prefix(&self.prefix)?.strip_suffix(&self.suffix)?;
        let mut parts = body.splitn(3, &self.middle);
        let col = parts.next()?;
        let value = parts.next()?;
        if parts.next().is_some() || col.is_empty() || value.is_empty() {
            return None;
        }
        Some((col, value))
    }
}

impl Default for Template {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("default template is well formed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedCell {
    pub row: usize,
    pub col: usize,
    pub sentence: String,
}

/// Sentences for a whole table: `grid[i * M + m]` indexes into `unique`.
#[derive(Debug, Clone)]
pub struct SerializedDataset {
    pub n_rows: usize,
    pub n_cols: usize,
    pub grid: Vec<usize>,
    pub unique: Vec<String>,
}

impl SerializedDataset {
    pub fn sentence(&self, row: usize, col: usize) -> &str {
        &self.unique[self.grid[row * self.n_cols + col]]
    }
}

pub fn serialize_cell(column_name: &str, value_text: &str) -> String {
    Template::default().render(column_name, value_text)
}

fn cell_text(table: &DatasetTable, row: usize, col: usize) -> &str {
    let cell = table.cell(row, col);
    match table.schema[col].kind {
        // raw token stays as written; only tokens that do not parse are unknown
        FeatureKind::Numeric if cell.value.is_none() => UNKNOWN,
        _ => cell.raw.as_str(),
    }
}

pub fn serialize_row(table: &DatasetTable, row: usize, template: &Template) -> Result<Vec<String>> {
    if row >= table.n_rows() {
        return Err(Error::Invalid(format!("row {row} out of range for {} rows", table.n_rows())));
    }
    Ok(table
        .schema
        .iter()
        .map(|f| template.render(&f.name, cell_text(table, row, f.index)))
        .collect())
}

pub fn serialize_dataset(table: &DatasetTable, template: &Template) -> SerializedDataset {
    let (n, m) = (table.n_rows(), table.n_features());
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut unique = Vec::new();
    let mut grid = Vec::with_capacity(n * m);
    for i in 0..n {
        for f in &table.schema {
            let s = template.render(&f.name, cell_text(table, i, f.index));
            let id = *index.entry(s).or_insert_with_key(|k| {
                unique.push(k.clone());
                unique.len() - 1
            });
            grid.push(id);
        }
    }
    SerializedDataset {
        n_rows: n,
        n_cols: m,
        grid,
        unique,
    }
}
