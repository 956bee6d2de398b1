//! Two-dimensional PCA of embedding vectors, with CSV and SVG output.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetTable;
use crate::embed::EmbeddedTensor;
use crate::error::{Error, Result};
use crate::seeds;

pub const DEFAULT_MAX_UNIQUE: usize = 20;

/// Points whose coordinates are within this of each other are treated as
/// having zero variance.
const ZERO_VARIANCE: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    /// `[x, y]` per input vector.
    pub coords: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    /// Unit principal directions in input space.
    pub components: [Vec<f64>; 2],
    pub labels: Vec<String>,
    /// Colour class per point, e.g. the feature a value belongs to.
    pub groups: Vec<String>,
}

/// Eigen-decomposition of a symmetric row-major `n x n` matrix by cyclic
/// Jacobi rotations. Returns eigenvalues (descending) and the matching
/// eigenvectors as rows.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    assert_eq!(matrix.len(), n * n, "matrix must be n x n");
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum();
        if off.sqrt() <= f64::EPSILON * 1e-3 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut at = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[at].abs() {
            at = i;
        }
    }
    if v.get(at).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// A unit vector orthogonal to `u`, from the first basis vector that is not
/// nearly parallel to it.
fn orthogonal_to(u: &[f64]) -> Vec<f64> {
    let d = u.len();
    (0..d)
        .map(|k| {
            let mut e: Vec<f64> = (0..d).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
            let proj = u[k];
            e.iter_mut().zip(u).for_each(|(x, ui)| *x -= proj * ui);
            e
        })
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .map(|mut e| {
            normalize(&mut e);
            e
        })
        .unwrap_or_default()
}

/// Top-two principal components of `k` row vectors of width `d`, stored
/// row-major in `data`.
pub fn pca2(data: &[f64], k: usize, d: usize) -> Result<Projection2D> {
    if k < 3 {
        return Err(Error::Invalid(format!("PCA needs at least 3 points, got {k}")));
    }
    if d < 2 {
        return Err(Error::Invalid(format!("PCA needs at least 2 dimensions, got {d}")));
    }
    if data.len() != k * d {
        return Err(Error::Invalid(format!("{} values do not form {k} x {d}", data.len())));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Invalid("PCA input holds non-finite values".into()));
    }
    let mut mean = vec![0.0; d];
    for row in data.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= k as f64);
    let x: Vec<f64> = data.chunks_exact(d).flat_map(|row| row.iter().zip(&mean).map(|(a, m)| a - m)).collect();
    let total: f64 = x.iter().map(|v| v * v).sum();
    let unit = |i: usize| (0..d).map(|j| if j == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    if total <= ZERO_VARIANCE {
        return Ok(Projection2D {
            coords: vec![[0.0, 0.0]; k],
            explained_variance: [0.0, 0.0],
            components: [unit(0), unit(1)],
            labels: vec![String::new(); k],
            groups: vec![String::new(); k],
        });
    }

    // eigenpairs of the scatter matrix X^T X, either directly or through the
    // K x K Gram matrix X X^T, whichever is smaller
    let (values, mut dirs): (Vec<f64>, Vec<Vec<f64>>) = if k < d {
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let g = dot(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d]);
                gram[i * k + j] = g;
                gram[j * k + i] = g;
            }
        }
        let (vals, vecs) = symmetric_eigen(&gram, k);
        let dirs = vecs
            .iter()
            .take(2)
            .map(|u| {
                let mut v = vec![0.0; d];
                for (i, &ui) in u.iter().enumerate() {
                    v.iter_mut().zip(&x[i * d..(i + 1) * d]).for_each(|(a, xi)| *a += ui * xi);
                }
                v
            })
            .collect();
        (vals, dirs)
    } else {
        let mut scatter = vec![0.0; d * d];
        for row in x.chunks_exact(d) {
            for a in 0..d {
                for b in 0..=a {
                    scatter[a * d + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                scatter[b * d + a] = scatter[a * d + b];
            }
        }
        let (vals, vecs) = symmetric_eigen(&scatter, d);
        (vals, vecs.into_iter().take(2).collect())
    };
    let lambda = [values[0].max(0.0), values.get(1).copied().unwrap_or(0.0).max(0.0)];

    normalize(&mut dirs[0]);
    fix_sign(&mut dirs[0]);
    let rank_one = lambda[1] <= total * 1e-15;
    if rank_one {
        dirs[1] = orthogonal_to(&dirs[0]);
    } else {
        // re-orthogonalise against the first direction before normalising
        let p = dot(&dirs[1], &dirs[0]);
        let first = dirs[0].clone();
        dirs[1].iter_mut().zip(&first).for_each(|(a, b)| *a -= p * b);
        normalize(&mut dirs[1]);
    }
    fix_sign(&mut dirs[1]);

    let coords = x
        .chunks_exact(d)
        .map(|row| {
            let y = if rank_one { 0.0 } else { dot(row, &dirs[1]) };
            [dot(row, &dirs[0]), y]
        })
        .collect();
    let [d0, d1]: [Vec<f64>; 2] = [dirs[0].clone(), dirs[1].clone()];
    Ok(Projection2D {
        coords,
        explained_variance: [lambda[0] / total, if rank_one { 0.0 } else { lambda[1] / total }],
        components: [d0, d1],
        labels: vec![String::new(); k],
        groups: vec![String::new(); k],
    })
}

/// At most `max_unique` distinct non-empty values of a column, in order of
/// first appearance. Larger sets are subsampled with a seeded generator.
pub fn sample_values(table: &DatasetTable, column: usize, max_unique: usize, seed: u64) -> Result<Vec<String>> {
    if column >= table.n_features() {
        return Err(Error::Invalid(format!("column {column} out of range")));
    }
    let mut seen = HashSet::new();
    let distinct: Vec<&str> = (0..table.n_rows())
        .map(|i| table.cell(i, column).raw.as_str())
        .filter(|v| !v.trim().is_empty() && seen.insert(*v))
        .collect();
    if distinct.len() <= max_unique {
        return Ok(distinct.into_iter().map(str::to_string).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, seeds::SAMPLE));
    let mut picked = (0..distinct.len()).choose_multiple(&mut rng, max_unique);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| distinct[i].to_string()).collect())
}

/// Embedding vectors for the sampled values of `columns`. Each value's
/// vector is taken from its first occurrence in the tensor; labels are the
/// values, groups the column names.
pub fn value_vectors(
    table: &DatasetTable,
    tensor: &EmbeddedTensor,
    columns: &[usize],
    max_unique: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<String>, Vec<String>)> {
    if (tensor.n, tensor.m) != (table.n_rows(), table.n_features()) {
        return Err(Error::Config(format!(
            "embeddings of shape ({}, {}) do not match table {} x {}",
            tensor.n,
            tensor.m,
            table.n_rows(),
            table.n_features()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for &col in columns {
        for value in sample_values(table, col, max_unique, seed)? {
            let row = (0..table.n_rows())
                .find(|&i| table.cell(i, col).raw == value)
                .expect("sampled value occurs in its column");
            data.extend(tensor.cell(row, col).iter().map(|&v| f64::from(v)));
            labels.push(value);
            groups.push(table.schema[col].name.clone());
        }
    }
    Ok((data, labels, groups))
}

/// PCA of the value vectors of `columns`, jointly or one projection per
/// column.
pub fn project_columns(
    table: &DatasetTable,
    tensor: &EmbeddedTensor,
    columns: &[usize],
    max_unique: usize,
    seed: u64,
    joint: bool,
) -> Result<Vec<Projection2D>> {
    let sets: Vec<Vec<usize>> = if joint {
        vec![columns.to_vec()]
    } else {
        columns.iter().map(|&c| vec![c]).collect()
    };
    sets.iter()
        .map(|cols| {
            let (data, labels, groups) = value_vectors(table, tensor, cols, max_unique, seed)?;
            let mut p = pca2(&data, labels.len(), tensor.d)?;
            p.labels = labels;
            p.groups = groups;
            Ok(p)
        })
        .collect()
}

pub fn to_csv(p: &Projection2D) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "x", "y", "group"])?;
    for ((c, label), group) in p.coords.iter().zip(&p.labels).zip(&p.groups) {
        w.write_record([label.as_str(), &format!("{:.8e}", c[0]), &format!("{:.8e}", c[1]), group])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv of utf-8 fields"))
}

/// Parse `(label, x, y)` rows written by [`to_csv`].
pub fn read_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Invalid(format!("bad coordinate in row {:?}", rec)))
        };
        out.push((rec.get(0).unwrap_or_default().to_string(), num(1)?, num(2)?));
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

pub fn to_svg(p: &Projection2D, title: &str) -> String {
    let (w, h, margin) = (1000.0, 700.0, 60.0);
    let span = |axis: usize| {
        let lo = p.coords.iter().map(|c| c[axis]).fold(f64::INFINITY, f64::min);
        let hi = p.coords.iter().map(|c| c[axis]).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || hi - lo < 1e-12 {
            (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = span(0);
    let (y0, y1) = span(1);
    let sx = |x: f64| margin + (x - x0) / (x1 - x0) * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - y0) / (y1 - y0) * (h - 2.0 * margin);

    let mut groups: Vec<&str> = Vec::new();
    for g in &p.groups {
        if !groups.contains(&g.as_str()) {
            groups.push(g);
        }
    }
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    s.push_str("<style>\n  text { font-family: sans-serif; font-size: 11px; }\n");
    for (i, _) in groups.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "  .g{i} {{ fill: {c}; }}");
    }
    s.push_str("</style>\n");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="30" style="font-size: 14px">{} (PC1 {:.1}%, PC2 {:.1}%)</text>"#,
        xml_escape(title),
        100.0 * p.explained_variance[0],
        100.0 * p.explained_variance[1]
    );
    for (i, g) in groups.iter().enumerate() {
        let y = 50.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<circle class="g{i}" cx="{}" cy="{}" r="5"/>"#, w - 180.0, y - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, w - 170.0, xml_escape(g));
    }
    for ((c, label), g) in p.coords.iter().zip(&p.labels).zip(&p.groups) {
        let class = groups.iter().position(|x| x == g).unwrap_or(0);
        let (x, y) = (sx(c[0]), sy(c[1]));
        let _ = writeln!(s, r#"<circle class="g{class}" cx="{x:.2}" cy="{y:.2}" r="4"/>"#);
        if !label.is_empty() {
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 6.0, y - 6.0, xml_escape(label));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlotFormat {
    Csv,
    Svg,
}

pub fn emit(p: &Projection2D, path: &Path, format: PlotFormat, title: &str) -> Result<()> {
    let text = match format {
        PlotFormat::Csv => to_csv(p)?,
        PlotFormat::Svg => to_svg(p, title),
    };
    std::fs::write(path, text)?;
    Ok(())
}
