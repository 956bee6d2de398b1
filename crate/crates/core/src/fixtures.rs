//! Small generated datasets for tests, demos and CI.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{ColumnSpec, DatasetTable, ExpectedCounts, FeatureKind, Manifest};
use crate::error::Result;

pub const SYNTHETIC_NAME: &str = "synthetic";
pub const IMBALANCED_NAME: &str = "imbalanced";

const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const SIZES: [&str; 3] = ["small", "medium", "large"];

/// A generated dataset: its manifest plus the rows as CSV-ready text.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: Manifest,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Fixture {
    pub fn table(&self) -> Result<DatasetTable> {
        let label_pos = self
            .header
            .iter()
            .position(|h| *h == self.manifest.label_column)
            .expect("fixture header holds its label");
        let columns: Vec<(String, FeatureKind)> =
            self.manifest.columns.iter().map(|c| (c.name.clone(), c.kind)).collect();
        let positions: Vec<usize> = self
            .manifest
            .columns
            .iter()
            .map(|c| self.header.iter().position(|h| *h == c.name).expect("declared column"))
            .collect();
        let features: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| positions.iter().map(|&p| r[p].clone()).collect())
            .collect();
        let labels: Vec<String> = self.rows.iter().map(|r| r[label_pos].clone()).collect();
        let table = DatasetTable::from_rows(
            &self.manifest.name,
            &columns,
            &self.manifest.label_column,
            &features,
            &labels,
            self.manifest.class_names.as_deref(),
        )?;
        self.manifest.validate(&table)?;
        Ok(table)
    }

    /// Write `<dir>/<name>.csv` and `<dir>/<name>.json`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let csv_path = dir.join(format!("{}.csv", self.manifest.name));
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        let manifest_path = dir.join(format!("{}.json", self.manifest.name));
        let mut manifest = self.manifest.clone();
        manifest.csv = Some(format!("{}.csv", self.manifest.name));
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest_path)
    }
}

fn column(name: &str, kind: FeatureKind) -> ColumnSpec {
    ColumnSpec {
        name: name.to_string(),
        kind,
    }
}

/// 200 rows, three categorical and two numeric features. The label is
/// `warm` for red or yellow items and `cool` otherwise, so only `color`
/// carries signal.
pub fn synthetic_separable() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_101);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut rows = Vec::with_capacity(200);
    for i in 0..200 {
        // cycle colors so the classes stay balanced
        let color = COLORS[i % COLORS.len()];
        let shape = SHAPES[rng.random_range(0..SHAPES.len())];
        let size = SIZES[rng.random_range(0..SIZES.len())];
        let weight = 50.0 + 10.0 * noise.sample(&mut rng);
        let height = 1.7 + 0.1 * noise.sample(&mut rng);
        let label = if matches!(color, "red" | "yellow") { "warm" } else { "cool" };
        rows.push(vec![
            color.to_string(),
            shape.to_string(),
            format!("{weight:.1}"),
            size.to_string(),
            format!("{height:.2}"),
            label.to_string(),
        ]);
    }
    Fixture {
        manifest: Manifest {
            name: SYNTHETIC_NAME.into(),
            csv: None,
            label_column: "label".into(),
            columns: vec![
                column("color", FeatureKind::Categorical),
                column("shape", FeatureKind::Categorical),
                column("weight", FeatureKind::Numeric),
                column("size", FeatureKind::Categorical),
                column("height", FeatureKind::Numeric),
            ],
            delimiter: None,
            class_names: Some(vec!["cool".into(), "warm".into()]),
            expected: ExpectedCounts {
                n: Some(200),
                m: Some(5),
                n_categorical: Some(3),
                n_numeric: Some(2),
                classes: Some(2),
            },
        },
        header: ["color", "shape", "weight", "size", "height", "label"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

/// 1000 rows with a 70/30 class prior and features drawn independently of
/// the label, in the spirit of the German credit data.
pub fn imbalanced_uninformative() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(19_940_601);
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let purposes = ["car", "furniture", "radio/tv", "education", "business"];
    let housing = ["own", "rent", "free"];
    let mut labels: Vec<&str> = std::iter::repeat_n("good", 700).chain(std::iter::repeat_n("bad", 300)).collect();
    // deterministic interleaving of the two classes
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let rows = labels
        .iter()
        .map(|label| {
            let duration = rng.random_range(4..=72);
            let z: f64 = noise.sample(&mut rng);
            let amount = (3000.0 + 1500.0 * z).abs();
            vec![
                duration.to_string(),
                purposes[rng.random_range(0..purposes.len())].to_string(),
                format!("{amount:.0}"),
                housing[rng.random_range(0..housing.len())].to_string(),
                rng.random_range(19..=75).to_string(),
                label.to_string(),
            ]
        })
        .collect();
    Fixture {
        manifest: Manifest {
            name: IMBALANCED_NAME.into(),
            csv: None,
            label_column: "class".into(),
            columns: vec![
                column("duration", FeatureKind::Numeric),
                column("purpose", FeatureKind::Categorical),
                column("credit_amount", FeatureKind::Numeric),
                column("housing", FeatureKind::Categorical),
                column("age", FeatureKind::Numeric),
            ],
            delimiter: None,
            class_names: Some(vec!["bad".into(), "good".into()]),
            expected: ExpectedCounts {
                n: Some(1000),
                m: Some(5),
                n_categorical: Some(2),
                n_numeric: Some(3),
                classes: Some(2),
            },
        },
        header: ["duration", "purpose", "credit_amount", "housing", "age", "class"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}
