//! Desk-scale datasets: synthetic cluster generation and CSV I/O.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// A labeled feature table.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of distinct classes (labels are arbitrary non-negative ints).
    pub fn class_count(&self) -> usize {
        let mut sorted = self.labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        sorted.len()
    }

    /// Example indices grouped by class, classes in ascending label order.
    pub fn class_members(&self) -> Vec<(usize, Vec<usize>)> {
        let mut classes: Vec<usize> = self.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        classes
            .into_iter()
            .map(|c| {
                let members = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
                (c, members)
            })
            .collect()
    }

    /// Rows "label,x1,...,xD" with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (i, &label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for v in self.features.row(i) {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    /// Parse "label,x1,...,xD" rows; no header, all rows equal width.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label_field = fields.next().unwrap_or("");
            let label: usize = label_field.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad label '{label_field}'"),
            })?;
            let mut row = Vec::new();
            for field in fields {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad number '{field}'"),
                })?;
                row.push(v);
            }
            if row.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "row has no feature columns".into(),
                });
            }
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("row has {} columns, expected {}", row.len(), w),
                    });
                }
                _ => {}
            }
            labels.push(label);
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse {
                line: 0,
                message: "empty dataset".into(),
            });
        }
        let d = width.unwrap();
        let mut features = Array2::zeros((rows.len(), d));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                features[(i, j)] = v;
            }
        }
        Ok(Self { features, labels })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv(&text)
    }

    /// A copy restricted to the given example indices.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let d = self.dim();
        let mut features = Array2::zeros((indices.len(), d));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            for c in 0..d {
                features[(row, c)] = self.features[(i, c)];
            }
            labels.push(self.labels[i]);
        }
        Self { features, labels }
    }
}

/// Synthetic clusters: class means uniform on the unit sphere, examples
/// scattered around them with Gaussian noise of scale `spread`.
pub fn gen_synthetic(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::Config("per_class and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Array2::zeros((classes, dim));
    for c in 0..classes {
        let mut norm = 0.0;
        for j in 0..dim {
            let v: f64 = StandardNormal.sample(&mut rng);
            means[(c, j)] = v;
            norm += v * v;
        }
        let norm = norm.sqrt().max(1e-12);
        for j in 0..dim {
            means[(c, j)] /= norm;
        }
    }
    let n = classes * per_class;
    let mut features = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    for c in 0..classes {
        for e in 0..per_class {
            let row = c * per_class + e;
            for j in 0..dim {
                let z: f64 = noise.sample(&mut rng);
                features[(row, j)] = means[(c, j)] + spread * z;
            }
            labels.push(c);
        }
    }
    Ok(Dataset { features, labels })
}
