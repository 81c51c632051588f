use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMeta, TabularDataset};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSelectMethod {
    Random,
    MutualInformation,
    Pca,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSelectConfig {
    pub method: FeatureSelectMethod,
    pub d_target: usize,
    pub seed: u64,
    #[serde(default = "default_bins")]
    pub mi_bins: usize,
}

fn default_bins() -> usize {
    16
}

impl FeatureSelectConfig {
    pub fn new(method: FeatureSelectMethod, d_target: usize, seed: u64) -> Self {
        Self {
            method,
            d_target,
            seed,
            mi_bins: default_bins(),
        }
    }
}

/// A replayable column map from a source schema to a reduced one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum FeatureTransform {
    Identity {
        source_columns: Vec<String>,
    },
    Indices {
        source_columns: Vec<String>,
        indices: Vec<usize>,
        seed: u64,
    },
    /// `out = (x - mean) · componentsᵀ`; `components` is row-major
    /// `[d_target x source width]`.
    Projection {
        source_columns: Vec<String>,
        mean: Vec<f64>,
        components: Vec<f64>,
        explained_variance: Vec<f64>,
        seed: u64,
    },
}

impl FeatureTransform {
    pub fn identity(ds: &TabularDataset) -> Self {
        FeatureTransform::Identity {
            source_columns: column_names(ds),
        }
    }

    pub fn source_columns(&self) -> &[String] {
        match self {
            FeatureTransform::Identity { source_columns }
            | FeatureTransform::Indices { source_columns, .. }
            | FeatureTransform::Projection { source_columns, .. } => source_columns,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            FeatureTransform::Identity { source_columns } => source_columns.len(),
            FeatureTransform::Indices { indices, .. } => indices.len(),
            FeatureTransform::Projection { explained_variance, .. } => explained_variance.len(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSelection {
    pub transform: FeatureTransform,
    /// Per-column mutual information, for the MI method.
    pub scores: Option<Vec<f64>>,
    /// Set when MI scores were all zero and column order was used instead.
    pub degenerate: bool,
}

fn column_names(ds: &TabularDataset) -> Vec<String> {
    ds.columns.iter().map(|c| c.name.clone()).collect()
}

/// Fits a feature transform on `rows` of `ds`.
pub fn select_features(ds: &TabularDataset, rows: &[usize], cfg: &FeatureSelectConfig) -> Result<FeatureSelection> {
    let d = ds.n_features();
    if cfg.d_target == 0 || cfg.d_target > d {
        return Err(Error::Config(format!("d_target {} must be in [1, {d}]", cfg.d_target)));
    }
    if rows.is_empty() {
        return Err(Error::Config("feature selection needs at least one row".into()));
    }
    let source_columns = column_names(ds);
    match cfg.method {
        FeatureSelectMethod::Random => {
            let mut idx: Vec<usize> = (0..d).collect();
            idx.shuffle(&mut seeded(cfg.seed));
            idx.truncate(cfg.d_target);
            Ok(FeatureSelection {
                transform: FeatureTransform::Indices {
                    source_columns,
                    indices: idx,
                    seed: cfg.seed,
                },
                scores: None,
                degenerate: false,
            })
        }
        FeatureSelectMethod::MutualInformation => {
            let labels = ds.gather_labels(rows);
            let scores: Vec<f64> = (0..d)
                .map(|j| {
                    let col: Vec<f64> = rows.iter().map(|&r| ds.row(r)[j]).collect();
                    mutual_information(&col, &labels, ds.class_count, cfg.mi_bins)
                })
                .collect();
            let degenerate = scores.iter().all(|&s| s == 0.0);
            let mut idx: Vec<usize> = (0..d).collect();
            if !degenerate {
                idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            }
            idx.truncate(cfg.d_target);
            Ok(FeatureSelection {
                transform: FeatureTransform::Indices {
                    source_columns,
                    indices: idx,
                    seed: cfg.seed,
                },
                scores: Some(scores),
                degenerate,
            })
        }
        FeatureSelectMethod::Pca => {
            let n = rows.len();
            let mut mean = vec![0.0; d];
            for &r in rows {
                for (m, v) in mean.iter_mut().zip(ds.row(r)) {
                    *m += v / n as f64;
                }
            }
            let centered = DMatrix::from_fn(n, d, |i, j| ds.row(rows[i])[j] - mean[j]);
            let cov = centered.transpose() * &centered / n as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
            let mut components = Vec::with_capacity(cfg.d_target * d);
            let mut explained = Vec::with_capacity(cfg.d_target);
            for &k in order.iter().take(cfg.d_target) {
                let v = eig.eigenvectors.column(k);
                // Fix the sign so the largest-magnitude entry is positive.
                let pivot = (0..d)
                    .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
                    .unwrap_or(0);
                let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
                components.extend(v.iter().map(|x| sign * x));
                explained.push(eig.eigenvalues[k].max(0.0));
            }
            Ok(FeatureSelection {
                transform: FeatureTransform::Projection {
                    source_columns,
                    mean,
                    components,
                    explained_variance: explained,
                    seed: cfg.seed,
                },
                scores: None,
                degenerate: false,
            })
        }
    }
}

/// Histogram mutual information (nats) between a continuous column and a
/// discrete label, with `bins` equal-width bins over the column's range.
pub fn mutual_information(col: &[f64], labels: &[usize], classes: usize, bins: usize) -> f64 {
    let n = col.len();
    if n == 0 || bins == 0 {
        return 0.0;
    }
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let bin = |v: f64| {
        if width <= 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut joint = vec![0usize; bins * classes];
    let mut pb = vec![0usize; bins];
    let mut py = vec![0usize; classes];
    for (&v, &y) in col.iter().zip(labels) {
        let b = bin(v);
        joint[b * classes + y] += 1;
        pb[b] += 1;
        py[y] += 1;
    }
    let nf = n as f64;
    let mut mi = 0.0;
    for b in 0..bins {
        for y in 0..classes {
            let c = joint[b * classes + y];
            if c > 0 {
                let pj = c as f64 / nf;
                mi += pj * (pj / ((pb[b] as f64 / nf) * (py[y] as f64 / nf))).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Applies a fitted transform; the dataset must have the transform's
/// source schema.
pub fn apply_transform(ds: &TabularDataset, t: &FeatureTransform) -> Result<TabularDataset> {
    let names = column_names(ds);
    if names.as_slice() != t.source_columns() {
        return Err(Error::Transform(format!(
            "dataset columns {:?} do not match transform columns {:?}",
            names,
            t.source_columns()
        )));
    }
    let n = ds.n_rows();
    match t {
        FeatureTransform::Identity { .. } => Ok(ds.clone()),
        FeatureTransform::Indices { indices, .. } => {
            if let Some(&bad) = indices.iter().find(|&&i| i >= ds.n_features()) {
                return Err(Error::Transform(format!("column index {bad} out of range")));
            }
            let mut x = Vec::with_capacity(n * indices.len());
            for r in 0..n {
                let row = ds.row(r);
                x.extend(indices.iter().map(|&j| row[j]));
            }
            let cols = indices.iter().map(|&j| ds.columns[j].clone()).collect();
            ds.with_features(x, cols)
        }
        FeatureTransform::Projection {
            mean,
            components,
            explained_variance,
            ..
        } => {
            let d = ds.n_features();
            let k = explained_variance.len();
            if components.len() != k * d || mean.len() != d {
                return Err(Error::Transform("projection shape does not match dataset width".into()));
            }
            let mut x = Vec::with_capacity(n * k);
            for r in 0..n {
                let row = ds.row(r);
                for c in 0..k {
                    let comp = &components[c * d..(c + 1) * d];
                    x.push((0..d).map(|j| (row[j] - mean[j]) * comp[j]).sum());
                }
            }
            let cols = (0..k).map(|c| ColumnMeta::numeric(format!("pc{c}"))).collect();
            ds.with_features(x, cols)
        }
    }
}
