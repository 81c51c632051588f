//! The tabular dataset type shared by every module.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Provenance of one feature column. `center`/`scale` record the affine map
/// applied during preprocessing (`z = (raw - center) / scale`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub categories: Vec<String>,
    pub center: f64,
    pub scale: f64,
}

impl ColumnMeta {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: ColumnKind::Numeric,
            categories: Vec::new(),
            center: 0.0,
            scale: 1.0,
        }
    }

    /// Maps a raw value into the preprocessed feature space.
    pub fn encode(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    pub class_count: usize,
    pub columns: Vec<ColumnMeta>,
    pub split: Split,
}

impl TabularDataset {
    /// Builds a dataset from row-major features. Columns default to numeric
    /// with an identity preprocessing map and the split is empty.
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if n_features == 0 || features.len() != labels.len() * n_features {
            return Err(Error::Shape {
                op: "dataset",
                left: vec![labels.len(), n_features],
                right: vec![features.len()],
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Label {
                index,
                label,
                classes: class_count,
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at row {}, column {}",
                pos / n_features,
                pos % n_features
            )));
        }
        let columns = (0..n_features).map(|j| ColumnMeta::numeric(format!("x{j}"))).collect();
        Ok(Self {
            name: name.into(),
            features,
            n_features,
            labels,
            class_count,
            columns,
            split: Split::default(),
        })
    }

    pub fn with_split(mut self, split: Split) -> Result<Self> {
        let n = self.n_rows();
        let mut seen = vec![false; n];
        for &i in split.train.iter().chain(&split.val).chain(&split.test) {
            if i >= n || seen[i] {
                return Err(Error::Config(format!("split index {i} is out of range or repeated")));
            }
            seen[i] = true;
        }
        self.split = split;
        Ok(self)
    }

    pub fn with_columns(mut self, columns: Vec<ColumnMeta>) -> Result<Self> {
        if columns.len() != self.n_features {
            return Err(Error::Shape {
                op: "dataset columns",
                left: vec![self.n_features],
                right: vec![columns.len()],
            });
        }
        self.columns = columns;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Row-major features of the given rows.
    pub fn gather_features(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        out
    }

    pub fn gather_labels(&self, rows: &[usize]) -> Vec<usize> {
        rows.iter().map(|&r| self.labels[r]).collect()
    }

    /// Per-class row counts over `rows`.
    pub fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &r in rows {
            counts[self.labels[r]] += 1;
        }
        counts
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).collect()
    }

    /// Reorders feature columns (`new[j] = old[perm[j]]`) and relabels classes
    /// (`new_label = label_perm[old_label]`).
    pub fn permuted(&self, feature_perm: &[usize], label_perm: &[usize]) -> Result<Self> {
        let d = self.n_features;
        if !is_permutation(feature_perm, d) || !is_permutation(label_perm, self.class_count) {
            return Err(Error::Config("invalid feature or label permutation".into()));
        }
        let mut features = Vec::with_capacity(self.features.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            features.extend(feature_perm.iter().map(|&j| row[j]));
        }
        Ok(Self {
            name: self.name.clone(),
            features,
            n_features: d,
            labels: self.labels.iter().map(|&l| label_perm[l]).collect(),
            class_count: self.class_count,
            columns: feature_perm.iter().map(|&j| self.columns[j].clone()).collect(),
            split: self.split.clone(),
        })
    }

    /// Replaces the feature matrix, keeping labels and split.
    pub fn with_features(&self, features: Vec<f64>, columns: Vec<ColumnMeta>) -> Result<Self> {
        let width = columns.len();
        let ds = TabularDataset::new(
            self.name.clone(),
            features,
            width,
            self.labels.clone(),
            self.class_count,
        )?;
        ds.with_columns(columns)?.with_split(self.split.clone())
    }
}

/// Stratified train/val/test split. Global sizes are `round(N * f)` for
/// train and val with the remainder in test; rows are dealt in order of
/// their (shuffled) position within their class, so every split receives
/// each class in proportion.
pub fn stratified_split(labels: &[usize], class_count: usize, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = labels.len();
    let mut rng = seeded(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::Label {
                index: i,
                label: l,
                classes: class_count,
            });
        }
        by_class[l].push(i);
    }
    let mut keyed: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
    for rows in &mut by_class {
        rows.shuffle(&mut rng);
        let m = rows.len() as f64;
        for (pos, &r) in rows.iter().enumerate() {
            keyed.push(((pos as f64 + 0.5) / m, rng.random::<u64>(), r));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n_train = ((n as f64) * ft).round() as usize;
    let n_val = (((n as f64) * fv).round() as usize).min(n - n_train);
    let order: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
    Ok(Split {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

pub(crate) fn is_permutation(p: &[usize], n: usize) -> bool {
    if p.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Inverse of a permutation.
pub(crate) fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}
