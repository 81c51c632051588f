//! Synthetic benchmark tasks: Gaussian blobs, a 2D checkerboard and a
//! group-biased binary task for fairness experiments.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::{stratified_split, ColumnMeta, TabularDataset};
use crate::error::Result;
use crate::rng::{derive_seed, seeded};

/// Default (train, val, test) fractions.
pub const DEFAULT_FRACTIONS: (f64, f64, f64) = (0.7, 0.15, 0.15);

/// Z-scores columns over all rows and records the map in the column metadata.
fn standardize(x: &mut [f64], d: usize, names: &[&str]) -> Vec<ColumnMeta> {
    let n = x.len() / d;
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x[r * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in 0..n {
                x[r * d + j] = (x[r * d + j] - mean) / scale;
            }
            ColumnMeta {
                center: mean,
                scale,
                ..ColumnMeta::numeric(names.get(j).map_or_else(|| format!("x{j}"), |s| s.to_string()))
            }
        })
        .collect()
}

fn finish(
    name: &str,
    mut x: Vec<f64>,
    d: usize,
    y: Vec<usize>,
    k: usize,
    names: &[&str],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<TabularDataset> {
    let cols = standardize(&mut x, d, names);
    let split = stratified_split(&y, k, fractions, derive_seed(seed, 77))?;
    TabularDataset::new(name, x, d, y, k)?
        .with_columns(cols)?
        .with_split(split)
}

/// `n` points in `k` balanced spherical Gaussian classes in `d` dimensions.
/// Class means are `spread * N(0, I)`; within-class noise is `sigma`.
pub fn gaussian_blobs(n: usize, k: usize, d: usize, spread: f64, sigma: f64, seed: u64) -> Result<TabularDataset> {
    let mut rng = seeded(seed);
    let means: Vec<f64> = (0..k * d)
        .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        y.push(c);
        x.extend((0..d).map(|j| means[c * d + j] + sigma * rng.sample::<f64, _>(StandardNormal)));
    }
    finish("blobs", x, d, y, k, &[], DEFAULT_FRACTIONS, seed)
}

/// Uniform points on the unit square labelled by the parity of their cell
/// in a `cells x cells` grid.
pub fn checkerboard(n: usize, cells: usize, seed: u64) -> Result<TabularDataset> {
    let mut rng = seeded(seed);
    let mut x = Vec::with_capacity(2 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let cell = (a * cells as f64) as usize + (b * cells as f64) as usize;
        x.extend([a, b]);
        y.push(cell % 2);
    }
    finish("checkerboard", x, 2, y, 2, &["u", "v"], DEFAULT_FRACTIONS, seed)
}

/// Binary task whose label rate depends on a protected 0/1 attribute.
///
/// Columns: `signal ~ N(0, 1)`, `noise ~ N(0, 1)`, `group ∈ {0, 1}`.
/// `P(y = 1) = sigmoid(slope * signal + shift * (2 * group - 1))`.
pub fn biased_groups(n: usize, slope: f64, shift: f64, seed: u64) -> Result<TabularDataset> {
    let mut rng = seeded(seed);
    let mut x = Vec::with_capacity(3 * n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let s: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        let g = usize::from(rng.random::<bool>());
        let logit = slope * s + shift * (2.0 * g as f64 - 1.0);
        let p = 1.0 / (1.0 + (-logit).exp());
        y.push(usize::from(rng.random::<f64>() < p));
        x.extend([s, z, g as f64]);
    }
    finish(
        "biased-groups",
        x,
        3,
        y,
        2,
        &["signal", "noise", "group"],
        (0.6, 0.2, 0.2),
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_standardized_and_split() {
        for ds in [
            gaussian_blobs(300, 3, 4, 3.0, 1.0, 1).unwrap(),
            checkerboard(500, 8, 2).unwrap(),
            biased_groups(400, 4.0, 1.0, 3).unwrap(),
        ] {
            let n = ds.n_rows();
            for j in 0..ds.n_features() {
                let mean = (0..n).map(|r| ds.row(r)[j]).sum::<f64>() / n as f64;
                assert!(mean.abs() < 1e-9);
            }
            let s = &ds.split;
            assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }

    #[test]
    fn checkerboard_labels_follow_cells() {
        let ds = checkerboard(200, 8, 5).unwrap();
        for r in 0..200 {
            let raw: Vec<f64> = ds
                .row(r)
                .iter()
                .zip(&ds.columns)
                .map(|(z, c)| z * c.scale + c.center)
                .collect();
            let cell = (raw[0] * 8.0) as usize + (raw[1] * 8.0) as usize;
            assert_eq!(ds.labels()[r], cell % 2);
        }
    }

    #[test]
    fn group_column_decodes_to_binary() {
        let ds = biased_groups(100, 4.0, 1.0, 0).unwrap();
        let meta = &ds.columns[2];
        for r in 0..100 {
            let raw = ds.row(r)[2] * meta.scale + meta.center;
            assert!((raw - raw.round()).abs() < 1e-9 && (raw == 0.0 || (raw - 1.0).abs() < 1e-9));
        }
    }
}
