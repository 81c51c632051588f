use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::report::ExperimentReport;
use crate::error::{Error, Result};

/// Largest number of non-zero differences tested with the exact Wilcoxon
/// distribution.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Ranks with ties sharing the average rank. `descending` ranks the largest
/// value 1.
pub fn average_ranks(values: &[f64], descending: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if descending {
            c.reverse()
        } else {
            c
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mean accuracy per (dataset, algorithm) over folds.
pub fn dataset_scores(report: &ExperimentReport) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for r in &report.rows {
        let e = sums
            .entry(r.dataset.clone())
            .or_default()
            .entry(r.algorithm.clone())
            .or_default();
        e.0 += r.accuracy;
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(d, algs)| (d, algs.into_iter().map(|(a, (s, n))| (a, s / n as f64)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZSummary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZTable {
    pub per_dataset: BTreeMap<String, BTreeMap<String, f64>>,
    pub summary: BTreeMap<String, ZSummary>,
}

fn population_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

/// Per-dataset z-scores (population std; all-equal datasets score 0) and
/// their mean/std/median per algorithm.
pub fn zscore_table(report: &ExperimentReport) -> ZTable {
    let scores = dataset_scores(report);
    let mut per_dataset = BTreeMap::new();
    let mut by_alg: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (d, algs) in &scores {
        let vals: Vec<f64> = algs.values().copied().collect();
        let (mean, std) = population_stats(&vals);
        let z: BTreeMap<String, f64> = algs
            .iter()
            .map(|(a, &v)| (a.clone(), if std > 0.0 { (v - mean) / std } else { 0.0 }))
            .collect();
        for (a, &zv) in &z {
            by_alg.entry(a.clone()).or_default().push(zv);
        }
        per_dataset.insert(d.clone(), z);
    }
    let summary = by_alg
        .into_iter()
        .map(|(a, zs)| {
            let (mean, std) = population_stats(&zs);
            (
                a,
                ZSummary {
                    mean,
                    std,
                    median: median(&zs),
                },
            )
        })
        .collect();
    ZTable { per_dataset, summary }
}

/// Per-algorithm `(mean rank, wins)`. Ranks are computed per (dataset, fold)
/// with ties averaged; a k-way tie for first gives each 1/k of a win. Both
/// are averaged over folds within a dataset; ranks are then averaged and
/// wins summed over datasets.
pub fn mean_rank_and_wins(report: &ExperimentReport) -> Result<BTreeMap<String, (f64, f64)>> {
    let algorithms = report.algorithms();
    let mut cells: BTreeMap<(String, usize), BTreeMap<String, f64>> = BTreeMap::new();
    for r in &report.rows {
        let cell = cells.entry((r.dataset.clone(), r.fold)).or_default();
        if cell.insert(r.algorithm.clone(), r.accuracy).is_some() {
            return Err(Error::Stats(format!(
                "duplicate result for ({}, {}, fold {})",
                r.dataset, r.algorithm, r.fold
            )));
        }
    }
    let mut per_dataset: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for ((dataset, fold), cell) in &cells {
        let mut vals = Vec::with_capacity(algorithms.len());
        for a in &algorithms {
            match cell.get(a) {
                Some(&v) => vals.push(v),
                None => {
                    return Err(Error::MissingCell {
                        dataset: dataset.clone(),
                        algorithm: a.clone(),
                        fold: *fold,
                    })
                }
            }
        }
        let ranks = average_ranks(&vals, true);
        let best = ranks.iter().copied().fold(f64::INFINITY, f64::min);
        let top = ranks.iter().filter(|&&r| r == best).count();
        let entry = per_dataset
            .entry(dataset.clone())
            .or_insert_with(|| (vec![0.0; algorithms.len()], vec![0.0; algorithms.len()], 0));
        for (i, &r) in ranks.iter().enumerate() {
            entry.0[i] += r;
            if r == best {
                entry.1[i] += 1.0 / top as f64;
            }
        }
        entry.2 += 1;
    }
    let n_datasets = per_dataset.len() as f64;
    let mut out: BTreeMap<String, (f64, f64)> = algorithms.iter().map(|a| (a.clone(), (0.0, 0.0))).collect();
    for (ranks, wins, folds) in per_dataset.values() {
        for (i, a) in algorithms.iter().enumerate() {
            let e = out.get_mut(a).expect("known algorithm");
            e.0 += ranks[i] / *folds as f64 / n_datasets;
            e.1 += wins[i] / *folds as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Friedman {
    pub statistic: f64,
    pub p_value: f64,
    /// Rank sums per algorithm column.
    pub rank_sums: Vec<f64>,
}

/// Friedman test on a `[datasets][algorithms]` score matrix (higher is
/// better). A zero statistic has p = 1.
pub fn friedman(matrix: &[Vec<f64>]) -> Result<Friedman> {
    let n = matrix.len();
    let k = matrix.first().map_or(0, Vec::len);
    if n == 0 || k < 2 || matrix.iter().any(|r| r.len() != k) {
        return Err(Error::Stats(format!(
            "friedman needs a complete matrix with >= 2 columns, got {n} rows x {k}"
        )));
    }
    let mut rank_sums = vec![0.0; k];
    for row in matrix {
        for (j, r) in average_ranks(row, true).into_iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let raw = 12.0 / (nf * kf * (kf + 1.0)) * rank_sums.iter().map(|r| r * r).sum::<f64>() - 3.0 * nf * (kf + 1.0);
    let statistic = if raw.abs() < 1e-9 { 0.0 } else { raw };
    let p_value = if statistic <= 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(kf - 1.0).map_err(|e| Error::Stats(e.to_string()))?;
        chi.sf(statistic)
    };
    Ok(Friedman {
        statistic,
        p_value,
        rank_sums,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Non-zero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// One-sided p for `x > y`.
    pub p_greater: f64,
    /// One-sided p for `x < y`.
    pub p_less: f64,
    pub p_two_sided: f64,
    pub exact: bool,
}

/// Signed-rank test on paired samples. Zero differences are dropped and
/// tied magnitudes share average ranks. Exact for up to
/// [`WILCOXON_EXACT_MAX`] differences, otherwise the normal approximation
/// with tie and continuity corrections.
pub fn wilcoxon(x: &[f64], y: &[f64]) -> Result<Wilcoxon> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
    let n = d.len();
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&mags, false);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, v)| **v > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    if n == 0 {
        return Ok(Wilcoxon {
            n,
            w_plus,
            w_minus,
            p_greater: 1.0,
            p_less: 1.0,
            p_two_sided: 1.0,
            exact: true,
        });
    }
    let exact = n <= WILCOXON_EXACT_MAX;
    let (p_greater, p_less) = if exact {
        // Doubled ranks are integers even with half-rank ties.
        let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
        let max: usize = doubled.iter().sum();
        let mut counts = vec![0f64; max + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=max).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w2 = (w_plus * 2.0).round() as usize;
        let ge: f64 = counts[w2..].iter().sum::<f64>() / all;
        let le: f64 = counts[..=w2].iter().sum::<f64>() / all;
        (ge, le)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut ties = 0.0;
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        let mut i = 0;
        while i < sorted.len() {
            let mut j = i;
            while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            ties += t * t * t - t;
            i = j + 1;
        }
        let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - ties / 48.0).sqrt();
        let normal = Normal::standard();
        let upper = normal.sf((w_plus - mean - 0.5) / sd);
        let lower = normal.cdf((w_plus - mean + 0.5) / sd);
        (upper, lower)
    };
    Ok(Wilcoxon {
        n,
        w_plus,
        w_minus,
        p_greater,
        p_less,
        p_two_sided: (2.0 * p_greater.min(p_less)).min(1.0),
        exact,
    })
}

/// Holm step-down adjusted p-values, in input order.
pub fn holm(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (i, &o) in order.iter().enumerate() {
        running = running.max(((m - i) as f64 * p[o]).min(1.0));
        out[o] = running;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    pub test: Wilcoxon,
    pub p_holm: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub algorithms: Vec<String>,
    /// Mean Friedman rank per algorithm (over datasets).
    pub mean_ranks: Vec<f64>,
    pub friedman: Friedman,
    pub pairwise: Vec<PairwiseTest>,
    /// Maximal runs (in mean-rank order) of mutually non-significant
    /// algorithms.
    pub cliques: Vec<Vec<String>>,
    pub alpha: f64,
}

/// Friedman test, Holm-corrected pairwise Wilcoxon tests and clique
/// grouping over per-dataset mean accuracies.
pub fn significance_suite(report: &ExperimentReport, alpha: f64) -> Result<SignificanceReport> {
    mean_rank_and_wins(report)?;
    let algorithms = report.algorithms();
    let scores = dataset_scores(report);
    if algorithms.len() < 3 {
        return Err(Error::Stats(format!(
            "need at least 3 algorithms, got {}",
            algorithms.len()
        )));
    }
    if scores.len() < 6 {
        return Err(Error::Stats(format!("need at least 6 datasets, got {}", scores.len())));
    }
    let matrix: Vec<Vec<f64>> = scores
        .values()
        .map(|row| algorithms.iter().map(|a| row[a]).collect())
        .collect();
    let friedman = friedman(&matrix)?;
    let n = matrix.len() as f64;
    let mean_ranks: Vec<f64> = friedman.rank_sums.iter().map(|r| r / n).collect();

    let k = algorithms.len();
    let column = |j: usize| -> Vec<f64> { matrix.iter().map(|r| r[j]).collect() };
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            pairs.push((i, j, wilcoxon(&column(i), &column(j))?));
        }
    }
    let adjusted = holm(&pairs.iter().map(|p| p.2.p_two_sided).collect::<Vec<_>>());
    let pairwise: Vec<PairwiseTest> = pairs
        .into_iter()
        .zip(adjusted)
        .map(|((i, j, test), p_holm)| PairwiseTest {
            a: algorithms[i].clone(),
            b: algorithms[j].clone(),
            test,
            p_holm,
            significant: p_holm < alpha,
        })
        .collect();

    let mut sig = vec![vec![false; k]; k];
    let mut idx = 0;
    for i in 0..k {
        for j in i + 1..k {
            sig[i][j] = pairwise[idx].significant;
            sig[j][i] = sig[i][j];
            idx += 1;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]).then(a.cmp(&b)));
    let mut cliques: Vec<Vec<String>> = Vec::new();
    let mut last_end = None;
    for s in 0..k {
        let mut e = s;
        while e + 1 < k && (s..=e).all(|m| !sig[order[m]][order[e + 1]]) {
            e += 1;
        }
        if last_end.is_none_or(|le| e > le) {
            cliques.push(order[s..=e].iter().map(|&o| algorithms[o].clone()).collect());
            last_end = Some(e);
        }
    }
    Ok(SignificanceReport {
        algorithms,
        mean_ranks,
        friedman,
        pairwise,
        cliques,
        alpha,
    })
}
