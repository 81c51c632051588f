//! Context compression: row sketches (random, k-means medoids, farthest
//! point coresets) with label-aware strata, and feature selection.

mod features;

pub use features::{
    apply_transform, mutual_information, select_features, FeatureSelectConfig, FeatureSelectMethod, FeatureSelection,
    FeatureTransform,
};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SketchMethod {
    Random,
    Kmeans,
    CoresetFps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Proportional,
    Equal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SketchConfig {
    pub method: SketchMethod,
    pub n: usize,
    pub label_mode: LabelMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchResult {
    pub indices: Vec<usize>,
    /// Set when `n` exceeded the rows available without replacement.
    pub clamped: bool,
}

/// Number of points seeded at random before farthest-point growth.
pub const FPS_INITIAL: usize = 5;
const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// Selects context rows among `rows` (dataset row indices).
pub fn sketch(ds: &TabularDataset, rows: &[usize], cfg: &SketchConfig) -> Result<SketchResult> {
    if rows.is_empty() {
        return Err(Error::Config("cannot sketch an empty row set".into()));
    }
    if cfg.n == 0 {
        return Err(Error::Config("sketch size must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for &r in rows {
        by_class[ds.labels()[r]].push(r);
    }
    let present: Vec<usize> = (0..ds.class_count).filter(|&c| !by_class[c].is_empty()).collect();
    let (targets, clamped) = match cfg.label_mode {
        LabelMode::Proportional => {
            let n = cfg.n.min(rows.len());
            let counts: Vec<usize> = present.iter().map(|&c| by_class[c].len()).collect();
            (proportional_targets(&counts, n), cfg.n > rows.len())
        }
        LabelMode::Equal => (equal_targets(present.len(), cfg.n), false),
    };
    let mut out = Vec::with_capacity(targets.iter().sum());
    for (slot, &c) in present.iter().enumerate() {
        let want = targets[slot];
        if want == 0 {
            continue;
        }
        let stratum = &by_class[c];
        let mut rng = seeded(derive_seed(cfg.seed, c as u64));
        let take = want.min(stratum.len());
        let mut chosen = match cfg.method {
            SketchMethod::Random => {
                let mut s = stratum.clone();
                s.shuffle(&mut rng);
                s.truncate(take);
                s
            }
            SketchMethod::Kmeans => {
                let pts = ds.gather_features(stratum);
                let km = kmeans(&pts, ds.n_features(), take, derive_seed(cfg.seed, 1000 + c as u64))?;
                medoids(&pts, ds.n_features(), &km.centers)
                    .into_iter()
                    .map(|i| stratum[i])
                    .collect()
            }
            SketchMethod::CoresetFps => {
                let pts = ds.gather_features(stratum);
                let mut local: Vec<usize> = (0..stratum.len()).collect();
                local.shuffle(&mut rng);
                let init = &local[..FPS_INITIAL.min(take)];
                farthest_point_sampling(&pts, ds.n_features(), init, take)
                    .into_iter()
                    .map(|i| stratum[i])
                    .collect()
            }
        };
        while chosen.len() < want {
            chosen.push(*stratum.choose(&mut rng).expect("non-empty stratum"));
        }
        out.extend(chosen);
    }
    Ok(SketchResult { indices: out, clamped })
}

/// Largest-remainder apportionment of `n` over `counts`.
fn proportional_targets(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let quotas: Vec<f64> = counts.iter().map(|&c| n as f64 * c as f64 / total as f64).collect();
    let mut t: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest = n - t.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor())
            .total_cmp(&(quotas[a] - quotas[a].floor()))
            .then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if t[i] < counts[i] {
            t[i] += 1;
            rest -= 1;
        }
    }
    t
}

/// `ceil(n / k)` per class, in class order, truncated to a total of `n`.
fn equal_targets(k: usize, n: usize) -> Vec<usize> {
    let per = n.div_ceil(k.max(1));
    let mut left = n;
    (0..k)
        .map(|_| {
            let t = per.min(left);
            left -= t;
            t
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy max-min selection over row-major `points`, starting from
/// `initial` and growing to `n` indices. Returns selection order.
pub fn farthest_point_sampling(points: &[f64], d: usize, initial: &[usize], n: usize) -> Vec<usize> {
    let total = points.len() / d.max(1);
    let n = n.min(total);
    let mut selected: Vec<usize> = Vec::with_capacity(n);
    let mut nearest = vec![f64::INFINITY; total];
    let mut taken = vec![false; total];
    let mut next = initial
        .iter()
        .copied()
        .filter(|&i| i < total)
        .collect::<Vec<_>>()
        .into_iter();
    while selected.len() < n {
        let pick = match next.next() {
            Some(i) if !taken[i] => i,
            Some(_) => continue,
            None if selected.is_empty() => 0,
            None => match (0..total)
                .filter(|&j| !taken[j])
                .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            {
                Some(j) => j,
                None => break,
            },
        };
        selected.push(pick);
        taken[pick] = true;
        let p = &points[pick * d..(pick + 1) * d];
        for (j, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(p, &points[j * d..(j + 1) * d]));
        }
    }
    selected
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Row-major `[k x d]`.
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters keep their
/// previous center.
pub fn kmeans(points: &[f64], d: usize, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.len() / d.max(1);
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 <= k <= {n}, got {k}")));
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut rng = seeded(seed);
    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.extend_from_slice(row(pick));
        for (i, slot) in dist.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(row(i), row(pick)));
        }
    }
    let mut assignment = vec![0; n];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut inertia = 0.0;
        for i in 0..n {
            let (mut best, mut best_d) = (0, f64::INFINITY);
            for c in 0..k {
                let dd = sq_dist(row(i), &centers[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assignment[i] = best;
            inertia += best_d;
        }
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| prev - inertia <= KMEANS_TOL * prev.max(f64::MIN_POSITIVE));
        trace.push(inertia);
        if converged {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansResult {
        centers,
        assignment,
        inertia_trace: trace,
    })
}

/// Nearest distinct data point to each center, in center order.
fn medoids(points: &[f64], d: usize, centers: &[f64]) -> Vec<usize> {
    let n = points.len() / d;
    let mut used = vec![false; n];
    centers
        .chunks(d)
        .map(|c| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for i in 0..n {
                let dd = sq_dist(&points[i * d..(i + 1) * d], c);
                if !used[i] && dd < best_d {
                    best_d = dd;
                    best = i;
                }
            }
            used[best] = true;
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SketchQuality {
    /// `+inf` when fewer than two indices are given.
    pub min_pairwise_distance: f64,
    pub class_counts: Vec<usize>,
    /// Largest distance from any dataset row to its nearest selected row.
    pub coverage_radius: f64,
}

pub fn sketch_quality(ds: &TabularDataset, indices: &[usize]) -> SketchQuality {
    let mut min_pair = f64::INFINITY;
    for (a, &i) in indices.iter().enumerate() {
        for &j in &indices[a + 1..] {
            min_pair = min_pair.min(sq_dist(ds.row(i), ds.row(j)));
        }
    }
    let mut radius: f64 = 0.0;
    for r in 0..ds.n_rows() {
        let near = indices
            .iter()
            .map(|&i| sq_dist(ds.row(r), ds.row(i)))
            .fold(f64::INFINITY, f64::min);
        radius = radius.max(near);
    }
    SketchQuality {
        min_pairwise_distance: min_pair.sqrt(),
        class_counts: ds.class_counts(indices),
        coverage_radius: if indices.is_empty() {
            f64::INFINITY
        } else {
            radius.sqrt()
        },
    }
}

/// Seeded random subset of `rows` of size `min(n, rows.len())`.
pub(crate) fn random_subset(rows: &[usize], n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut s = rows.to_vec();
    s.shuffle(rng);
    s.truncate(n);
    s
}
