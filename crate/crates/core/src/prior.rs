//! Synthetic task prior used for prior-fitting.
//!
//! A hypothesis is drawn from one of three simple families (a random tanh
//! MLP, a spherical Gaussian mixture, or parallel hyperplanes), then a
//! labelled dataset is drawn from it and split into context and query rows.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnMeta, Split, TabularDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Tensor;

const MLP_HIDDEN: usize = 16;
const SPLIT_RETRIES: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HypothesisKind {
    RandomMlp,
    GaussianMixture,
    LinearThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct KindWeights {
    pub random_mlp: f64,
    pub gaussian_mixture: f64,
    pub linear_threshold: f64,
}

impl KindWeights {
    pub fn only(kind: HypothesisKind) -> Self {
        let mut w = KindWeights {
            random_mlp: 0.0,
            gaussian_mixture: 0.0,
            linear_threshold: 0.0,
        };
        match kind {
            HypothesisKind::RandomMlp => w.random_mlp = 1.0,
            HypothesisKind::GaussianMixture => w.gaussian_mixture = 1.0,
            HypothesisKind::LinearThreshold => w.linear_threshold = 1.0,
        }
        w
    }

    fn entries(&self) -> [(HypothesisKind, f64); 3] {
        [
            (HypothesisKind::RandomMlp, self.random_mlp),
            (HypothesisKind::GaussianMixture, self.gaussian_mixture),
            (HypothesisKind::LinearThreshold, self.linear_threshold),
        ]
    }
}

impl Default for KindWeights {
    fn default() -> Self {
        Self {
            random_mlp: 1.0 / 3.0,
            gaussian_mixture: 1.0 / 3.0,
            linear_threshold: 1.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub d_max: usize,
    pub c_max: usize,
    pub n_total: usize,
    pub feature_count_range: (usize, usize),
    pub class_count_range: (usize, usize),
    pub label_noise: f64,
    pub kind_weights: KindWeights,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            d_max: 20,
            c_max: 10,
            n_total: 256,
            feature_count_range: (1, 20),
            class_count_range: (2, 10),
            label_noise: 0.0,
            kind_weights: KindWeights::default(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let (flo, fhi) = self.feature_count_range;
        let (clo, chi) = self.class_count_range;
        if flo < 1 || flo > fhi || fhi > self.d_max {
            return Err(Error::Config(format!(
                "feature_count_range {:?} must lie within [1, {}]",
                self.feature_count_range, self.d_max
            )));
        }
        if clo < 2 || clo > chi || chi > self.c_max {
            return Err(Error::Config(format!(
                "class_count_range {:?} must lie within [2, {}]",
                self.class_count_range, self.c_max
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!(
                "label_noise {} must be in [0, 1)",
                self.label_noise
            )));
        }
        let w = self.kind_weights.entries();
        let sum: f64 = w.iter().map(|e| e.1).sum();
        if w.iter().any(|e| e.1 < 0.0 || !e.1.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "kind_weights must be non-negative and sum to 1, got {sum}"
            )));
        }
        if self.n_total < 2 * chi {
            return Err(Error::Config(format!(
                "n_total {} is too small for {} classes",
                self.n_total, chi
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: PriorConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A hypothesis drawn from the prior.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisSample {
    pub seed: u64,
    pub kind: HypothesisKind,
    pub n_features: usize,
    pub n_classes: usize,
    /// random-mlp: `[w1, b1, w2, b2, w3, b3]`; gaussian-mixture: `[means,
    /// sigma]`; linear-threshold: `[direction, thresholds]`.
    pub params: Vec<Tensor>,
}

fn normal_tensor(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, v).expect("shape and length agree")
}

pub fn sample_hypothesis(cfg: &PriorConfig, seed: u64) -> HypothesisSample {
    let mut rng = seeded(seed);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut kind = None;
    for (k, w) in cfg.kind_weights.entries() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        kind = Some(k);
        if u < acc {
            break;
        }
    }
    let kind = kind.unwrap_or(HypothesisKind::LinearThreshold);
    let d = rng.random_range(cfg.feature_count_range.0..=cfg.feature_count_range.1);
    let c = rng.random_range(cfg.class_count_range.0..=cfg.class_count_range.1);
    let params = match kind {
        HypothesisKind::RandomMlp => {
            let h = MLP_HIDDEN;
            vec![
                normal_tensor(&mut rng, vec![d, h], 1.0 / (d as f64).sqrt()),
                normal_tensor(&mut rng, vec![h], 0.5),
                normal_tensor(&mut rng, vec![h, h], 1.5 / (h as f64).sqrt()),
                normal_tensor(&mut rng, vec![h], 0.5),
                normal_tensor(&mut rng, vec![h, c], 1.0 / (h as f64).sqrt()),
                normal_tensor(&mut rng, vec![c], 0.5),
            ]
        }
        HypothesisKind::GaussianMixture => {
            let spread = 1.5 + rng.random::<f64>() * 1.5;
            let means = normal_tensor(&mut rng, vec![c, d], spread);
            let sigma = 0.5 + rng.random::<f64>();
            vec![means, Tensor::scalar(sigma)]
        }
        HypothesisKind::LinearThreshold => {
            let mut w = normal_tensor(&mut rng, vec![d], 1.0);
            let norm = w.values().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            w.values_mut().iter_mut().for_each(|v| *v /= norm);
            let std_normal = statrs::distribution::Normal::new(0.0, 1.0).expect("valid normal");
            let mut thresholds: Vec<f64> = (1..c)
                .map(|j| {
                    let q = (j as f64 + rng.random_range(-0.3..0.3)) / c as f64;
                    statrs::distribution::ContinuousCDF::inverse_cdf(&std_normal, q)
                })
                .collect();
            thresholds.sort_by(f64::total_cmp);
            let t = Tensor::new(vec![c - 1], thresholds).expect("length matches");
            vec![w, t]
        }
    };
    HypothesisSample {
        seed,
        kind,
        n_features: d,
        n_classes: c,
        params,
    }
}

impl HypothesisSample {
    /// Label of a raw (unstandardized) point under a threshold hypothesis.
    pub fn threshold_label(&self, x: &[f64]) -> Option<usize> {
        if self.kind != HypothesisKind::LinearThreshold {
            return None;
        }
        let proj: f64 = x.iter().zip(self.params[0].values()).map(|(a, b)| a * b).sum();
        Some(self.params[1].values().iter().filter(|&&t| proj > t).count())
    }

    fn mlp_outputs(&self, x: &[f64], n: usize) -> Vec<f64> {
        let d = self.n_features;
        let h = MLP_HIDDEN;
        let c = self.n_classes;
        let p = &self.params;
        let mut out = Vec::with_capacity(n * c);
        let mut h1 = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            for j in 0..h {
                let s: f64 = (0..d).map(|i| row[i] * p[0].values()[i * h + j]).sum();
                h1[j] = (s + p[1].values()[j]).tanh();
            }
            for j in 0..h {
                let s: f64 = (0..h).map(|i| h1[i] * p[2].values()[i * h + j]).sum();
                h2[j] = (s + p[3].values()[j]).tanh();
            }
            for j in 0..c {
                let s: f64 = (0..h).map(|i| h2[i] * p[4].values()[i * c + j]).sum();
                out.push(s + p[5].values()[j]);
            }
        }
        out
    }
}

/// One prior-fitting task: a dataset whose `split.train` is the context and
/// `split.test` the query block.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub dataset: TabularDataset,
    pub train_mask: Vec<bool>,
    pub kind: HypothesisKind,
}

impl SyntheticTask {
    pub fn train_rows(&self) -> &[usize] {
        &self.dataset.split.train
    }

    pub fn test_rows(&self) -> &[usize] {
        &self.dataset.split.test
    }
}

pub fn sample_task(h: &HypothesisSample, cfg: &PriorConfig, seed: u64) -> Result<SyntheticTask> {
    sample_task_sized(h, cfg, seed, None)
}

/// As [`sample_task`], but with exactly `n_train` context rows.
pub fn sample_task_with_train_size(
    h: &HypothesisSample,
    cfg: &PriorConfig,
    seed: u64,
    n_train: usize,
) -> Result<SyntheticTask> {
    if n_train == 0 || n_train >= cfg.n_total {
        return Err(Error::Config(format!(
            "n_train {n_train} must be in [1, {})",
            cfg.n_total
        )));
    }
    sample_task_sized(h, cfg, seed, Some(n_train))
}

fn sample_task_sized(
    h: &HypothesisSample,
    cfg: &PriorConfig,
    seed: u64,
    n_train: Option<usize>,
) -> Result<SyntheticTask> {
    let mut rng = seeded(seed);
    let n = cfg.n_total;
    let d = h.n_features;
    let c = h.n_classes;

    let (mut x, mut y) = match h.kind {
        HypothesisKind::GaussianMixture => {
            let means = h.params[0].values();
            let sigma = h.params[1].values()[0];
            let noise = Normal::new(0.0, sigma).expect("positive sigma");
            let mut x = Vec::with_capacity(n * d);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let k = rng.random_range(0..c);
                y.push(k);
                x.extend((0..d).map(|j| means[k * d + j] + noise.sample(&mut rng)));
            }
            (x, y)
        }
        HypothesisKind::RandomMlp | HypothesisKind::LinearThreshold => {
            let x: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
            let y = if h.kind == HypothesisKind::LinearThreshold {
                x.chunks(d)
                    .map(|row| h.threshold_label(row).expect("threshold hypothesis"))
                    .collect()
            } else {
                mlp_labels(&h.mlp_outputs(&x, n), n, c)
            };
            (x, y)
        }
    };

    if cfg.label_noise > 0.0 {
        for label in y.iter_mut() {
            if rng.random::<f64>() < cfg.label_noise {
                let shift = rng.random_range(1..c);
                *label = (*label + shift) % c;
            }
        }
    }

    let mut distinct = vec![false; c];
    y.iter().for_each(|&l| distinct[l] = true);
    if distinct.iter().filter(|&&b| b).count() < 2 {
        return Err(Error::DegenerateTask("fewer than two classes present".into()));
    }

    let columns = standardize_columns(&mut x, n, d);

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..SPLIT_RETRIES {
        let n_train = match n_train {
            Some(k) => k,
            None => {
                let frac = rng.random_range(0.5..=0.9);
                ((frac * n as f64).round() as usize).clamp(1, n - 1)
            }
        };
        order.shuffle(&mut rng);
        let (train, test) = order.split_at(n_train);
        let mut in_train = vec![false; c];
        train.iter().for_each(|&r| in_train[y[r]] = true);
        if test.iter().all(|&r| in_train[y[r]]) {
            let mut train_mask = vec![false; n];
            train.iter().for_each(|&r| train_mask[r] = true);
            let split = Split {
                train: train.to_vec(),
                val: Vec::new(),
                test: test.to_vec(),
            };
            let dataset = TabularDataset::new(format!("prior-{}", h.seed), x, d, std::mem::take(&mut y), c)?
                .with_columns(columns)?
                .with_split(split)?;
            return Ok(SyntheticTask {
                dataset,
                train_mask,
                kind: h.kind,
            });
        }
    }
    Err(Error::DegenerateTask(format!(
        "no split covering every query class after {SPLIT_RETRIES} attempts"
    )))
}

/// Argmax over per-head standardized outputs, so every head gets a share.
fn mlp_labels(out: &[f64], n: usize, c: usize) -> Vec<usize> {
    let mut stats = vec![(0.0, 1.0); c];
    for (j, s) in stats.iter_mut().enumerate() {
        let mean = (0..n).map(|r| out[r * c + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (out[r * c + j] - mean).powi(2)).sum::<f64>() / n as f64;
        *s = (mean, var.sqrt().max(1e-12));
    }
    (0..n)
        .map(|r| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, (m, s)) in stats.iter().enumerate() {
                let v = (out[r * c + j] - m) / s;
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Standardizes each column in place; constant columns become zero.
fn standardize_columns(x: &mut [f64], n: usize, d: usize) -> Vec<ColumnMeta> {
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|r| x[r * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|r| (x[r * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 1e-24 { var.sqrt() } else { 1.0 };
            for r in 0..n {
                x[r * d + j] = if var > 1e-24 {
                    (x[r * d + j] - mean) / scale
                } else {
                    0.0
                };
            }
            ColumnMeta {
                center: mean,
                scale,
                ..ColumnMeta::numeric(format!("x{j}"))
            }
        })
        .collect()
}

/// Infinite, deterministic stream of tasks; element `i` depends only on
/// `(cfg, seed, i)`.
#[derive(Clone, Debug)]
pub struct TaskStream {
    cfg: PriorConfig,
    seed: u64,
    index: u64,
}

const MAX_RESAMPLES: u64 = 10_000;

impl TaskStream {
    pub fn new(cfg: PriorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, seed, index: 0 })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.cfg
    }

    /// The `i`-th element, independent of iteration state.
    pub fn task_at(&self, i: u64) -> SyntheticTask {
        let base = derive_seed(self.seed, i);
        for attempt in 0..MAX_RESAMPLES {
            let h = sample_hypothesis(&self.cfg, derive_seed(base, 2 * attempt));
            if let Ok(task) = sample_task(&h, &self.cfg, derive_seed(base, 2 * attempt + 1)) {
                return task;
            }
        }
        panic!("prior configuration produced {MAX_RESAMPLES} degenerate tasks in a row");
    }
}

impl Iterator for TaskStream {
    type Item = SyntheticTask;

    fn next(&mut self) -> Option<SyntheticTask> {
        let t = self.task_at(self.index);
        self.index += 1;
        Some(t)
    }
}

pub fn task_stream(cfg: PriorConfig, seed: u64) -> Result<TaskStream> {
    TaskStream::new(cfg, seed)
}
