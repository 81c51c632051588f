//! Metadata-conditioned routing, the hyperparameter grid and the
//! standard/medium/light runtime variants.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::context::{
    apply_transform, select_features, sketch, FeatureSelectConfig, FeatureSelectMethod, FeatureTransform, SketchConfig,
};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::pfn::{predict_zero_shot, PfnConfig, PfnModel, Prediction, DEFAULT_CONTEXT_BUDGET};
use crate::rng::derive_seed;
use crate::tuning::{
    extend_classes, fit_ensemble, init_prompt, predict, predict_with_context, tune, Ensemble, EnsembleSpec, EvalMode,
    LabelInit, LossKind, TrainMode, TuneConfig, TunedPrompt,
};

/// Datasets up to this many rows get the small-data grid and a zero-shot
/// candidate.
pub const SMALL_DATA_ROWS: usize = 2000;
/// Row count above which medium and light skip ensembling.
pub const ENSEMBLE_CUTOFF_SAMPLES: usize = 150_000;
/// Largest permitted grid.
pub const MAX_GRID: usize = 30;
/// Context size used when light ranks feature selectors by zero-shot
/// accuracy.
pub const PRESELECT_SKETCH: usize = 512;
const REAL_CONTEXT: usize = 1152;
const MEDIUM_PATIENCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Standard,
    Medium,
    Light,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "medium" => Ok(Self::Medium),
            "light" => Ok(Self::Light),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantProfile {
    pub name: Variant,
    pub ensemble_cutoff_samples: Option<usize>,
    pub adaptive_sequence: bool,
    pub val_subset: bool,
    pub patience_override: Option<usize>,
    pub epochs_override: Option<usize>,
    pub feature_preselect_by_zero_shot: bool,
}

impl VariantProfile {
    pub fn of(variant: Variant) -> Self {
        let standard = Self {
            name: Variant::Standard,
            ensemble_cutoff_samples: None,
            adaptive_sequence: false,
            val_subset: false,
            patience_override: None,
            epochs_override: None,
            feature_preselect_by_zero_shot: false,
        };
        let medium = Self {
            name: Variant::Medium,
            ensemble_cutoff_samples: Some(ENSEMBLE_CUTOFF_SAMPLES),
            adaptive_sequence: true,
            val_subset: true,
            patience_override: Some(MEDIUM_PATIENCE),
            ..standard.clone()
        };
        match variant {
            Variant::Standard => standard,
            Variant::Medium => medium,
            Variant::Light => Self {
                name: Variant::Light,
                epochs_override: Some(1),
                feature_preselect_by_zero_shot: true,
                ..medium
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_rows: usize,
    pub n_features: usize,
    pub n_classes: usize,
}

impl DatasetMeta {
    pub fn of(ds: &TabularDataset) -> Self {
        Self {
            n_rows: ds.n_rows(),
            n_features: ds.n_features(),
            n_classes: ds.class_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plan", rename_all = "kebab-case")]
pub enum FeaturePlan {
    None,
    GridOverSelectors,
    PreselectByZeroShot { selectors: Vec<FeatureSelectConfig> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassPlan {
    None,
    DecoderRetrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tune: TuneConfig,
    /// `None` tunes a single prompt.
    pub ensemble: Option<EnsembleSpec>,
    /// Replaces the random real context in C-mode evaluation.
    pub sketch: Option<SketchConfig>,
    pub features: Option<FeatureSelectConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub include_zero_shot: bool,
    pub feature_plan: FeaturePlan,
    pub class_plan: ClassPlan,
    pub candidate_grid: Vec<Candidate>,
}

impl RoutingDecision {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_grid.is_empty() || self.candidate_grid.len() > MAX_GRID {
            return Err(Error::Config(format!(
                "candidate grid must hold 1..={MAX_GRID} entries, got {}",
                self.candidate_grid.len()
            )));
        }
        Ok(())
    }

    /// Training epochs summed over every candidate and ensemble member.
    pub fn configured_epochs(&self) -> usize {
        self.candidate_grid
            .iter()
            .map(|c| c.tune.epochs * c.ensemble.map_or(1, |e| e.members))
            .sum()
    }
}

fn selectors(d_target: usize) -> Vec<FeatureSelectConfig> {
    [
        FeatureSelectMethod::MutualInformation,
        FeatureSelectMethod::Pca,
        FeatureSelectMethod::Random,
    ]
    .into_iter()
    .map(|m| FeatureSelectConfig::new(m, d_target, 0))
    .collect()
}

fn base_grid(meta: &DatasetMeta, extend: bool) -> Vec<Candidate> {
    let plain = |tune: TuneConfig, ensemble: Option<EnsembleSpec>| Candidate {
        tune,
        ensemble,
        sketch: None,
        features: None,
    };
    if meta.n_rows <= SMALL_DATA_ROWS {
        let losses: &[LossKind] = if extend {
            &[LossKind::CrossEntropy]
        } else {
            &[LossKind::CrossEntropy, LossKind::Kl]
        };
        let mut grid = Vec::new();
        for epochs in [7, 60] {
            for &loss in losses {
                for label_init in [LabelInit::Equal, LabelInit::Proportional] {
                    grid.push(plain(
                        TuneConfig {
                            p: 10.max(meta.n_classes),
                            lr: 3e-2,
                            epochs,
                            patience: 2,
                            loss,
                            label_init,
                            train_mode: TrainMode::Nct,
                            eval_mode: EvalMode::Nc,
                            max_val_size: usize::MAX,
                            ..TuneConfig::default()
                        },
                        None,
                    ));
                }
            }
        }
        grid
    } else {
        [(TrainMode::Ct, EvalMode::C), (TrainMode::Nct, EvalMode::Nc)]
            .into_iter()
            .map(|(train_mode, eval_mode)| {
                plain(
                    TuneConfig {
                        p: 1000,
                        lr: 1e-3,
                        epochs: 100,
                        patience: 6,
                        train_mode,
                        eval_mode,
                        ctx_upper_bound: REAL_CONTEXT,
                        max_val_size: usize::MAX,
                        ..TuneConfig::default()
                    },
                    Some(EnsembleSpec::default()),
                )
            })
            .collect()
    }
}

/// Routing for the standard variant followed by [`apply_variant`].
pub fn route(meta: &DatasetMeta, model: &PfnConfig, variant: Variant) -> RoutingDecision {
    let extend = meta.n_classes > model.c_max;
    let wide = meta.n_features > model.d_max;
    let mut grid = base_grid(meta, extend);
    if wide {
        grid = grid
            .into_iter()
            .flat_map(|c| {
                selectors(model.d_max).into_iter().map(move |f| Candidate {
                    features: Some(f),
                    ..c.clone()
                })
            })
            .collect();
    }
    let decision = RoutingDecision {
        include_zero_shot: meta.n_rows <= SMALL_DATA_ROWS && !extend && !wide,
        feature_plan: if wide {
            FeaturePlan::GridOverSelectors
        } else {
            FeaturePlan::None
        },
        class_plan: if extend {
            ClassPlan::DecoderRetrain
        } else {
            ClassPlan::None
        },
        candidate_grid: grid,
    };
    apply_variant(decision, variant, meta.n_rows)
}

/// Applies a variant's deltas to a standard decision.
pub fn apply_variant(mut decision: RoutingDecision, variant: Variant, n_rows: usize) -> RoutingDecision {
    let profile = VariantProfile::of(variant);
    for c in &mut decision.candidate_grid {
        if profile.ensemble_cutoff_samples.is_some_and(|cut| n_rows > cut) {
            c.ensemble = None;
        }
        if profile.adaptive_sequence {
            c.tune.ctx_upper_bound = c.tune.ctx_upper_bound.min(REAL_CONTEXT).min(n_rows.div_ceil(10));
        }
        if profile.val_subset {
            c.tune.max_val_size = c.tune.max_val_size.min(TuneConfig::default().max_val_size);
        }
        if let Some(p) = profile.patience_override {
            c.tune.patience = c.tune.patience.min(p);
        }
        if let Some(e) = profile.epochs_override {
            c.tune.epochs = e;
        }
    }
    if profile.feature_preselect_by_zero_shot && decision.feature_plan == FeaturePlan::GridOverSelectors {
        let mut found: Vec<FeatureSelectConfig> = Vec::new();
        let mut grid: Vec<Candidate> = Vec::new();
        for c in decision.candidate_grid {
            if let Some(f) = c.features {
                if !found.contains(&f) {
                    found.push(f);
                }
            }
            let bare = Candidate { features: None, ..c };
            if !grid.contains(&bare) {
                grid.push(bare);
            }
        }
        decision.candidate_grid = grid;
        decision.feature_plan = FeaturePlan::PreselectByZeroShot { selectors: found };
    }
    decision
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    /// Grid index, or `None` for the zero-shot baseline.
    pub candidate: Option<usize>,
    pub p: usize,
    pub val_accuracy: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Index into `leaderboard`.
    pub winner: usize,
    pub test_accuracy: f64,
    pub leaderboard: Vec<LeaderboardEntry>,
    /// Selector chosen by zero-shot preselection, if any.
    pub preselected: Option<FeatureSelectConfig>,
}

/// A fitted search candidate.
#[derive(Clone, Debug)]
pub enum Fitted {
    ZeroShot,
    Prompt(TunedPrompt),
    Ensemble(Ensemble),
}

/// The winning candidate, ready for prediction on transformed data.
#[derive(Clone, Debug)]
pub struct Winner {
    pub fitted: Fitted,
    /// Feature map the winner was trained under, if any.
    pub transform: Option<FeatureTransform>,
}

struct Trial {
    fitted: Fitted,
    data: TabularDataset,
    transform: Option<FeatureTransform>,
    context: Option<Vec<usize>>,
    eval_mode: EvalMode,
    budget: usize,
}

impl Trial {
    fn predict(&self, model: &PfnModel, rows: &[usize], seed: u64) -> Result<Prediction> {
        let ds = &self.data;
        match (&self.fitted, &self.context) {
            (Fitted::ZeroShot, _) => predict_zero_shot(model, ds, rows, self.budget, seed),
            (Fitted::Prompt(p), Some(ctx)) if self.eval_mode == EvalMode::C => {
                predict_with_context(model, p, ds, ctx, rows)
            }
            (Fitted::Prompt(p), _) => predict(model, p, ds, rows, self.eval_mode, self.budget, seed),
            (Fitted::Ensemble(e), Some(ctx)) if self.eval_mode == EvalMode::C => {
                e.predict_with_context(model, ds, ctx, rows)
            }
            (Fitted::Ensemble(e), _) => e.predict(model, ds, rows, self.eval_mode, self.budget, seed),
        }
    }

    fn score(&self, model: &PfnModel, rows: &[usize], seed: u64) -> Result<f64> {
        let pred = self.predict(model, rows, seed)?;
        accuracy(&pred.labels, &self.data.gather_labels(rows))
    }
}

fn transformed(
    ds: &TabularDataset,
    f: Option<&FeatureSelectConfig>,
) -> Result<(TabularDataset, Option<FeatureTransform>)> {
    match f {
        None => Ok((ds.clone(), None)),
        Some(cfg) => {
            let sel = select_features(ds, &ds.split.train, cfg)?;
            Ok((apply_transform(ds, &sel.transform)?, Some(sel.transform)))
        }
    }
}

fn preselect(
    model: &PfnModel,
    ds: &TabularDataset,
    options: &[FeatureSelectConfig],
    seed: u64,
) -> Result<FeatureSelectConfig> {
    let mut best: Option<(f64, FeatureSelectConfig)> = None;
    for f in options {
        let (data, _) = transformed(ds, Some(f))?;
        let pred = predict_zero_shot(model, &data, &data.split.val, PRESELECT_SKETCH, seed)?;
        let acc = accuracy(&pred.labels, &data.gather_labels(&data.split.val))?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, *f));
        }
    }
    best.map(|(_, f)| f)
        .ok_or_else(|| Error::Config("zero-shot preselection needs at least one selector".into()))
}

fn fit_candidate(model: &PfnModel, ds: &TabularDataset, c: &Candidate, seed: u64) -> Result<Trial> {
    let (data, transform) = transformed(ds, c.features.as_ref())?;
    let mut cfg = c.tune.clone();
    cfg.seed = derive_seed(seed, cfg.seed);
    let context = match &c.sketch {
        Some(s) => Some(sketch(&data, &data.split.train, s)?.indices),
        None => None,
    };
    let budget = cfg
        .ctx_upper_bound
        .min(model.config().n_ctx_max.saturating_sub(cfg.p + crate::pfn::QUERY_CHUNK));
    let fitted = match &c.ensemble {
        Some(spec) => {
            let spec = EnsembleSpec {
                seed: derive_seed(seed, spec.seed),
                ..*spec
            };
            Fitted::Ensemble(fit_ensemble(model, &data, &cfg, &spec)?.0)
        }
        None => {
            let head = if data.class_count > model.config().c_max {
                Some(extend_classes(model, data.class_count, derive_seed(cfg.seed, 9))?)
            } else {
                None
            };
            let prompt = init_prompt(&cfg, &data, model, head)?;
            Fitted::Prompt(tune(model, prompt, &data, &cfg)?.0)
        }
    };
    Ok(Trial {
        fitted,
        data,
        transform,
        context,
        eval_mode: cfg.eval_mode,
        budget,
    })
}

/// Trains and validates every candidate (plus zero-shot when routed in),
/// picks the best validation accuracy (ties go to the smaller prompt, then
/// the lower index) and scores only the winner on the test split.
pub fn run_search(
    model: &PfnModel,
    ds: &TabularDataset,
    decision: &RoutingDecision,
    seed: u64,
) -> Result<(SearchOutcome, Winner)> {
    decision.validate()?;
    if ds.split.val.is_empty() || ds.split.test.is_empty() {
        return Err(Error::Config(
            "search needs non-empty validation and test splits".into(),
        ));
    }
    let preselected = match &decision.feature_plan {
        FeaturePlan::PreselectByZeroShot { selectors } => Some(preselect(model, ds, selectors, seed)?),
        _ => None,
    };
    let mut leaderboard = Vec::new();
    let mut trials: Vec<Option<Trial>> = Vec::new();
    let mut failures = Vec::new();
    for (i, c) in decision.candidate_grid.iter().enumerate() {
        let c = match preselected {
            Some(f) if c.features.is_none() => Candidate {
                features: Some(f),
                ..c.clone()
            },
            _ => c.clone(),
        };
        let start = Instant::now();
        let result = fit_candidate(model, ds, &c, seed).and_then(|t| {
            let acc = t.score(model, &t.data.split.val, seed)?;
            Ok((t, acc))
        });
        let (trial, val, error) = match result {
            Ok((t, acc)) => (Some(t), Some(acc), None),
            Err(e) => {
                failures.push((i, e.to_string()));
                (None, None, Some(e.to_string()))
            }
        };
        leaderboard.push(LeaderboardEntry {
            candidate: Some(i),
            p: c.tune.p,
            val_accuracy: val,
            seconds: start.elapsed().as_secs_f64(),
            error,
        });
        trials.push(trial);
    }
    if decision.include_zero_shot {
        let start = Instant::now();
        let trial = Trial {
            fitted: Fitted::ZeroShot,
            data: ds.clone(),
            transform: None,
            context: None,
            eval_mode: EvalMode::C,
            budget: DEFAULT_CONTEXT_BUDGET,
        };
        let result = trial.score(model, &ds.split.val, seed);
        leaderboard.push(LeaderboardEntry {
            candidate: None,
            p: 0,
            val_accuracy: result.as_ref().ok().copied(),
            seconds: start.elapsed().as_secs_f64(),
            error: result.as_ref().err().map(ToString::to_string),
        });
        trials.push(result.ok().map(|_| trial));
    }
    let winner = pick_winner(&leaderboard).ok_or(Error::AllCandidatesFailed(failures))?;
    let trial = trials[winner].take().expect("winner has a fitted trial");
    let test_accuracy = trial.score(model, &trial.data.split.test, seed)?;
    Ok((
        SearchOutcome {
            winner,
            test_accuracy,
            leaderboard,
            preselected,
        },
        Winner {
            fitted: trial.fitted,
            transform: trial.transform,
        },
    ))
}

/// Index of the best validation accuracy; ties go to smaller `p`, then to
/// the earlier grid position (zero-shot counts as `p = 0`).
pub fn pick_winner(board: &[LeaderboardEntry]) -> Option<usize> {
    let order = |e: &LeaderboardEntry| e.candidate.unwrap_or(usize::MAX);
    board
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.val_accuracy.map(|v| (i, v, e)))
        .max_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(b.2.p.cmp(&a.2.p))
                .then(order(b.2).cmp(&order(a.2)))
        })
        .map(|(i, _, _)| i)
}
