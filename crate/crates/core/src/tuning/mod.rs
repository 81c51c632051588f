//! Learned context prompts for a frozen PFN: initialization, tuning with or
//! without real context, C/NC inference, class extension, full fine-tuning
//! and permutation ensembles.

mod ensemble;
pub(crate) mod fit;
mod persist;

pub use ensemble::{fit_ensemble, Ensemble, EnsembleMember, EnsembleSpec};
pub use fit::{fine_tune_all, tune, tune_with, FitTrace, LossHook};
pub use persist::{load_ensemble, load_prompt, save_ensemble, save_prompt};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::pfn::{class_slice, init_decoder, zero_shot_context, PfnModel, Prediction, PromptRef, Rows, QUERY_CHUNK};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Real training rows fill part of the context at every step.
    Ct,
    /// The prompt is the only context.
    Nct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    C,
    Nc,
    /// Picks C or NC by validation accuracy (ties go to NC).
    Best,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    /// KL from the frozen model's zero-shot predictions to the tuned ones.
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelInit {
    Equal,
    Proportional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub p: usize,
    pub train_mode: TrainMode,
    pub eval_mode: EvalMode,
    pub loss: LossKind,
    pub label_init: LabelInit,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub warmup_steps: usize,
    pub val_every: usize,
    pub max_val_size: usize,
    pub ctx_upper_bound: usize,
    pub nct_batch_points: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            p: 10,
            train_mode: TrainMode::Nct,
            eval_mode: EvalMode::Nc,
            loss: LossKind::CrossEntropy,
            label_init: LabelInit::Equal,
            lr: 3e-2,
            epochs: 30,
            patience: 2,
            warmup_steps: 10,
            val_every: 2,
            max_val_size: 2000,
            ctx_upper_bound: 1152,
            nct_batch_points: 128,
            seed: 0,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.patience == 0 || !(self.lr > 0.0) || self.epochs == 0 {
            return Err(Error::Config(format!(
                "tune config needs p >= 1, patience >= 1, epochs >= 1 and lr > 0: {self:?}"
            )));
        }
        if self.val_every == 0 || self.nct_batch_points == 0 || self.max_val_size == 0 {
            return Err(Error::Config(
                "val_every, nct_batch_points and max_val_size must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Validation mode used for early stopping and ensemble ranking.
    pub fn selection_mode(&self) -> EvalMode {
        match self.train_mode {
            TrainMode::Ct => EvalMode::C,
            TrainMode::Nct => EvalMode::Nc,
        }
    }
}

/// Replacement decoder for tasks with more classes than the model's head.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead {
    pub tensors: Vec<Tensor>,
}

impl DecoderHead {
    pub fn width(&self) -> usize {
        self.tensors[3].numel()
    }
}

/// Fresh decoder with `new_k` outputs. Only valid above the model's `c_max`.
pub fn extend_classes(model: &PfnModel, new_k: usize, seed: u64) -> Result<DecoderHead> {
    let c_max = model.config().c_max;
    if new_k <= c_max {
        return Err(Error::NoExtensionNeeded {
            requested: new_k,
            c_max,
        });
    }
    Ok(DecoderHead {
        tensors: init_decoder(model.config().e, new_k, seed),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TunedPrompt {
    pub x_part: Tensor,
    pub y_part: Vec<usize>,
    pub class_count: usize,
    pub decoder: Option<DecoderHead>,
    pub config: TuneConfig,
    pub val_score: Option<f64>,
}

impl TunedPrompt {
    pub fn p(&self) -> usize {
        self.y_part.len()
    }

    pub fn as_ref(&self) -> PromptRef<'_> {
        PromptRef {
            x_part: &self.x_part,
            y_part: &self.y_part,
            decoder: self.decoder.as_ref().map(|d| d.tensors.as_slice()),
        }
    }

    /// Output width of the head the prompt is paired with.
    pub fn n_out(&self, model: &PfnModel) -> usize {
        self.decoder.as_ref().map_or(model.n_out(), DecoderHead::width)
    }
}

/// Fresh prompt for `ds`; `head` must be given when the task has more
/// classes than the model's decoder.
pub fn init_prompt(
    cfg: &TuneConfig,
    ds: &TabularDataset,
    model: &PfnModel,
    head: Option<DecoderHead>,
) -> Result<TunedPrompt> {
    cfg.validate()?;
    let k = ds.class_count;
    let width = head.as_ref().map_or(model.n_out(), DecoderHead::width);
    if k > width {
        return Err(Error::ClassBudget { got: k, max: width });
    }
    let mut rng = seeded(cfg.seed);
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("positive std");
    let e = model.config().e;
    let x: Vec<f64> = (0..cfg.p * e).map(|_| normal.sample(&mut rng)).collect();
    let y_part = match cfg.label_init {
        LabelInit::Equal => {
            if cfg.p < k {
                return Err(Error::PromptTooShort { p: cfg.p, classes: k });
            }
            (0..cfg.p).map(|i| i % k).collect()
        }
        LabelInit::Proportional => {
            let rows = if ds.split.train.is_empty() {
                ds.all_rows()
            } else {
                ds.split.train.clone()
            };
            let counts = ds.class_counts(&rows);
            let total: usize = counts.iter().sum();
            let mut yrng = seeded(derive_seed(cfg.seed, 1));
            (0..cfg.p)
                .map(|_| {
                    let mut u = yrng.random_range(0..total);
                    counts
                        .iter()
                        .position(|&c| {
                            if u < c {
                                true
                            } else {
                                u -= c;
                                false
                            }
                        })
                        .expect("u < total")
                })
                .collect()
        }
    };
    Ok(TunedPrompt {
        x_part: Tensor::matrix(cfg.p, e, x)?,
        y_part,
        class_count: k,
        decoder: head,
        config: cfg.clone(),
        val_score: None,
    })
}

/// Probabilities `[rows x k]` with the prompt prepended to `context` real
/// rows (empty in NC).
pub(crate) fn prompt_probs(
    model: &PfnModel,
    prompt: &TunedPrompt,
    ds: &TabularDataset,
    context: &[usize],
    rows: &[usize],
) -> Result<Tensor> {
    let d = ds.n_features();
    let cx = ds.gather_features(context);
    let cy = ds.gather_labels(context);
    let qx = ds.gather_features(rows);
    let used = prompt.p() + context.len();
    let chunk = model.config().n_ctx_max.saturating_sub(used).clamp(1, QUERY_CHUNK);
    let probs = model.forward_chunked(Rows::new(&cx, d), &cy, Rows::new(&qx, d), Some(prompt.as_ref()), chunk)?;
    class_slice(&probs, prompt.class_count.max(2))
}

/// Predicts `rows` in the given mode. C draws up to `context_budget` real
/// rows from the training split; `Best` compares C and NC on the
/// validation split (capped at the prompt's `max_val_size`).
pub fn predict(
    model: &PfnModel,
    prompt: &TunedPrompt,
    ds: &TabularDataset,
    rows: &[usize],
    mode: EvalMode,
    context_budget: usize,
    seed: u64,
) -> Result<Prediction> {
    let mode = match mode {
        EvalMode::Best => {
            let val = validation_rows(ds, prompt.config.max_val_size, seed)?;
            let truth = ds.gather_labels(&val);
            let nc = predict(model, prompt, ds, &val, EvalMode::Nc, context_budget, seed)?;
            let c = predict(model, prompt, ds, &val, EvalMode::C, context_budget, seed)?;
            if accuracy(&c.labels, &truth)? > accuracy(&nc.labels, &truth)? {
                EvalMode::C
            } else {
                EvalMode::Nc
            }
        }
        m => m,
    };
    let context = match mode {
        EvalMode::C if context_budget > 0 && !ds.split.train.is_empty() => {
            zero_shot_context(ds, &ds.split.train, context_budget, seed)?
        }
        _ => Vec::new(),
    };
    Ok(Prediction::from_probs(prompt_probs(model, prompt, ds, &context, rows)?))
}

/// Predicts `rows` with the prompt prepended to an explicit real context.
pub fn predict_with_context(
    model: &PfnModel,
    prompt: &TunedPrompt,
    ds: &TabularDataset,
    context: &[usize],
    rows: &[usize],
) -> Result<Prediction> {
    Ok(Prediction::from_probs(prompt_probs(model, prompt, ds, context, rows)?))
}

/// Deterministic subset of the validation split of at most `cap` rows.
pub(crate) fn validation_rows(ds: &TabularDataset, cap: usize, seed: u64) -> Result<Vec<usize>> {
    if ds.split.val.is_empty() {
        return Err(Error::Config("tuning needs a non-empty validation split".into()));
    }
    if ds.split.val.len() <= cap {
        return Ok(ds.split.val.clone());
    }
    let mut rng = seeded(derive_seed(seed, 0x7661_6c));
    let mut rows = crate::context::random_subset(&ds.split.val, cap, &mut rng);
    rows.sort_unstable();
    Ok(rows)
}
