use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{predict, validation_rows, LossKind, TrainMode, TuneConfig, TunedPrompt};
use crate::data::TabularDataset;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::pfn::{predict_zero_shot, PfnModel, Rows, DECODER_NAMES, QUERY_CHUNK};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::{AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};

/// Real-context size used for the KL reference predictions.
const KL_REFERENCE_CONTEXT: usize = 512;
/// Fixed learning rate of the full fine-tuning baseline.
pub const FINE_TUNE_LR: f64 = 1e-3;

/// Extra loss term: receives the base loss, the batch's class
/// probabilities `[b x k]` and the batch's dataset rows; returns the total.
pub type LossHook<'a> = &'a dyn Fn(&mut Graph, Var, Var, &[usize]) -> Result<Var>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub losses: Vec<f64>,
    /// `(epoch, validation accuracy)` per validation.
    pub val_history: Vec<(usize, f64)>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub stopped_early: bool,
    pub steps: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub seconds: f64,
}

pub(super) struct EarlyStop {
    patience: usize,
    since: usize,
    pub(super) best: f64,
    pub(super) best_epoch: Option<usize>,
    history: Vec<(usize, f64)>,
}

impl EarlyStop {
    pub(super) fn new(patience: usize) -> Self {
        Self {
            patience,
            since: 0,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            history: Vec::new(),
        }
    }

    /// Returns `(improved, stop)`.
    pub(super) fn observe(&mut self, epoch: usize, acc: f64) -> (bool, bool) {
        self.history.push((epoch, acc));
        if acc > self.best {
            self.best = acc;
            self.best_epoch = Some(epoch);
            self.since = 0;
            (true, false)
        } else {
            self.since += 1;
            (false, self.since >= self.patience)
        }
    }
}

fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Random real context for one CT step, drawn from `train` minus `batch`.
fn sample_context(train: &[usize], batch: &[usize], upper: usize, min: usize, rng: &mut Rng) -> Vec<usize> {
    let mut in_batch = std::collections::HashSet::with_capacity(batch.len());
    in_batch.extend(batch.iter().copied());
    let mut pool: Vec<usize> = train.iter().copied().filter(|r| !in_batch.contains(r)).collect();
    let hi = upper.min(pool.len());
    let lo = min.min(hi);
    let size = rng.random_range(lo..=hi);
    let (chosen, _) = pool.partial_shuffle(rng, size);
    chosen.to_vec()
}

fn capacity_left(model: &PfnModel, p: usize, batch: usize) -> usize {
    model.config().n_ctx_max.saturating_sub(p + batch)
}

/// Tunes `prompt` (and its decoder head, when present) against the frozen
/// model. Returns the best-validation snapshot.
pub fn tune(
    model: &PfnModel,
    prompt: TunedPrompt,
    ds: &TabularDataset,
    cfg: &TuneConfig,
) -> Result<(TunedPrompt, FitTrace)> {
    tune_with(model, prompt, ds, cfg, None)
}

pub fn tune_with(
    model: &PfnModel,
    mut prompt: TunedPrompt,
    ds: &TabularDataset,
    cfg: &TuneConfig,
    hook: Option<LossHook<'_>>,
) -> Result<(TunedPrompt, FitTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let train = &ds.split.train;
    if train.is_empty() {
        return Err(Error::Config("tuning needs a non-empty training split".into()));
    }
    let val = validation_rows(ds, cfg.max_val_size, cfg.seed)?;
    let val_truth = ds.gather_labels(&val);
    let d = ds.n_features();
    let k = prompt.class_count;
    let p = prompt.p();
    prompt.config = cfg.clone();

    let mut store = ParamStore::new();
    store.push("prompt.x", prompt.x_part.clone());
    if let Some(head) = &prompt.decoder {
        for (name, t) in DECODER_NAMES.iter().zip(&head.tensors) {
            store.push(*name, t.clone());
        }
    }
    store.set_trainable(|_| true);

    let reference = match cfg.loss {
        LossKind::CrossEntropy => None,
        LossKind::Kl => {
            if prompt.decoder.is_some() {
                return Err(Error::Config("KL loss is unavailable with a replaced decoder".into()));
            }
            Some(kl_reference(model, ds, cfg.seed)?)
        }
    };

    let budget = cfg
        .ctx_upper_bound
        .min(model.config().n_ctx_max.saturating_sub(p + QUERY_CHUNK.min(val.len())));
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr))?;
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best = store.clone();
    let mut losses = Vec::new();
    let mut order = train.clone();
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.nct_batch_points) {
            let context = match cfg.train_mode {
                TrainMode::Nct => Vec::new(),
                TrainMode::Ct => {
                    let upper = cfg.ctx_upper_bound.min(capacity_left(model, p, batch.len()));
                    sample_context(train, batch, upper, 0, &mut rng)
                }
            };
            opt.set_lr(warmup_lr(cfg.lr, step, cfg.warmup_steps))?;
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let bound = store.bind(&mut g);
            let cx = ds.gather_features(&context);
            let cy = ds.gather_labels(&context);
            let bx = ds.gather_features(batch);
            let by = ds.gather_labels(batch);
            let dec = (bound.len() > 1).then(|| &bound[1..]);
            let logits = model.logits_on(
                &mut g,
                &vars,
                Some((bound[0], &prompt.y_part)),
                dec,
                Rows::new(&cx, d),
                &cy,
                Rows::new(&bx, d),
            )?;
            let mut loss = match &reference {
                None => g.cross_entropy(logits, &by)?,
                Some(r) => {
                    let n_out = g.shape(logits)[1];
                    let pv: Vec<f64> = batch.iter().flat_map(|&row| r.row(row).to_vec()).collect();
                    let pref = g.constant(vec![batch.len(), n_out], pv)?;
                    let q = g.softmax(logits)?;
                    g.kl_divergence(pref, q)?
                }
            };
            if let Some(h) = hook {
                let sliced = g.slice_cols(logits, 0, k.max(2))?;
                let probs = g.softmax(sliced)?;
                loss = h(&mut g, loss, probs, batch)?;
            }
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { step, loss: value });
            }
            losses.push(value);
            let grads = g.backward(loss)?;
            store.zero_grads();
            store.accumulate(&bound, &grads);
            opt.step(&mut store);
            step += 1;
        }
        if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
            let current = with_store(&prompt, &store);
            let pred = predict(model, &current, ds, &val, cfg.selection_mode(), budget, cfg.seed)?;
            let acc = accuracy(&pred.labels, &val_truth)?;
            let (improved, halt) = stop.observe(epoch, acc);
            if improved {
                best = store.clone();
            }
            if halt {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let mut fitted = with_store(&prompt, &best);
    fitted.val_score = Some(stop.best);
    let trace = FitTrace {
        losses,
        val_history: stop.history,
        best_epoch: stop.best_epoch,
        best_val: stop.best,
        stopped_early,
        steps: step,
        trainable_params: store.trainable_params(),
        total_params: model.params().total_params(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((fitted, trace))
}

fn with_store(prompt: &TunedPrompt, store: &ParamStore) -> TunedPrompt {
    let strip = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.values().to_vec()).expect("valid tensor");
    let mut out = prompt.clone();
    out.x_part = strip(store.get(0));
    if let Some(head) = &mut out.decoder {
        for (i, t) in head.tensors.iter_mut().enumerate() {
            *t = strip(store.get(i + 1));
        }
    }
    out
}

/// Frozen zero-shot probabilities `[n_rows x n_out]` for every training row,
/// conditioned on a fixed random context.
fn kl_reference(model: &PfnModel, ds: &TabularDataset, seed: u64) -> Result<Tensor> {
    let train = &ds.split.train;
    let mut rng = seeded(derive_seed(seed, 3));
    let mut ctx = train.clone();
    ctx.shuffle(&mut rng);
    ctx.truncate(KL_REFERENCE_CONTEXT);
    let d = ds.n_features();
    let cx = ds.gather_features(&ctx);
    let cy = ds.gather_labels(&ctx);
    let all = ds.all_rows();
    let qx = ds.gather_features(&all);
    let chunk = model.config().n_ctx_max.saturating_sub(ctx.len()).clamp(1, QUERY_CHUNK);
    model.forward_chunked(Rows::new(&cx, d), &cy, Rows::new(&qx, d), None, chunk)
}

/// Full fine-tuning baseline: every model parameter is trained at a fixed
/// learning rate of 1e-3 on CT-style batches (at least one real context
/// row), validated zero-shot with the same early stopping as [`tune`].
pub fn fine_tune_all(model: &PfnModel, ds: &TabularDataset, cfg: &TuneConfig) -> Result<(PfnModel, FitTrace)> {
    cfg.validate()?;
    let start = Instant::now();
    let train = &ds.split.train;
    if train.len() < 2 {
        return Err(Error::Config("fine-tuning needs at least two training rows".into()));
    }
    if ds.class_count > model.config().c_max {
        return Err(Error::ClassBudget {
            got: ds.class_count,
            max: model.config().c_max,
        });
    }
    let val = validation_rows(ds, cfg.max_val_size, cfg.seed)?;
    let val_truth = ds.gather_labels(&val);
    let d = ds.n_features();
    let mut tuned = model.clone();
    tuned.params_mut().set_trainable(|_| true);
    let budget = cfg.ctx_upper_bound.min(model.config().n_ctx_max / 2);
    let mut opt = AdamW::new(AdamWConfig::with_lr(FINE_TUNE_LR))?;
    let mut rng = seeded(derive_seed(cfg.seed, 2));
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best = tuned.clone();
    let mut losses = Vec::new();
    let mut order = train.clone();
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.nct_batch_points) {
            let upper = cfg.ctx_upper_bound.min(capacity_left(&tuned, 0, batch.len()));
            let context = sample_context(train, batch, upper, 1, &mut rng);
            let mut g = Graph::new();
            let vars = tuned.bind(&mut g, true);
            let cx = ds.gather_features(&context);
            let cy = ds.gather_labels(&context);
            let bx = ds.gather_features(batch);
            let by = ds.gather_labels(batch);
            let logits = tuned.logits_on(&mut g, &vars, None, None, Rows::new(&cx, d), &cy, Rows::new(&bx, d))?;
            let loss = g.cross_entropy(logits, &by)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { step, loss: value });
            }
            losses.push(value);
            let grads = g.backward(loss)?;
            let params = tuned.params_mut();
            params.zero_grads();
            params.accumulate(&vars, &grads);
            opt.step(params);
            step += 1;
        }
        if (epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs {
            let pred = predict_zero_shot(&tuned, ds, &val, budget, cfg.seed)?;
            let acc = accuracy(&pred.labels, &val_truth)?;
            let (improved, halt) = stop.observe(epoch, acc);
            if improved {
                best = tuned.clone();
            }
            if halt {
                stopped_early = epoch + 1 < cfg.epochs;
                break;
            }
        }
    }
    let trace = FitTrace {
        losses,
        val_history: stop.history,
        best_epoch: stop.best_epoch,
        best_val: stop.best,
        stopped_early,
        steps: step,
        trainable_params: tuned.params().trainable_params(),
        total_params: tuned.params().total_params(),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((best, trace))
}
