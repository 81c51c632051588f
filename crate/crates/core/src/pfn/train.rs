use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PfnModel, Rows};
use crate::error::{Error, Result};
use crate::prior::SyntheticTask;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{AdamW, AdamWConfig, Graph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Prior-fitting: one task per step, cross-entropy on its query block,
/// AdamW with 10% linear warmup then constant `lr`.
///
/// Each task's feature columns and class ids are permuted with a seeded
/// permutation before use.
pub fn pretrain<I>(model: &mut PfnModel, stream: I, steps: usize, lr: f64, seed: u64) -> Result<PretrainReport>
where
    I: IntoIterator<Item = SyntheticTask>,
{
    if steps == 0 {
        return Err(Error::Config("pretraining needs at least one step".into()));
    }
    let start = std::time::Instant::now();
    let mut opt = AdamW::new(AdamWConfig::with_lr(lr))?;
    let warmup = (steps / 10).max(1);
    let mut losses = Vec::with_capacity(steps);
    let c_max = model.config().c_max;
    let mut stream = stream.into_iter();
    for step in 0..steps {
        let task = stream
            .next()
            .ok_or_else(|| Error::Config(format!("task stream ended after {step} steps")))?;
        let ds = &task.dataset;
        if ds.class_count > c_max {
            return Err(Error::ClassBudget {
                got: ds.class_count,
                max: c_max,
            });
        }
        let mut rng = seeded(derive_seed(seed, step as u64));
        let mut fperm: Vec<usize> = (0..ds.n_features()).collect();
        fperm.shuffle(&mut rng);
        let mut lperm: Vec<usize> = (0..ds.class_count).collect();
        lperm.shuffle(&mut rng);
        let ds = ds.permuted(&fperm, &lperm)?;
        let d = ds.n_features();
        let tx = ds.gather_features(task.train_rows());
        let ty = ds.gather_labels(task.train_rows());
        let qx = ds.gather_features(task.test_rows());
        let qy = ds.gather_labels(task.test_rows());

        opt.set_lr(lr * ((step + 1) as f64 / warmup as f64).min(1.0))?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let logits = model.logits_on(&mut g, &vars, None, None, Rows::new(&tx, d), &ty, Rows::new(&qx, d))?;
        let loss = g.cross_entropy(logits, &qy)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { step, loss: value });
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate(&vars, &grads);
        opt.step(params);
    }
    Ok(PretrainReport {
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}
