use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    extend_classes, init_prompt, predict, predict_with_context, tune, EvalMode, FitTrace, TuneConfig, TunedPrompt,
};
use crate::data::{invert_permutation, TabularDataset};
use crate::error::{Error, Result};
use crate::pfn::{PfnModel, Prediction};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub members: usize,
    pub top_k: usize,
    pub seed: u64,
    /// When false every member uses identity permutations and the tuning
    /// seed, so all members are identical.
    #[serde(default = "yes")]
    pub diversify: bool,
}

fn yes() -> bool {
    true
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self {
            members: 10,
            top_k: 2,
            seed: 0,
            diversify: true,
        }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.members {
            return Err(Error::Config(format!(
                "ensemble needs 1 <= top_k <= members, got top_k {} of {}",
                self.top_k, self.members
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleMember {
    pub prompt: TunedPrompt,
    /// Member column `j` reads original column `feature_perm[j]`.
    pub feature_perm: Vec<usize>,
    /// Original class `c` is member class `label_perm[c]`.
    pub label_perm: Vec<usize>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub members: Vec<EnsembleMember>,
    /// Member indices by descending validation accuracy (ties by index).
    pub ranking: Vec<usize>,
    pub top_k: usize,
}

/// Tunes `spec.members` prompts, each on its own feature and label
/// permutation of `ds`. Member 0 always uses the identity permutations and
/// `cfg.seed`.
pub fn fit_ensemble(
    model: &PfnModel,
    ds: &TabularDataset,
    cfg: &TuneConfig,
    spec: &EnsembleSpec,
) -> Result<(Ensemble, Vec<FitTrace>)> {
    spec.validate()?;
    let d = ds.n_features();
    let k = ds.class_count;
    let mut members = Vec::with_capacity(spec.members);
    let mut traces = Vec::with_capacity(spec.members);
    for i in 0..spec.members {
        let varied = spec.diversify && i > 0;
        let mut fperm: Vec<usize> = (0..d).collect();
        let mut lperm: Vec<usize> = (0..k).collect();
        let mut member_cfg = cfg.clone();
        if varied {
            let mut rng = seeded(derive_seed(spec.seed, i as u64));
            fperm.shuffle(&mut rng);
            lperm.shuffle(&mut rng);
            member_cfg.seed = derive_seed(spec.seed, 1000 + i as u64);
        }
        let member_ds = ds.permuted(&fperm, &lperm)?;
        let head = if k > model.config().c_max {
            Some(extend_classes(model, k, derive_seed(member_cfg.seed, 9))?)
        } else {
            None
        };
        let prompt = init_prompt(&member_cfg, &member_ds, model, head)?;
        let (prompt, trace) = tune(model, prompt, &member_ds, &member_cfg)?;
        members.push(EnsembleMember {
            prompt,
            feature_perm: fperm,
            label_perm: lperm,
            val_accuracy: trace.best_val,
        });
        traces.push(trace);
    }
    Ok((rank(members, spec.top_k), traces))
}

pub(crate) fn rank(members: Vec<EnsembleMember>, top_k: usize) -> Ensemble {
    let mut ranking: Vec<usize> = (0..members.len()).collect();
    ranking.sort_by(|&a, &b| {
        members[b]
            .val_accuracy
            .total_cmp(&members[a].val_accuracy)
            .then(a.cmp(&b))
    });
    Ensemble {
        members,
        ranking,
        top_k,
    }
}

impl Ensemble {
    pub fn selected(&self) -> &[usize] {
        &self.ranking[..self.top_k.min(self.ranking.len())]
    }

    /// Mean of the top-k members' class probabilities, mapped back to the
    /// original label order.
    pub fn predict(
        &self,
        model: &PfnModel,
        ds: &TabularDataset,
        rows: &[usize],
        mode: EvalMode,
        context_budget: usize,
        seed: u64,
    ) -> Result<Prediction> {
        self.average(ds, rows, |m, member_ds| {
            Ok(predict(model, &m.prompt, member_ds, rows, mode, context_budget, seed)?.probs)
        })
    }

    /// Like [`Ensemble::predict`] with an explicit real context for every
    /// member.
    pub fn predict_with_context(
        &self,
        model: &PfnModel,
        ds: &TabularDataset,
        context: &[usize],
        rows: &[usize],
    ) -> Result<Prediction> {
        self.average(ds, rows, |m, member_ds| {
            Ok(predict_with_context(model, &m.prompt, member_ds, context, rows)?.probs)
        })
    }

    fn average<F>(&self, ds: &TabularDataset, rows: &[usize], member_probs: F) -> Result<Prediction>
    where
        F: Fn(&EnsembleMember, &TabularDataset) -> Result<Tensor>,
    {
        let k = ds.class_count.max(2);
        let mut acc = vec![0.0; rows.len() * k];
        let chosen = self.selected();
        for &i in chosen {
            let m = &self.members[i];
            let member_ds = ds.permuted(&m.feature_perm, &m.label_perm)?;
            let probs = member_probs(m, &member_ds)?;
            for r in 0..rows.len() {
                let row = probs.row(r);
                for c in 0..k {
                    let src = if c < m.label_perm.len() { m.label_perm[c] } else { c };
                    acc[r * k + c] += row[src];
                }
            }
        }
        let n = chosen.len() as f64;
        acc.iter_mut().for_each(|v| *v /= n);
        Ok(Prediction::from_probs(Tensor::matrix(rows.len(), k, acc)?))
    }

    /// Member-space label permutation inverse, for diagnostics.
    pub fn member_label_inverse(&self, i: usize) -> Vec<usize> {
        invert_permutation(&self.members[i].label_perm)
    }
}
