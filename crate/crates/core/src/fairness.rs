//! Demographic parity and DP-regularized prompt tuning.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, TabularDataset};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::pfn::PfnModel;
use crate::tensor::{Graph, Tensor, Var};
use crate::tuning::{predict, tune, tune_with, FitTrace, TuneConfig, TunedPrompt};

/// Raw value that defines the protected group: a number for numeric
/// columns, a category name for categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProtectedValue {
    Number(f64),
    Category(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FairnessSpec {
    pub protected_column: String,
    pub protected_value: ProtectedValue,
    #[serde(default = "one")]
    pub positive_class: usize,
    pub lambda: f64,
    /// Penalize group sums instead of group means.
    #[serde(default)]
    pub sum_penalty: bool,
}

fn one() -> usize {
    1
}

impl FairnessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Protected-group membership (`true` = G1) for every row of `ds`.
pub fn protected_groups(ds: &TabularDataset, spec: &FairnessSpec) -> Result<Vec<bool>> {
    let (j, meta) = ds
        .columns
        .iter()
        .enumerate()
        .find(|(_, c)| c.name == spec.protected_column)
        .ok_or_else(|| Error::Config(format!("no column named {:?}", spec.protected_column)))?;
    let target = match (&spec.protected_value, meta.kind) {
        (ProtectedValue::Number(v), _) => *v,
        (ProtectedValue::Category(name), ColumnKind::Categorical) => meta
            .categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("column {:?} has no category {name:?}", meta.name)))?
            as f64,
        (ProtectedValue::Category(name), ColumnKind::Numeric) => {
            return Err(Error::Config(format!(
                "numeric column {:?} cannot match category {name:?}",
                meta.name
            )))
        }
    };
    let tol = 1e-9 * target.abs().max(1.0);
    Ok((0..ds.n_rows())
        .map(|r| (ds.row(r)[j] * meta.scale + meta.center - target).abs() <= tol)
        .collect())
}

fn gap(values: impl Iterator<Item = (f64, bool)>) -> Result<f64> {
    let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
    for (v, g) in values {
        if g {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    if n0 == 0 {
        return Err(Error::EmptyGroup("G0"));
    }
    if n1 == 0 {
        return Err(Error::EmptyGroup("G1"));
    }
    Ok((s0 / n0 as f64 - s1 / n1 as f64).abs())
}

/// DP gap between positive-label rates of the two groups.
pub fn demographic_parity(labels: &[usize], groups: &[bool], positive: usize) -> Result<f64> {
    if labels.len() != groups.len() {
        return Err(Error::Metric(format!(
            "{} labels vs {} group flags",
            labels.len(),
            groups.len()
        )));
    }
    gap(labels
        .iter()
        .zip(groups)
        .map(|(&y, &g)| (f64::from(u8::from(y == positive)), g)))
}

/// DP gap between mean positive-class probabilities of the two groups.
pub fn soft_demographic_parity(probs: &Tensor, groups: &[bool], positive: usize) -> Result<f64> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != groups.len() || positive >= shape[1] {
        return Err(Error::Metric(format!(
            "probabilities {shape:?} do not match {} rows / positive class {positive}",
            groups.len()
        )));
    }
    gap((0..groups.len()).map(|r| (probs.row(r)[positive], groups[r])))
}

/// `base + lambda * |rate(G0) - rate(G1)|` on a batch's probabilities
/// `[b x k]`. Returns `None` for the penalty when a group is missing, in
/// which case the result is `base` itself.
pub fn dp_regularized_loss(
    g: &mut Graph,
    base: Var,
    probs: Var,
    groups: &[bool],
    spec: &FairnessSpec,
) -> Result<(Var, bool)> {
    spec.validate()?;
    if spec.lambda == 0.0 {
        return Ok((base, true));
    }
    let k = g.shape(probs)[1];
    let idx = |flag: bool| -> Vec<usize> {
        groups
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == flag)
            .map(|(r, _)| r * k + spec.positive_class)
            .collect()
    };
    let (i0, i1) = (idx(false), idx(true));
    if i0.is_empty() || i1.is_empty() {
        return Ok((base, false));
    }
    let mut m0 = g.mean_of(probs, &i0)?;
    let mut m1 = g.mean_of(probs, &i1)?;
    if spec.sum_penalty {
        m0 = g.scale(m0, i0.len() as f64);
        m1 = g.scale(m1, i1.len() as f64);
    }
    let diff = g.sub(m0, m1)?;
    let abs = g.abs(diff);
    let pen = g.scale(abs, spec.lambda);
    Ok((g.add(base, pen)?, true))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairReport {
    pub accuracy: f64,
    pub dp: f64,
    pub lambda: f64,
    /// Batches whose penalty was skipped because a group was absent.
    pub skipped_batches: usize,
}

/// Tunes a single prompt with the DP penalty and reports test accuracy and
/// hard-label DP (NC inference).
pub fn tune_fair(
    model: &PfnModel,
    prompt: TunedPrompt,
    ds: &TabularDataset,
    cfg: &TuneConfig,
    spec: &FairnessSpec,
) -> Result<(TunedPrompt, FitTrace, FairReport)> {
    spec.validate()?;
    if spec.positive_class >= ds.class_count {
        return Err(Error::Config(format!(
            "positive class {} out of range for {} classes",
            spec.positive_class, ds.class_count
        )));
    }
    let groups = protected_groups(ds, spec)?;
    let skipped = Cell::new(0usize);
    let (fitted, trace) = if spec.lambda == 0.0 {
        tune(model, prompt, ds, cfg)?
    } else {
        let hook = |g: &mut Graph, base: Var, probs: Var, rows: &[usize]| -> Result<Var> {
            let flags: Vec<bool> = rows.iter().map(|&r| groups[r]).collect();
            let (loss, applied) = dp_regularized_loss(g, base, probs, &flags, spec)?;
            if !applied {
                skipped.set(skipped.get() + 1);
            }
            Ok(loss)
        };
        tune_with(model, prompt, ds, cfg, Some(&hook))?
    };
    let test = &ds.split.test;
    let pred = predict(model, &fitted, ds, test, cfg.eval_mode, 0, cfg.seed)?;
    let test_groups: Vec<bool> = test.iter().map(|&r| groups[r]).collect();
    let report = FairReport {
        accuracy: accuracy(&pred.labels, &ds.gather_labels(test))?,
        dp: demographic_parity(&pred.labels, &test_groups, spec.positive_class)?,
        lambda: spec.lambda,
        skipped_batches: skipped.get(),
    };
    Ok((fitted, trace, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::grad_check;

    fn spec(lambda: f64) -> FairnessSpec {
        FairnessSpec {
            protected_column: "group".into(),
            protected_value: ProtectedValue::Number(1.0),
            positive_class: 1,
            lambda,
            sum_penalty: false,
        }
    }

    #[test]
    fn rate_gap_examples() {
        let groups = [false; 10].iter().chain(&[true; 10]).copied().collect::<Vec<_>>();
        let mut labels = vec![0; 20];
        labels[..8].fill(1);
        labels[10..13].fill(1);
        assert!((demographic_parity(&labels, &groups, 1).unwrap() - 0.5).abs() < 1e-15);
        let same = [1, 0, 1, 0];
        assert_eq!(demographic_parity(&same, &[false, false, true, true], 1).unwrap(), 0.0);
        assert!(matches!(
            demographic_parity(&[1, 0], &[true, true], 1),
            Err(Error::EmptyGroup("G0"))
        ));
        assert!(matches!(
            demographic_parity(&[1, 0], &[false, false], 1),
            Err(Error::EmptyGroup("G1"))
        ));
    }

    #[test]
    fn matches_direct_summation() {
        let probs: Vec<f64> = (0..12).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let groups: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let t = Tensor::matrix(12, 2, probs.iter().flat_map(|&p| [1.0 - p, p]).collect()).unwrap();
        let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..12 {
            if groups[i] {
                b += probs[i];
                nb += 1.0;
            } else {
                a += probs[i];
                na += 1.0;
            }
        }
        let want = (a / na - b / nb).abs();
        assert!((soft_demographic_parity(&t, &groups, 1).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn hard_equals_soft_on_one_hot() {
        let labels = [1, 0, 0, 1, 1, 0, 1];
        let groups = [true, false, true, false, false, true, true];
        let t = Tensor::matrix(
            7,
            2,
            labels
                .iter()
                .flat_map(|&y| if y == 1 { [0.0, 1.0] } else { [1.0, 0.0] })
                .collect(),
        )
        .unwrap();
        assert_eq!(
            demographic_parity(&labels, &groups, 1).unwrap(),
            soft_demographic_parity(&t, &groups, 1).unwrap()
        );
    }

    fn batch(g: &mut Graph, values: &[f64]) -> (Var, Var) {
        let base = g.constant(vec![1], vec![0.7]).unwrap();
        let probs = g.constant(vec![values.len() / 2, 2], values.to_vec()).unwrap();
        (base, probs)
    }

    #[test]
    fn zero_lambda_and_missing_groups_return_base() {
        let mut g = Graph::new();
        let (base, probs) = batch(&mut g, &[0.2, 0.8, 0.6, 0.4]);
        assert_eq!(
            dp_regularized_loss(&mut g, base, probs, &[true, false], &spec(0.0)).unwrap(),
            (base, true)
        );
        assert_eq!(
            dp_regularized_loss(&mut g, base, probs, &[true, true], &spec(1.0)).unwrap(),
            (base, false)
        );
        assert!(dp_regularized_loss(&mut g, base, probs, &[true, false], &spec(-1.0)).is_err());
        let (loss, _) = dp_regularized_loss(&mut g, base, probs, &[true, false], &spec(2.0)).unwrap();
        assert!((g.scalar(loss) - (0.7 + 2.0 * 0.4)).abs() < 1e-12);
        let equal = batch(&mut g, &[0.5, 0.5, 0.5, 0.5]);
        let (loss, _) = dp_regularized_loss(&mut g, equal.0, equal.1, &[true, false], &spec(1.0)).unwrap();
        assert_eq!(g.scalar(loss), 0.7);
    }

    #[test]
    fn sum_penalty_scales_by_group_size() {
        let mut g = Graph::new();
        let (base, probs) = batch(&mut g, &[0.2, 0.8, 0.6, 0.4, 0.1, 0.9]);
        let s = FairnessSpec {
            sum_penalty: true,
            ..spec(1.0)
        };
        let (loss, _) = dp_regularized_loss(&mut g, base, probs, &[true, false, false], &s).unwrap();
        assert!((g.scalar(loss) - (0.7 + (0.4 + 0.9 - 0.8f64).abs())).abs() < 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let groups = [true, false, true, false, false, true];
        for seed in 0..5u64 {
            let logits = Tensor::matrix(
                6,
                2,
                (0..12)
                    .map(|i| (((i as u64 + 3) * (seed + 5) * 37) % 17) as f64 / 8.0 - 1.0)
                    .collect(),
            )
            .unwrap();
            let err = grad_check(
                |g, x| {
                    let probs = g.softmax(x)?;
                    let base = g.constant(vec![1], vec![0.0])?;
                    Ok(dp_regularized_loss(g, base, probs, &groups, &spec(1.5))?.0)
                },
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn spec_json() {
        let s = FairnessSpec::from_json(r#"{"protected_column": "sex", "protected_value": "female", "lambda": 1}"#)
            .unwrap();
        assert_eq!(s.protected_value, ProtectedValue::Category("female".into()));
        assert_eq!(s.positive_class, 1);
        assert!(!s.sum_penalty);
        assert!(FairnessSpec::from_json(r#"{"protected_column": "a", "protected_value": 1, "lambda": -0.5}"#).is_err());
        assert_eq!(
            FairnessSpec::from_json(&serde_json::to_string(&spec(0.3)).unwrap()).unwrap(),
            spec(0.3)
        );
    }

    proptest! {
        #[test]
        fn dp_is_symmetric_and_bounded(labels in prop::collection::vec(0usize..2, 4..40), seed in 0u64..1000) {
            let n = labels.len();
            let mut groups: Vec<bool> = (0..n).map(|i| (i as u64 * 2654435761 + seed).is_multiple_of(3)).collect();
            groups[0] = true;
            groups[1] = false;
            let dp = demographic_parity(&labels, &groups, 1).unwrap();
            let flipped: Vec<bool> = groups.iter().map(|g| !g).collect();
            prop_assert!((0.0..=1.0).contains(&dp));
            prop_assert_eq!(dp, demographic_parity(&labels, &flipped, 1).unwrap());
        }

        #[test]
        fn loss_is_monotone_in_lambda(p in prop::collection::vec(0.0f64..1.0, 4), l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
            let mut g = Graph::new();
            let values: Vec<f64> = p.iter().flat_map(|&v| [1.0 - v, v]).collect();
            let (base, probs) = batch(&mut g, &values);
            let groups = [true, false, true, false];
            let (a, _) = dp_regularized_loss(&mut g, base, probs, &groups, &spec(l1)).unwrap();
            let (b, _) = dp_regularized_loss(&mut g, base, probs, &groups, &spec(l1 + dl)).unwrap();
            prop_assert!(g.scalar(a) <= g.scalar(b));
        }
    }
}
