//! Classification metrics.

use crate::error::{Error, Result};

/// Fraction of positions where `pred` equals `truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Metric(format!(
            "prediction length {} differs from label length {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Metric("accuracy of an empty prediction".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng as _;

    #[test]
    fn examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn matches_direct_count() {
        let mut rng = seeded(1);
        let a: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let mut hits = 0;
        for i in 0..1000 {
            if a[i] == b[i] {
                hits += 1;
            }
        }
        assert_eq!(accuracy(&a, &b).unwrap(), hits as f64 / 1000.0);
    }
}
