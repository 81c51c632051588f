use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Evaluates `predict` on a `resolution x resolution` lattice over the two
/// feature ranges in `bounds` and writes `x,y,p_0..p_{k-1}` rows (x outer).
/// Returns the number of rows written.
pub fn export_decision_grid<F, W>(predict: F, bounds: &[(f64, f64)], resolution: usize, out: W) -> Result<usize>
where
    F: Fn(&[f64]) -> Result<Tensor>,
    W: Write,
{
    if bounds.len() != 2 {
        return Err(Error::Shape {
            op: "decision grid",
            left: vec![bounds.len()],
            right: vec![2],
        });
    }
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let axis = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if resolution == 1 {
            vec![(lo + hi) / 2.0]
        } else {
            (0..resolution)
                .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
                .collect()
        }
    };
    let (xs, ys) = (axis(bounds[0]), axis(bounds[1]));
    let points: Vec<f64> = xs.iter().flat_map(|&x| ys.iter().flat_map(move |&y| [x, y])).collect();
    let probs = predict(&points)?;
    let n = resolution * resolution;
    if probs.shape().len() != 2 || probs.shape()[0] != n {
        return Err(Error::Shape {
            op: "decision grid predictions",
            left: probs.shape().to_vec(),
            right: vec![n],
        });
    }
    let k = probs.shape()[1];
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["x".to_string(), "y".to_string()];
    header.extend((0..k).map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for r in 0..n {
        let mut rec = vec![points[2 * r].to_string(), points[2 * r + 1].to_string()];
        rec.extend(probs.row(r).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(n)
}
