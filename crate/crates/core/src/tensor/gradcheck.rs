use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar map against central differences.
///
/// Returns `max |analytic - numeric| / max(1, |numeric|)` over every
/// coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(std::slice::from_ref(x), |g, vars| f(g, vars[0]), h)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor], track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = track;
                g.leaf(&t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::Shape {
                op: "grad_check",
                left: g.shape(out).to_vec(),
                right: vec![1],
            });
        }
        if !v[0].is_finite() {
            return Err(Error::Numeric(format!("objective is not finite: {}", v[0])));
        }
        Ok((g, vars, out))
    };

    let (g, vars, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].values()[j];
            probe[ti].values_mut()[j] = orig + h;
            let (gp, _, op) = eval(&probe, false)?;
            let fp = gp.scalar(op);
            probe[ti].values_mut()[j] = orig - h;
            let (gm, _, om) = eval(&probe, false)?;
            let fm = gm.scalar(om);
            probe[ti].values_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
