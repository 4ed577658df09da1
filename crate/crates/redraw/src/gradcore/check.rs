use crate::error::Result;
use crate::gradcore::array::Array;
use crate::gradcore::graph::{Graph, NodeId};

/// Central-difference gradient audit for a scalar-valued function of one
/// input array. `f` must be deterministic: it is re-evaluated 2 * numel + 1
/// times. Returns the worst relative error
///
///   max_i |analytic_i - fd_i| / (|analytic_i| + |fd_i| + 1e-12)
///
/// where fd_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn finite_diff_check<F>(f: F, point: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let eval = |x: &Array, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let leaf = g.leaf(x.clone(), true)?;
        let out = f(&mut g, leaf)?;
        let value = g.value(out).item();
        if !want_grad {
            return Ok((value, None));
        }
        let grads = g.backward(out)?;
        let grad = grads
            .get(leaf)
            .map(|a| a.data().to_vec())
            .unwrap_or_else(|| vec![0.0; x.numel()]);
        Ok((value, Some(grad)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.unwrap();

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let (fp, _) = eval(&plus, false)?;
        let (fm, _) = eval(&minus, false)?;
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
