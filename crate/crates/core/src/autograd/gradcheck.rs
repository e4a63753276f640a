//! Central-difference gradient checking.

use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids = point
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Largest `|analytic − central| / max(1e-8, |central|)` over every
/// coordinate of every input tensor.
///
/// `f` builds a scalar from the graph nodes of `point`, in order.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {step}")));
    }
    let mut g = Graph::new();
    let ids = point
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (ti, t) in point.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[ti], t.numel());
        for (ci, a) in analytic.iter().enumerate() {
            let x0 = t.data()[ci];
            probe[ti].data_mut()[ci] = x0 + step;
            let fp = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ci] = x0 - step;
            let fm = evaluate(&f, &probe)?;
            probe[ti].data_mut()[ci] = x0;
            let central = (fp - fm) / (2.0 * step);
            let rel = (a - central).abs() / central.abs().max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
