use super::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients to central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(|g_ad| + |g_fd|, 1e-8)` over every coordinate.
    pub max_rel_error: f64,
    pub pass: bool,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Check the adjoints used by `f` at the point `params`.
///
/// `f` records a scalar function of the parameters into a fresh graph (the
/// parameters are passed in as node ids, in order) and returns the loss node.
/// It is called once for the analytic gradient and twice per coordinate for
/// the central difference `(f(θ + h eᵢ) - f(θ - h eᵢ)) / 2h`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::config(format!("finite-difference step {step} must be positive")));
    }

    let eval = |point: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = point
            .iter()
            .map(|p| g.parameter(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &ids)?;
        Ok((g, ids, loss))
    };
    let loss_at = |point: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, loss) = eval(point)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("objective is {v} during probing")));
        }
        Ok(v)
    };

    let (g, ids, loss) = eval(params)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut point = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads.expect(*id)?.clone();
        for ci in 0..params[pi].len() {
            let original = params[pi].data()[ci];
            point[pi].data_mut()[ci] = original + step;
            let plus = loss_at(&point)?;
            point[pi].data_mut()[ci] = original - step;
            let minus = loss_at(&point)?;
            point[pi].data_mut()[ci] = original;

            let fd = (plus - minus) / (2.0 * step);
            let ad = analytic.data()[ci];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            coordinates += 1;
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((pi, ci));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        pass: max_rel_error <= tol,
        worst,
        coordinates,
    })
}
