use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Result, TcpnError};

/// Worst-case relative disagreement between analytic and central-difference
/// gradients, with the location that produced it.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub param_index: usize,
    pub elem_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval_loss<F>(params: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &ids);
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(TcpnError::NonFinite(format!("loss evaluated to {}", v)));
    }
    Ok(v)
}

/// Compares tape gradients against central differences for every element of
/// every parameter. `build` must construct the same scalar loss each call;
/// randomness has to be frozen outside.
pub fn grad_check<F>(params: &[Tensor], build: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let loss = build(&mut g, &ids);
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(TcpnError::NonFinite(format!("loss evaluated to {}", lv)));
    }
    g.backward(loss);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(params)
        .map(|(id, p)| match g.grad(*id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(p.shape()),
        })
        .collect();
    for (pi, t) in analytic.iter().enumerate() {
        if !t.is_finite() {
            return Err(TcpnError::NonFinite(format!(
                "analytic gradient of parameter {} is not finite",
                pi
            )));
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        param_index: 0,
        elem_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval_loss(&work, &build)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval_loss(&work, &build)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    param_index: pi,
                    elem_index: ei,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
