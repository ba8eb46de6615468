//! Central finite-difference checks of [`Graph::backward`].

use super::{Bindings, Graph, GraphError, NodeId, Tensor};

/// Denominator floor for the relative error, so entries where both the
/// analytic and numeric derivative vanish compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of [`grad_check_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Parameter, flat index, analytic and numeric value at the worst entry.
    pub worst: Option<(NodeId, usize, f64, f64)>,
    /// Number of scalar entries compared.
    pub entries: usize,
}

fn scalar_loss(graph: &mut Graph, loss: NodeId, bindings: &Bindings) -> Result<f64, GraphError> {
    graph.forward(bindings)?;
    Ok(graph.value(loss)?.item())
}

/// Worst relative error between backward-pass gradients and central
/// differences with step `eps`, over every entry of every trainable leaf.
pub fn grad_check(graph: &mut Graph, loss: NodeId, eps: f64) -> Result<f64, GraphError> {
    grad_check_report(graph, loss, eps).map(|r| r.max_rel_error)
}

pub fn grad_check_report(
    graph: &mut Graph,
    loss: NodeId,
    eps: f64,
) -> Result<GradCheckReport, GraphError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(GraphError::InvalidStep(eps));
    }
    graph.eval()?;
    let analytic = graph.backward(loss)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries: 0,
    };
    let mut bindings = Bindings::new();
    for param in graph.parameters() {
        let base: Tensor = graph.leaf_value(param).expect("parameter is a leaf").clone();
        let grad = analytic.get(param).expect("gradient for every parameter");
        for k in 0..base.numel() {
            let mut plus = base.clone();
            plus.data_mut()[k] += eps;
            bindings.insert(param, plus);
            let f_plus = scalar_loss(graph, loss, &bindings)?;
            let mut minus = base.clone();
            minus.data_mut()[k] -= eps;
            bindings.insert(param, minus);
            let f_minus = scalar_loss(graph, loss, &bindings)?;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((param, k, a, numeric));
            }
        }
        bindings.remove(&param);
    }
    // Leave the graph holding values for the unperturbed parameters.
    graph.eval()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut g = Graph::new();
        let w = g.parameter(Tensor::row(vec![0.3, -1.2, 2.0]));
        let sq = g.square(w);
        let loss = g.sum(sq);
        let err = grad_check(&mut g, loss, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn cos_linear_composite() {
        let mut g = Graph::new();
        let w = g.parameter(Tensor::matrix(2, 3, vec![0.1, -0.4, 0.7, 1.1, 0.2, -0.3]));
        let x = g.constant(Tensor::matrix(3, 2, vec![0.5, 1.0, -1.5, 0.3, 0.8, -0.2]));
        let b = g.parameter(Tensor::row(vec![0.2, -0.1]));
        let wx = g.matmul(w, x);
        let z = g.add(wx, b);
        let c = g.cos(z);
        let loss = g.sum(c);
        let err = grad_check(&mut g, loss, 1e-5).unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let mut g = Graph::new();
        let w = g.parameter(Tensor::scalar(1.0));
        let loss = g.square(w);
        assert_eq!(grad_check(&mut g, loss, 0.1), Err(GraphError::InvalidStep(0.1)));
        assert_eq!(grad_check(&mut g, loss, 0.0), Err(GraphError::InvalidStep(0.0)));
    }
}
