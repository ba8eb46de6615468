//! Kernel ridge regression in dual form.
//!
//! Fitting solves `α (λI + K) = Y` for the dual coefficients `α`, and query
//! predictions are `α K̃` where `K̃` holds support-by-query kernel values.
//! The `*_node` functions record the same computations on a [`Graph`] so
//! gradients flow through the solve into `K`, `Y` and `λ`.

use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId, Tensor};
use crate::kernels::KernelMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RidgeError {
    #[error("{op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("λI + K is singular at λ = {0}; use a positive regulariser")]
    Singular(f64),
    #[error("regulariser must be non-negative and finite, got {0}")]
    InvalidLambda(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

fn mismatch(op: &'static str, expected: impl ToString, actual: impl ToString) -> RidgeError {
    RidgeError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelEncoding {
    RealTargets,
    OneHot,
}

/// Targets laid out as `C_out × n`, one column per support point.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub values: Tensor,
    pub encoding: LabelEncoding,
}

impl LabelMatrix {
    /// A single real-valued output per point.
    pub fn real(targets: &[f64]) -> Self {
        Self {
            values: Tensor::row(targets.to_vec()),
            encoding: LabelEncoding::RealTargets,
        }
    }

    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self, RidgeError> {
        Ok(Self {
            values: one_hot_columns(labels, classes)?,
            encoding: LabelEncoding::OneHot,
        })
    }

    pub fn outputs(&self) -> usize {
        self.values.rows()
    }

    pub fn points(&self) -> usize {
        self.values.cols()
    }
}

/// `classes × labels.len()` indicator matrix.
pub fn one_hot_columns(labels: &[usize], classes: usize) -> Result<Tensor, RidgeError> {
    let mut t = Tensor::zeros(&[classes, labels.len()]);
    for (j, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(RidgeError::LabelOutOfRange { label, classes });
        }
        t.set(label, j, 1.0);
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeSolution {
    /// `C_out × n` dual coefficients.
    pub alpha: Tensor,
    pub lambda: f64,
}

pub fn fit(k: &KernelMatrix, y: &LabelMatrix, lambda: f64) -> Result<RidgeSolution, RidgeError> {
    let n = k.left_count();
    if k.right_count() != n {
        return Err(mismatch("fit", "a square kernel matrix", format!("{n} × {}", k.right_count())));
    }
    if y.points() != n {
        return Err(mismatch("fit", format!("{n} label columns"), y.points()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(RidgeError::InvalidLambda(lambda));
    }
    let mut g = Graph::new();
    let kn = g.constant(k.values.clone());
    let yn = g.constant(y.values.clone());
    let ln = g.scalar(lambda);
    let alpha = fit_node(&mut g, kn, yn, ln, n);
    match g.eval() {
        Ok(()) => Ok(RidgeSolution {
            alpha: g.value(alpha).expect("evaluated").clone(),
            lambda,
        }),
        Err(GraphError::SingularMatrix { .. }) => Err(RidgeError::Singular(lambda)),
        Err(e) => unreachable!("shapes were validated: {e}"),
    }
}

/// Records `α = Y (λI + K)⁻¹` for an `n × n` kernel node, a `C × n` label
/// node and a scalar `λ` node.
pub fn fit_node(g: &mut Graph, k: NodeId, y: NodeId, lambda: NodeId, n: usize) -> NodeId {
    let eye = g.constant(Tensor::identity(n));
    let reg = g.mul(eye, lambda);
    let a = g.add(k, reg);
    let at = g.transpose(a);
    let yt = g.transpose(y);
    let xt = g.solve(at, yt);
    g.transpose(xt)
}

pub fn predict(sol: &RidgeSolution, k_cross: &KernelMatrix) -> Result<Tensor, RidgeError> {
    if k_cross.left_count() != sol.alpha.cols() {
        return Err(mismatch("predict", format!("{} kernel rows", sol.alpha.cols()), k_cross.left_count()));
    }
    Ok(sol.alpha.matmul(&k_cross.values))
}

pub fn predict_node(g: &mut Graph, alpha: NodeId, k_cross: NodeId) -> NodeId {
    g.matmul(alpha, k_cross)
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64, RidgeError> {
    if pred.shape() != target.shape() {
        return Err(mismatch("mse_loss", format!("{:?}", target.shape()), format!("{:?}", pred.shape())));
    }
    let n = pred.numel().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n)
}

pub fn mse_node(g: &mut Graph, pred: NodeId, target: NodeId) -> NodeId {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

/// Mean negative log-probability of `labels` under softmax over the rows
/// of each column of the `C × m` logit matrix.
pub fn softmax_xent_loss(logits: &Tensor, labels: &[usize]) -> Result<f64, RidgeError> {
    if logits.rank() != 2 || logits.cols() != labels.len() {
        return Err(mismatch("softmax_xent_loss", format!("C × {}", labels.len()), format!("{:?}", logits.shape())));
    }
    let onehot = one_hot_columns(labels, logits.rows())?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let y = g.constant(onehot);
    let loss = softmax_xent_node(&mut g, l, y);
    g.eval().expect("shapes checked above");
    Ok(g.value(loss).expect("evaluated").item())
}

/// Cross-entropy for `C × m` logits against a `C × m` one-hot node.
pub fn softmax_xent_node(g: &mut Graph, logits: NodeId, onehot: NodeId) -> NodeId {
    let lt = g.transpose(logits);
    let lp = g.log_softmax(lt);
    let yt = g.transpose(onehot);
    let picked = g.mul(lp, yt);
    let per_query = g.sum_axis(picked, 1);
    let m = g.mean(per_query);
    g.neg(m)
}

/// Fraction of columns whose largest logit sits at the true label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = (0..logits.cols())
        .filter(|&j| {
            let best = (0..logits.rows())
                .max_by(|&a, &b| logits.at(a, j).total_cmp(&logits.at(b, j)))
                .unwrap_or(0);
            best == labels[j]
        })
        .count();
    correct as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data)
    }

    fn spd(n: usize, seed: u64) -> Tensor {
        let a = random_matrix(n, n, seed);
        let mut k = a.matmul(&a.transpose());
        for i in 0..n {
            k.set(i, i, k.at(i, i) + 0.5);
        }
        k
    }

    fn km(t: Tensor) -> KernelMatrix {
        KernelMatrix { values: t }
    }

    #[test]
    fn identity_kernel() {
        let y = LabelMatrix::real(&[1.0, -2.0, 0.5]);
        let sol = fit(&km(Tensor::identity(3)), &y, 0.0).unwrap();
        assert!(sol.alpha.max_abs_diff(&y.values) < 1e-15);
        let sol = fit(&km(Tensor::identity(3)), &y, 1.0).unwrap();
        assert!(sol.alpha.max_abs_diff(&y.values.map(|v| v / 2.0)) < 1e-15);
    }

    #[test]
    fn residual_is_small() {
        let k = spd(8, 1);
        let y = LabelMatrix { values: random_matrix(3, 8, 2), encoding: LabelEncoding::RealTargets };
        let lambda = 0.3;
        let sol = fit(&km(k.clone()), &y, lambda).unwrap();
        let mut a = k;
        for i in 0..8 {
            a.set(i, i, a.at(i, i) + lambda);
        }
        assert!(sol.alpha.matmul(&a).max_abs_diff(&y.values) <= 1e-10);
    }

    #[test]
    fn singular_at_zero_lambda() {
        let k = km(Tensor::ones(&[3, 3]));
        let y = LabelMatrix::real(&[1.0, 2.0, 3.0]);
        assert_eq!(fit(&k, &y, 0.0), Err(RidgeError::Singular(0.0)));
        assert!(fit(&k, &y, 0.1).is_ok());
        assert_eq!(fit(&k, &y, -1.0), Err(RidgeError::InvalidLambda(-1.0)));
    }

    #[test]
    fn predict_examples() {
        let y = LabelMatrix::real(&[4.0, 5.0, 6.0]);
        let sol = fit(&km(Tensor::identity(3)), &y, 0.0).unwrap();
        let col = km(Tensor::column(vec![0.0, 1.0, 0.0]));
        assert_eq!(predict(&sol, &col).unwrap().item(), 5.0);
        let zero = RidgeSolution { alpha: Tensor::zeros(&[2, 3]), lambda: 1.0 };
        assert!(predict(&zero, &km(random_matrix(3, 4, 3))).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(predict(&zero, &km(random_matrix(2, 4, 3))).is_err());
    }

    #[test]
    fn separated_one_shot_task_is_classified() {
        // Each class occupies its own feature axis, so the cross kernel is
        // close to diagonal and the dual solution recovers the labels.
        let ways = 5;
        let support = Tensor::identity(ways);
        let mut query = Tensor::identity(ways).map(|v| 0.9 * v);
        for v in query.data_mut() {
            *v += 0.02;
        }
        let y = LabelMatrix::one_hot(&[0, 1, 2, 3, 4], ways).unwrap();
        let sol = fit(&km(support.matmul(&support.transpose())), &y, 0.1).unwrap();
        let logits = predict(&sol, &km(support.matmul(&query.transpose()))).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 2, 3, 4]), 1.0);
    }

    #[test]
    fn mse_examples() {
        let a = random_matrix(3, 4, 4);
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        let b = random_matrix(3, 4, 5);
        let mut sum = 0.0;
        for i in 0..3 {
            for j in 0..4 {
                sum += (a.at(i, j) - b.at(i, j)) * (a.at(i, j) - b.at(i, j));
            }
        }
        assert!((mse_loss(&a, &b).unwrap() - sum / 12.0).abs() <= 1e-12);
        assert!(mse_loss(&a, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn xent_examples() {
        let uniform = Tensor::zeros(&[5, 3]);
        assert!((softmax_xent_loss(&uniform, &[0, 2, 4]).unwrap() - 5f64.ln()).abs() < 1e-12);
        let mut confident = Tensor::zeros(&[5, 1]);
        confident.set(3, 0, 50.0);
        assert!(softmax_xent_loss(&confident, &[3]).unwrap() <= 1e-8);
        assert_eq!(
            softmax_xent_loss(&uniform, &[0, 5, 1]),
            Err(RidgeError::LabelOutOfRange { label: 5, classes: 5 })
        );
    }

    #[test]
    fn xent_matches_explicit_loop() {
        let logits = random_matrix(4, 6, 6).map(|v| 3.0 * v);
        let labels = [0, 3, 1, 2, 2, 0];
        let mut total = 0.0;
        for (j, &label) in labels.iter().enumerate() {
            let exps: Vec<f64> = (0..4).map(|c| logits.at(c, j).exp()).collect();
            let z: f64 = exps.iter().sum();
            total += -(exps[label] / z).ln();
        }
        assert!((softmax_xent_loss(&logits, &labels).unwrap() - total / 6.0).abs() <= 1e-10);
    }

    #[test]
    fn gradients_through_the_solve() {
        let mut g = Graph::new();
        let x = g.parameter(random_matrix(5, 3, 7));
        let xt = g.transpose(x);
        let k = g.matmul(x, xt);
        let y = g.parameter(random_matrix(2, 5, 8));
        let rho = g.parameter(Tensor::scalar(-0.5));
        let lambda = g.exp(rho);
        let alpha = fit_node(&mut g, k, y, lambda, 5);
        let q = g.constant(random_matrix(4, 3, 9));
        let qt = g.transpose(q);
        let kc = g.matmul(x, qt);
        let pred = predict_node(&mut g, alpha, kc);
        let target = g.constant(random_matrix(2, 4, 10));
        let loss = mse_node(&mut g, pred, target);
        assert!(grad_check(&mut g, loss, 1e-6).unwrap() <= 1e-4);
    }
}
