//! Variational posterior and conditional prior over the spectral frequencies.
//!
//! Both distributions are diagonal Gaussians over a single frequency vector
//! of the embedding's dimension. The posterior is produced from a context
//! vector. The prior is produced per query point from an attention summary
//! of the support set. A task's frequencies are `D` reparameterised draws
//! from the posterior, and the training objective adds the data loss of the
//! ridge base-learner to the averaged divergence between the two.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::kernels::{feature_map_node, gram_node};
use crate::nn::{Activation, Linear, Mlp, ParamStore, Scope};
use crate::ridge::{fit_node, mse_node, predict_node, softmax_xent_node};

/// Bounds applied to predicted log-variances before exponentiation.
pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("{op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("attention needs at least one key")]
    NoKeys,
}

fn mismatch(op: &'static str, expected: impl ToString, actual: impl ToString) -> InferenceError {
    InferenceError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    /// Log-variance per coordinate.
    pub log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Mean and log-variance nodes with one row per distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GaussianNode {
    pub mu: NodeId,
    pub log_var: NodeId,
}

impl GaussianNode {
    /// Reads row `row` of an evaluated node pair.
    pub fn read(&self, g: &Graph, row: usize) -> GaussianPosterior {
        let mu = g.value(self.mu).expect("evaluated");
        let lv = g.value(self.log_var).expect("evaluated");
        GaussianPosterior {
            mu: mu.row_slice(row).to_vec(),
            log_var: lv.row_slice(row).to_vec(),
        }
    }
}

fn split_head(g: &mut Graph, out: NodeId, dim: usize) -> GaussianNode {
    let mu = g.slice(out, 1, 0, dim);
    let raw = g.slice(out, 1, dim, 2 * dim);
    let log_var = g.clamp(raw, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
    GaussianNode { mu, log_var }
}

/// ELU hidden layers followed by a linear projection to `[μ, log σ²]`.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub body: Option<Mlp>,
    pub head: Linear,
    pub dim: usize,
}

impl GaussianHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let body = (layers > 0).then(|| {
            let mut widths = vec![input];
            widths.extend(std::iter::repeat(hidden).take(layers));
            Mlp::new(store, name, &widths, Activation::Elu, Activation::Elu, rng)
        });
        let head_in = if layers > 0 { hidden } else { input };
        let head = Linear::new(store, &format!("{name}.head"), head_in, 2 * dim, rng);
        Self { body, head, dim }
    }

    pub fn input_dim(&self) -> usize {
        self.body.as_ref().map_or(self.head.input, Mlp::input_dim)
    }

    pub fn forward(&self, scope: &mut Scope, x: NodeId) -> GaussianNode {
        let h = match &self.body {
            Some(mlp) => mlp.forward(scope, x),
            None => x,
        };
        let out = self.head.forward(scope, h);
        split_head(&mut scope.graph, out, self.dim)
    }
}

/// `q(ω | h)`: a Gaussian over frequencies from a context row vector.
#[derive(Clone, Debug)]
pub struct PosteriorNet(pub GaussianHead);

impl PosteriorNet {
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        layers: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self(GaussianHead::new(store, "posterior", input, hidden, layers, dim, rng))
    }

    pub fn forward(&self, scope: &mut Scope, h: NodeId) -> GaussianNode {
        self.0.forward(scope, h)
    }

    /// Evaluates the posterior for a single context vector.
    pub fn posterior(&self, store: &ParamStore, h: &[f64]) -> Result<GaussianPosterior, InferenceError> {
        if h.len() != self.0.input_dim() {
            return Err(mismatch("posterior", self.0.input_dim(), h.len()));
        }
        let mut scope = Scope::frozen(store);
        let x = scope.constant(Tensor::row(h.to_vec()));
        let q = self.forward(&mut scope, x);
        scope.graph.eval().expect("shapes checked above");
        Ok(q.read(&scope.graph, 0))
    }
}

/// `p(ω | x, S)`: attention over support keys, then a Gaussian head.
#[derive(Clone, Debug)]
pub struct PriorNet(pub GaussianHead);

impl PriorNet {
    pub fn new(store: &mut ParamStore, dim: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        Self(GaussianHead::new(store, "prior", dim, hidden, layers, dim, rng))
    }

    /// One prior per row of `queries`, attending over rows of `keys`.
    pub fn forward(&self, scope: &mut Scope, queries: NodeId, keys: NodeId) -> GaussianNode {
        let summary = laplace_attention_node(&mut scope.graph, queries, keys, keys);
        self.0.forward(scope, summary)
    }

    pub fn prior(
        &self,
        store: &ParamStore,
        query: &[f64],
        class_means: &Tensor,
    ) -> Result<GaussianPosterior, InferenceError> {
        check_attention(query, class_means, class_means)?;
        if query.len() != self.0.input_dim() {
            return Err(mismatch("prior", self.0.input_dim(), query.len()));
        }
        let mut scope = Scope::frozen(store);
        let q = scope.constant(Tensor::row(query.to_vec()));
        let k = scope.constant(class_means.clone());
        let p = self.forward(&mut scope, q, k);
        scope.graph.eval().expect("shapes checked above");
        Ok(p.read(&scope.graph, 0))
    }
}

fn check_attention(query: &[f64], keys: &Tensor, values: &Tensor) -> Result<(), InferenceError> {
    if keys.rank() != 2 || keys.rows() == 0 {
        return Err(InferenceError::NoKeys);
    }
    if keys.cols() != query.len() {
        return Err(mismatch("laplace_attention", format!("keys of width {}", query.len()), keys.cols()));
    }
    if values.rank() != 2 || values.rows() != keys.rows() {
        return Err(mismatch("laplace_attention", format!("{} value rows", keys.rows()), format!("{:?}", values.shape())));
    }
    Ok(())
}

/// Attention weights `softmax_j(-‖q - k_j‖₁)` and the weighted sum of values.
pub fn laplace_attention(query: &[f64], keys: &Tensor, values: &Tensor) -> Result<(Vec<f64>, Vec<f64>), InferenceError> {
    check_attention(query, keys, values)?;
    let mut g = Graph::new();
    let q = g.constant(Tensor::row(query.to_vec()));
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let w = laplace_weights_node(&mut g, q, k);
    let out = g.matmul(w, v);
    g.eval().expect("shapes checked above");
    Ok((g.value(w).unwrap().data().to_vec(), g.value(out).unwrap().data().to_vec()))
}

/// `m × C` attention weights for `m × d` queries and `C × d` keys.
pub fn laplace_weights_node(g: &mut Graph, queries: NodeId, keys: NodeId) -> NodeId {
    let l1 = g.pairwise_l1(queries, keys);
    let neg = g.neg(l1);
    g.softmax(neg)
}

pub fn laplace_attention_node(g: &mut Graph, queries: NodeId, keys: NodeId, values: NodeId) -> NodeId {
    let w = laplace_weights_node(g, queries, keys);
    g.matmul(w, values)
}

/// `count` frequency rows `μ + σ ⊙ ε`. A log-variance of `-∞` gives `σ = 0`.
pub fn reparameterize(post: &GaussianPosterior, count: usize, rng: &mut impl Rng) -> Tensor {
    let eps = standard_normal(count, post.dim(), rng);
    let sigma = post.sigma();
    let mut out = eps;
    for l in 0..count {
        for j in 0..post.dim() {
            let e = out.at(l, j);
            out.set(l, j, post.mu[j] + if sigma[j] == 0.0 { 0.0 } else { sigma[j] * e });
        }
    }
    out
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Records `μ + exp(log σ² / 2) ⊙ ε` for a `1 × d` Gaussian and `D × d` noise.
pub fn reparameterize_node(g: &mut Graph, q: GaussianNode, eps: NodeId) -> NodeId {
    let half = g.scale(q.log_var, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps);
    g.add(q.mu, noise)
}

pub fn kl_diag_gaussians(q: &GaussianPosterior, p: &GaussianPosterior) -> Result<f64, InferenceError> {
    if q.dim() != p.dim() {
        return Err(mismatch("kl_diag_gaussians", q.dim(), p.dim()));
    }
    let mut total = 0.0;
    for j in 0..q.dim() {
        let (mq, lq, mp, lp) = (q.mu[j], q.log_var[j], p.mu[j], p.log_var[j]);
        total += 0.5 * (lp - lq) + (lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5;
    }
    Ok(total.max(0.0))
}

/// Row-wise divergence `KL(q ‖ p_i)` summed over coordinates and averaged
/// over the rows of `p`. `q` may hold one row that broadcasts.
pub fn kl_node(g: &mut Graph, q: GaussianNode, p: GaussianNode) -> NodeId {
    let dlv = g.sub(p.log_var, q.log_var);
    let log_term = g.scale(dlv, 0.5);
    let var_q = g.exp(q.log_var);
    let dmu = g.sub(q.mu, p.mu);
    let dmu2 = g.square(dmu);
    let num = g.add(var_q, dmu2);
    let neg_lp = g.neg(p.log_var);
    let inv_var_p = g.exp(neg_lp);
    let ratio = g.mul(num, inv_var_p);
    let ratio = g.scale(ratio, 0.5);
    let per = g.add(log_term, ratio);
    let per = g.offset(per, -0.5);
    let rows = g.sum_axis(per, 1);
    g.mean(rows)
}

/// What the base-learner is asked to predict.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `1 × n` support and `1 × m` query values.
    Regression { support: Tensor, query: Tensor },
    /// One-hot `C × n` support and `C × m` query indicators.
    Classification { support: Tensor, query: Tensor },
}

impl Targets {
    pub fn support(&self) -> &Tensor {
        match self {
            Targets::Regression { support, .. } | Targets::Classification { support, .. } => support,
        }
    }

    pub fn query(&self) -> &Tensor {
        match self {
            Targets::Regression { query, .. } | Targets::Classification { query, .. } => query,
        }
    }
}

/// Graph nodes describing one task's embedded data.
#[derive(Clone, Debug)]
pub struct TaskNodes<'t> {
    /// `n × d` support embeddings.
    pub support: NodeId,
    /// `m × d` query embeddings.
    pub query: NodeId,
    /// `K × d` attention keys for the prior.
    pub keys: NodeId,
    pub targets: &'t Targets,
}

/// Frequencies and phases of one task's basis, already on the graph.
#[derive(Clone, Copy, Debug)]
pub struct BasisNodes {
    /// `D × d` frequencies.
    pub frequencies: NodeId,
    /// `1 × D` phases.
    pub biases: NodeId,
    pub scale: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveNodes {
    pub loss: NodeId,
    pub data: NodeId,
    /// Absent when no prior is used.
    pub kl: Option<NodeId>,
    /// `C_out × m` query predictions.
    pub prediction: NodeId,
}

/// Ridge base-learner on random features followed by the task loss.
pub fn base_learner_node(
    g: &mut Graph,
    task: &TaskNodes,
    basis: BasisNodes,
    lambda: NodeId,
    support_count: usize,
) -> (NodeId, NodeId) {
    let zs = feature_map_node(g, basis.frequencies, basis.biases, task.support, basis.scale);
    let zq = feature_map_node(g, basis.frequencies, basis.biases, task.query, basis.scale);
    let k = gram_node(g, zs, zs);
    let kc = gram_node(g, zs, zq);
    ridge_head_node(g, k, kc, task.targets, lambda, support_count)
}

/// Fits ridge coefficients on a support kernel `k` (`n × n`), predicts the
/// queries through the cross kernel `k_cross` (`n × m`) and scores them.
/// Returns `(data loss, predictions)`.
pub fn ridge_head_node(
    g: &mut Graph,
    k: NodeId,
    k_cross: NodeId,
    targets: &Targets,
    lambda: NodeId,
    support_count: usize,
) -> (NodeId, NodeId) {
    let ys = g.constant(targets.support().clone());
    let alpha = fit_node(g, k, ys, lambda, support_count);
    let pred = predict_node(g, alpha, k_cross);
    let yq = g.constant(targets.query().clone());
    let data = match targets {
        Targets::Regression { .. } => mse_node(g, pred, yq),
        Targets::Classification { .. } => softmax_xent_node(g, pred, yq),
    };
    (data, pred)
}

/// Negative evidence lower bound for one task: data loss of the base-learner
/// plus the query-averaged `KL(q ‖ p(· | x, S))`.
pub fn elbo_node(
    scope: &mut Scope,
    task: &TaskNodes,
    posterior: GaussianNode,
    prior: &PriorNet,
    basis: BasisNodes,
    lambda: NodeId,
    support_count: usize,
) -> ObjectiveNodes {
    let (data, prediction) = base_learner_node(&mut scope.graph, task, basis, lambda, support_count);
    let p = prior.forward(scope, task.query, task.keys);
    let kl = kl_node(&mut scope.graph, posterior, p);
    let loss = scope.graph.add(data, kl);
    ObjectiveNodes {
        loss,
        data,
        kl: Some(kl),
        prediction,
    }
}

/// `C × n` matrix whose product with support rows gives per-class means.
pub fn class_mean_operator(labels: &[usize], classes: usize) -> Tensor {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        counts[l] += 1;
    }
    let mut op = Tensor::zeros(&[classes, labels.len()]);
    for (j, &l) in labels.iter().enumerate() {
        op.set(l, j, 1.0 / counts[l] as f64);
    }
    op
}
