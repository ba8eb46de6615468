//! Finite-difference audit of every differentiable building block, ending
//! with the complete training objective of a toy model.

use rand::Rng;
use serde::Serialize;

use super::config::{ExperimentConfig, InferenceMode};
use super::model::{MetaModel, Pass};
use super::RunError;
use crate::autodiff::{grad_check_report, Graph, NodeId, Tensor};
use crate::nn::Scope;
use crate::rng::{seeded, ChaCha8Rng};
use crate::tasks::{Outputs, Task};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub entries: usize,
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

/// Entries bounded away from zero, with random signs.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape, 0.2, 1.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// Reduces any output to a scalar whose gradient differs per entry.
fn readout(g: &mut Graph, out: NodeId) -> NodeId {
    let s = g.scale(out, 1.3);
    let s = g.offset(s, 0.4);
    let w = g.sin(s);
    g.sum(w)
}

type Builder = fn(&mut Graph, &mut ChaCha8Rng) -> NodeId;

fn unary(g: &mut Graph, rng: &mut ChaCha8Rng, f: fn(&mut Graph, NodeId) -> NodeId, positive: bool) -> NodeId {
    let v = if positive {
        uniform(rng, &[2, 3], 0.5, 2.0)
    } else {
        off_zero(rng, &[2, 3])
    };
    let x = g.parameter(v);
    let y = f(g, x);
    readout(g, y)
}

fn pair(g: &mut Graph, rng: &mut ChaCha8Rng, a: &[usize], b: &[usize]) -> (NodeId, NodeId) {
    let x = g.parameter(off_zero(rng, a));
    let y = g.parameter(off_zero(rng, b));
    (x, y)
}

fn primitives() -> Vec<(&'static str, Builder)> {
    vec![
        ("neg", |g, r| unary(g, r, Graph::neg, false)),
        ("exp", |g, r| unary(g, r, Graph::exp, false)),
        ("log", |g, r| unary(g, r, Graph::log, true)),
        ("tanh", |g, r| unary(g, r, Graph::tanh, false)),
        ("sigmoid", |g, r| unary(g, r, Graph::sigmoid, false)),
        ("cos", |g, r| unary(g, r, Graph::cos, false)),
        ("sin", |g, r| unary(g, r, Graph::sin, false)),
        ("relu", |g, r| unary(g, r, Graph::relu, false)),
        ("elu", |g, r| unary(g, r, Graph::elu, false)),
        ("sqrt", |g, r| unary(g, r, Graph::sqrt, true)),
        ("abs", |g, r| unary(g, r, Graph::abs, false)),
        ("square", |g, r| unary(g, r, Graph::square, false)),
        ("scale", |g, r| unary(g, r, |g, x| g.scale(x, -2.5), false)),
        ("offset", |g, r| unary(g, r, |g, x| g.offset(x, 0.7), false)),
        ("clamp", |g, r| unary(g, r, |g, x| g.clamp(x, -0.5, 0.5), false)),
        ("softmax", |g, r| unary(g, r, Graph::softmax, false)),
        ("log_softmax", |g, r| unary(g, r, Graph::log_softmax, false)),
        ("transpose", |g, r| unary(g, r, Graph::transpose, false)),
        ("sum", |g, r| unary(g, r, Graph::sum, false)),
        ("mean", |g, r| unary(g, r, Graph::mean, false)),
        ("sum_axis", |g, r| unary(g, r, |g, x| g.sum_axis(x, 0), false)),
        ("mean_axis", |g, r| unary(g, r, |g, x| g.mean_axis(x, 1), false)),
        ("reshape", |g, r| unary(g, r, |g, x| g.reshape(x, &[3, 2]), false)),
        ("broadcast_to", |g, r| unary(g, r, |g, x| g.broadcast_to(x, &[4, 2, 3]), false)),
        ("slice", |g, r| unary(g, r, |g, x| g.slice(x, 1, 1, 3), false)),
        ("add", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[1, 3]);
            let z = g.add(x, y);
            readout(g, z)
        }),
        ("sub", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[2, 1]);
            let z = g.sub(x, y);
            readout(g, z)
        }),
        ("mul", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[2, 3]);
            let z = g.mul(x, y);
            readout(g, z)
        }),
        ("div", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[1, 3]);
            let z = g.div(x, y);
            readout(g, z)
        }),
        ("matmul", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[3, 4]);
            let z = g.matmul(x, y);
            readout(g, z)
        }),
        ("matmul_nt", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[4, 3]);
            let z = g.matmul_nt(x, y);
            readout(g, z)
        }),
        ("concat", |g, r| {
            let (x, y) = pair(g, r, &[2, 3], &[1, 3]);
            let z = g.concat(&[x, y], 0);
            readout(g, z)
        }),
        ("pairwise_l1", |g, r| {
            let (x, y) = pair(g, r, &[3, 2], &[2, 2]);
            let z = g.pairwise_l1(x, y);
            readout(g, z)
        }),
        ("solve", |g, r| {
            let mut a = uniform(r, &[3, 3], -0.5, 0.5);
            for i in 0..3 {
                a.set(i, i, a.at(i, i) + 3.0);
            }
            let a = g.parameter(a);
            let b = g.parameter(off_zero(r, &[3, 2]));
            let x = g.solve(a, b);
            readout(g, x)
        }),
        ("conv2d", |g, r| {
            let x = g.parameter(off_zero(r, &[1, 4, 4, 2]));
            let k = g.parameter(off_zero(r, &[3, 3, 2, 2]));
            let y = g.conv2d(x, k);
            readout(g, y)
        }),
        ("max_pool2", |g, r| {
            let x = g.parameter(uniform(r, &[1, 3, 3, 2], -1.0, 1.0));
            let y = g.max_pool2(x);
            readout(g, y)
        }),
    ]
}

fn check(name: &str, g: &mut Graph, loss: NodeId) -> Result<GradCheckEntry, RunError> {
    let report = grad_check_report(g, loss, STEP)?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        rel_error: report.max_rel_error,
        entries: report.entries,
        passed: report.max_rel_error <= GRADCHECK_TOLERANCE,
    })
}

/// The toy configuration of the full-objective check: 2-way 1-shot,
/// 3-dimensional features, 4 bases and a vanilla LSTM.
pub fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::blobs().with_blob_dim(2);
    cfg.ways = 2;
    cfg.shots = 1;
    cfg.queries = 2;
    cfg.bases = 4;
    cfg.mode = InferenceMode::Lstm;
    cfg.dims.embed = vec![2, 4, 3];
    cfg.dims.context_hidden = 3;
    cfg.dims.net_hidden = 4;
    cfg.dims.posterior_layers = 1;
    cfg.dims.prior_layers = 1;
    cfg
}

fn toy_task(rng: &mut ChaCha8Rng, seed: u64) -> Task {
    Task {
        support_x: uniform(rng, &[2, 2], -1.0, 1.0),
        query_x: uniform(rng, &[4, 2], -1.0, 1.0),
        outputs: Outputs::Classification {
            support: vec![0, 1],
            query: vec![0, 0, 1, 1],
        },
        ways: 2,
        shots: 1,
        seed,
        sine: None,
    }
}

/// Runs every check and returns one entry per building block.
pub fn gradcheck_suite() -> Result<Vec<GradCheckEntry>, RunError> {
    let mut rng = seeded(0x6772_6164);
    let mut out = Vec::new();
    for (name, build) in primitives() {
        let mut g = Graph::new();
        let loss = build(&mut g, &mut rng);
        out.push(check(name, &mut g, loss)?);
    }

    let mut model = MetaModel::new(&toy_config())?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let shape = model.store.get(id).shape().to_vec();
        *model.store.get_mut(id) = uniform(&mut rng, &shape, -0.6, 0.6);
    }
    let tasks = [toy_task(&mut rng, 1), toy_task(&mut rng, 2)];
    let state = model.initial_state().map(|mut s| {
        s.h = vec![0.1, -0.2, 0.3];
        s.c = vec![-0.1, 0.2, 0.05];
        s
    });
    let mut scope = Scope::new(&model.store);
    let nodes = model.record_batch(&mut scope, &tasks, state.as_ref(), Pass::Train)?;
    out.push(check("elbo", &mut scope.graph, nodes.loss)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_objective_has_kl_and_all_parameters() {
        let model = MetaModel::new(&toy_config()).unwrap();
        assert_eq!(model.feature_dim(), 3);
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        assert!(names.iter().any(|n| n.starts_with("context.forward")));
        assert!(!names.iter().any(|n| n.starts_with("context.backward")));
        assert!(names.iter().any(|n| n.starts_with("prior")));
        assert!(names.iter().any(|n| n.starts_with("posterior")));
    }
}
