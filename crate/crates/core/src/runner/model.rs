use super::config::{ExperimentConfig, InferenceMode, KernelKind};
use super::RunError;
use crate::autodiff::{NodeId, Tensor};
use crate::context::{ContextEncoder, ContextState, Direction};
use crate::embedding::{CnnEmbedder, Embedder, MlpEmbedder};
use crate::inference::{
    base_learner_node, class_mean_operator, elbo_node, reparameterize_node, ridge_head_node, standard_normal,
    BasisNodes, ObjectiveNodes, PosteriorNet, PriorNet, TaskNodes,
};
use crate::kernels::{mean_pairwise_bandwidth_node, rbf_node_with, sample_biases, ScaleMode, SpectralBasis};
use crate::nn::{ParamId, ParamStore, Scope};
use crate::rng::{derive_seed, seeded, ChaCha8Rng};
use crate::tasks::Task;

/// Sub-stream labels mixed into the run seed.
pub(crate) mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const TASKS: u64 = 3;
    pub const FIXED_BASIS: u64 = 4;
    pub const EVAL: u64 = 5;
    /// Per task: posterior noise and feature biases.
    pub const TASK_BASIS: u64 = 1;
    /// Per task: dropout masks.
    pub const TASK_DROPOUT: u64 = 2;
}

/// Fixed-RFF bases are drawn this many at a time unless the config asks
/// for a different count.
pub const FIXED_RFF_BASES: usize = 2048;

/// Whether a forward pass is part of training. Training passes apply
/// dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Train,
    Eval,
}

/// The meta-learner: embedder, context encoder, posterior and prior
/// networks and the ridge regularizer `λ = exp(ρ)`.
#[derive(Clone, Debug)]
pub struct MetaModel {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub embedder: Embedder,
    pub context: Option<ContextEncoder>,
    pub posterior: Option<PosteriorNet>,
    pub prior: Option<PriorNet>,
    pub rho: ParamId,
    pub fixed_basis: Option<SpectralBasis>,
}

/// Nodes recorded for one batch of tasks.
#[derive(Clone, Debug)]
pub struct BatchNodes {
    pub tasks: Vec<ObjectiveNodes>,
    /// Mean task loss.
    pub loss: NodeId,
    /// Final forward LSTM state, when a context encoder is present.
    pub state: Option<(NodeId, NodeId)>,
}

impl MetaModel {
    pub fn new(config: &ExperimentConfig) -> Result<Self, RunError> {
        config.validate()?;
        let mut rng = seeded(derive_seed(config.seed, &[stream::INIT]));
        let mut store = ParamStore::new();
        let dims = &config.dims;
        let embedder = if dims.embed.is_empty() {
            Embedder::Cnn(CnnEmbedder::new(
                &mut store,
                crate::tasks::IMAGE_SIDE,
                dims.conv_channels,
                dims.keep_prob,
                &mut rng,
            ))
        } else {
            Embedder::Mlp(MlpEmbedder::new(&mut store, &dims.embed, &mut rng))
        };
        let d = embedder.output_dim();
        let rho = store.add("lambda.rho", Tensor::scalar(0.0));
        let (mut context, mut posterior, mut prior, mut fixed_basis) = (None, None, None, None);
        match config.kernel {
            KernelKind::MetaVrf => {
                let direction = match config.mode {
                    InferenceMode::None => None,
                    InferenceMode::Lstm => Some(Direction::Vanilla),
                    InferenceMode::Bilstm => Some(Direction::Bidirectional),
                };
                let enc = direction.map(|dir| ContextEncoder::new(&mut store, dir, d, dims.context_hidden, &mut rng));
                let post_in = enc.as_ref().map_or(d, ContextEncoder::output_dim);
                posterior = Some(PosteriorNet::new(
                    &mut store,
                    post_in,
                    dims.net_hidden,
                    dims.posterior_layers,
                    d,
                    &mut rng,
                ));
                prior = Some(PriorNet::new(&mut store, d, dims.net_hidden, dims.prior_layers, &mut rng));
                context = enc;
            }
            KernelKind::FixedRff => {
                fixed_basis = Some(fixed_rff_basis(config.seed, config.bases, d, config.scale_mode));
            }
            KernelKind::ExactRbf => {}
        }
        Ok(Self {
            config: config.clone(),
            store,
            embedder,
            context,
            posterior,
            prior,
            rho,
            fixed_basis,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.embedder.output_dim()
    }

    /// The context state before any task has been seen.
    pub fn initial_state(&self) -> Option<ContextState> {
        self.context.as_ref().map(ContextEncoder::initial_state)
    }

    /// Records the objective of every task in `tasks`, consumed in order by
    /// the context encoder starting from `state`.
    pub fn record_batch(
        &self,
        scope: &mut Scope,
        tasks: &[Task],
        state: Option<&ContextState>,
        pass: Pass,
    ) -> Result<BatchNodes, RunError> {
        if tasks.is_empty() {
            return Err(RunError::InvalidConfig("empty batch".into()));
        }
        let mut embedded = Vec::with_capacity(tasks.len());
        for task in tasks {
            embedded.push(self.embed_task(scope, task, pass)?);
        }
        let contexts = self.contexts(scope, &embedded, state)?;
        let rho = scope.param(self.rho);
        let lambda = scope.graph.exp(rho);
        let mut objectives = Vec::with_capacity(tasks.len());
        for (i, task) in tasks.iter().enumerate() {
            let (support, query) = embedded[i];
            let h = contexts.outputs.get(i).copied();
            objectives.push(self.task_objective(scope, task, support, query, h, lambda)?);
        }
        let g = &mut scope.graph;
        let mut total = objectives[0].loss;
        for o in &objectives[1..] {
            total = g.add(total, o.loss);
        }
        let loss = g.scale(total, 1.0 / objectives.len() as f64);
        Ok(BatchNodes {
            tasks: objectives,
            loss,
            state: contexts.state,
        })
    }

    fn embed_task(&self, scope: &mut Scope, task: &Task, pass: Pass) -> Result<(NodeId, NodeId), RunError> {
        let (ns, nm) = (task.support_count(), task.query_count());
        let cols = task.support_x.cols();
        let mut data = task.support_x.data().to_vec();
        data.extend_from_slice(task.query_x.data());
        let x = Tensor::matrix(ns + nm, cols, data);
        let mut drng = seeded(derive_seed(task.seed, &[stream::TASK_DROPOUT]));
        let dropout = (pass == Pass::Train).then_some(&mut drng);
        let e = self.embedder.forward(scope, &x, dropout)?;
        let support = scope.graph.slice(e, 0, 0, ns);
        let query = scope.graph.slice(e, 0, ns, ns + nm);
        Ok((support, query))
    }

    fn contexts(
        &self,
        scope: &mut Scope,
        embedded: &[(NodeId, NodeId)],
        state: Option<&ContextState>,
    ) -> Result<Contexts, RunError> {
        if self.posterior.is_none() {
            return Ok(Contexts {
                outputs: Vec::new(),
                state: None,
            });
        }
        let pooled: Vec<NodeId> = embedded
            .iter()
            .map(|&(s, _)| scope.graph.mean_axis(s, 0))
            .collect();
        let Some(enc) = &self.context else {
            return Ok(Contexts {
                outputs: pooled,
                state: None,
            });
        };
        let fresh;
        let initial = match state {
            Some(s) => {
                if s.h.len() != enc.hidden() || s.c.len() != enc.hidden() {
                    return Err(RunError::Checkpoint(format!(
                        "context state width {} does not match encoder width {}",
                        s.h.len(),
                        enc.hidden()
                    )));
                }
                s
            }
            None => {
                fresh = enc.initial_state();
                &fresh
            }
        };
        let seq = enc.sequence_nodes(scope, &pooled, initial);
        Ok(Contexts {
            outputs: seq.outputs,
            state: Some((seq.final_h, seq.final_c)),
        })
    }

    fn task_objective(
        &self,
        scope: &mut Scope,
        task: &Task,
        support: NodeId,
        query: NodeId,
        context: Option<NodeId>,
        lambda: NodeId,
    ) -> Result<ObjectiveNodes, RunError> {
        let targets = task.targets();
        let ns = task.support_count();
        let d = self.feature_dim();
        let big_d = self.config.bases;
        let scale = self.config.scale_mode.factor(big_d);
        match self.config.kernel {
            KernelKind::MetaVrf => {
                let posterior = self.posterior.as_ref().expect("meta-vrf model has a posterior");
                let prior = self.prior.as_ref().expect("meta-vrf model has a prior");
                let h = context.expect("one context per task");
                let q = posterior.forward(scope, h);
                let mut brng = task_basis_rng(task.seed);
                let eps = scope.constant(standard_normal(big_d, d, &mut brng));
                let biases = scope.constant(Tensor::row(sample_biases(big_d, &mut brng)));
                let frequencies = reparameterize_node(&mut scope.graph, q, eps);
                let keys = match task.support_labels() {
                    Some(labels) => {
                        let op = scope.constant(class_mean_operator(labels, task.ways));
                        scope.graph.matmul(op, support)
                    }
                    None => support,
                };
                let nodes = TaskNodes {
                    support,
                    query,
                    keys,
                    targets: &targets,
                };
                let basis = BasisNodes {
                    frequencies,
                    biases,
                    scale,
                    count: big_d,
                };
                Ok(elbo_node(scope, &nodes, q, prior, basis, lambda, ns))
            }
            KernelKind::FixedRff => {
                let fixed = self.fixed_basis.as_ref().expect("fixed-rff model has a basis");
                let frequencies = scope.constant(fixed.frequencies.clone());
                let biases = scope.constant(fixed.bias_row());
                let nodes = TaskNodes {
                    support,
                    query,
                    keys: support,
                    targets: &targets,
                };
                let basis = BasisNodes {
                    frequencies,
                    biases,
                    scale: fixed.scale_mode.factor(fixed.count()),
                    count: fixed.count(),
                };
                let (data, prediction) = base_learner_node(&mut scope.graph, &nodes, basis, lambda, ns);
                Ok(ObjectiveNodes {
                    loss: data,
                    data,
                    kl: None,
                    prediction,
                })
            }
            KernelKind::ExactRbf => {
                let g = &mut scope.graph;
                let bw = mean_pairwise_bandwidth_node(g, support, ns);
                let k = rbf_node_with(g, support, support, bw);
                let kc = rbf_node_with(g, support, query, bw);
                let (data, prediction) = ridge_head_node(g, k, kc, &targets, lambda, ns);
                Ok(ObjectiveNodes {
                    loss: data,
                    data,
                    kl: None,
                    prediction,
                })
            }
        }
    }
}

struct Contexts {
    outputs: Vec<NodeId>,
    state: Option<(NodeId, NodeId)>,
}

/// The stream that supplies a task's posterior noise and feature biases.
pub fn task_basis_rng(task_seed: u64) -> ChaCha8Rng {
    seeded(derive_seed(task_seed, &[stream::TASK_BASIS]))
}

/// Draws `count` Gaussian frequencies in `dim` dimensions the way the
/// fixed-RFF baseline does for a given run seed.
pub fn fixed_rff_basis(seed: u64, count: usize, dim: usize, mode: ScaleMode) -> SpectralBasis {
    let mut rng = seeded(derive_seed(seed, &[stream::FIXED_BASIS]));
    SpectralBasis::sample_gaussian(count, dim, 1.0, mode, &mut rng).expect("positive count and dimension")
}
