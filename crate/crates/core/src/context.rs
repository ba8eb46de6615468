//! Recurrent context over the stream of tasks.
//!
//! Each task is summarised by the mean of its support embeddings, and an
//! LSTM consumes these summaries in order. The forward state is carried from
//! one meta-batch to the next (detached at the boundary), so the cell state
//! accumulates information from every task seen during training. A
//! bidirectional encoder additionally runs a backward LSTM over the tasks
//! of the current batch, starting from zeros each time.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{NodeId, Tensor};
use crate::nn::{truncated_normal, ParamId, ParamStore, Scope, INIT_STD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContextError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("task sequence is empty")]
    EmptySequence,
    #[error("{what}: expected width {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Vanilla,
    Bidirectional,
}

/// Forward-direction recurrent state. The backward direction of a
/// bidirectional encoder holds no state between batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextState {
    pub direction: Direction,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl ContextState {
    pub fn zeros(direction: Direction, hidden: usize) -> Self {
        Self {
            direction,
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }

    pub fn hidden(&self) -> usize {
        self.h.len()
    }
}

/// Mean of the support rows.
pub fn pool_support(support: &Tensor) -> Result<Vec<f64>, ContextError> {
    if support.rank() != 2 || support.rows() == 0 {
        return Err(ContextError::EmptySupport);
    }
    let n = support.rows() as f64;
    let mut out = vec![0.0; support.cols()];
    for r in 0..support.rows() {
        for (o, v) in out.iter_mut().zip(support.row_slice(r)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// One LSTM layer with fused gate weights, gate blocks ordered
/// input, forget, output, candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    /// `(input + hidden) × 4·hidden`.
    pub weight: ParamId,
    /// `1 × 4·hidden`.
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            truncated_normal(rng, &[input + hidden, 4 * hidden], INIT_STD),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, 4 * hidden]));
        Self {
            weight,
            bias,
            input,
            hidden,
        }
    }

    /// Records one step for `1 × input` `x` and `1 × hidden` state nodes.
    pub fn step_node(&self, scope: &mut Scope, x: NodeId, h: NodeId, c: NodeId) -> (NodeId, NodeId) {
        let w = scope.param(self.weight);
        let b = scope.param(self.bias);
        let g = &mut scope.graph;
        let xh = g.concat(&[x, h], 1);
        let pre = g.matmul(xh, w);
        let pre = g.add(pre, b);
        let n = self.hidden;
        let i = g.slice(pre, 1, 0, n);
        let f = g.slice(pre, 1, n, 2 * n);
        let o = g.slice(pre, 1, 2 * n, 3 * n);
        let cand = g.slice(pre, 1, 3 * n, 4 * n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let o = g.sigmoid(o);
        let cand = g.tanh(cand);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        (h_next, c_next)
    }
}

/// One step of `cell` outside any training graph.
pub fn lstm_cell(
    store: &ParamStore,
    cell: &LstmCell,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), ContextError> {
    check(cell, x, h, c)?;
    let mut scope = Scope::frozen(store);
    let xn = scope.constant(Tensor::row(x.to_vec()));
    let hn = scope.constant(Tensor::row(h.to_vec()));
    let cn = scope.constant(Tensor::row(c.to_vec()));
    let (h2, c2) = cell.step_node(&mut scope, xn, hn, cn);
    scope.graph.eval().expect("shapes checked above");
    let g = &scope.graph;
    Ok((g.value(h2).unwrap().data().to_vec(), g.value(c2).unwrap().data().to_vec()))
}

fn check(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> Result<(), ContextError> {
    let dm = |what, expected, actual| ContextError::DimensionMismatch { what, expected, actual };
    if x.len() != cell.input {
        return Err(dm("lstm input", cell.input, x.len()));
    }
    if h.len() != cell.hidden {
        return Err(dm("lstm hidden state", cell.hidden, h.len()));
    }
    if c.len() != cell.hidden {
        return Err(dm("lstm cell state", cell.hidden, c.len()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub direction: Direction,
    pub forward: LstmCell,
    pub backward: Option<LstmCell>,
}

/// Per-task context nodes and the final forward state of a sequence.
#[derive(Clone, Debug)]
pub struct SequenceNodes {
    /// `1 × output_dim` context per task.
    pub outputs: Vec<NodeId>,
    pub final_h: NodeId,
    pub final_c: NodeId,
}

impl ContextEncoder {
    pub fn new(store: &mut ParamStore, direction: Direction, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let forward = LstmCell::new(store, "context.forward", input, hidden, rng);
        let backward = (direction == Direction::Bidirectional)
            .then(|| LstmCell::new(store, "context.backward", input, hidden, rng));
        Self {
            direction,
            forward,
            backward,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        match self.direction {
            Direction::Vanilla => self.forward.hidden,
            Direction::Bidirectional => 2 * self.forward.hidden,
        }
    }

    pub fn initial_state(&self) -> ContextState {
        ContextState::zeros(self.direction, self.hidden())
    }

    /// Records the recurrence over `pooled` (each `1 × input`). The initial
    /// state enters as constants, which cuts gradients at the batch boundary.
    pub fn sequence_nodes(&self, scope: &mut Scope, pooled: &[NodeId], initial: &ContextState) -> SequenceNodes {
        let mut h = scope.constant(Tensor::row(initial.h.clone()));
        let mut c = scope.constant(Tensor::row(initial.c.clone()));
        let mut forward = Vec::with_capacity(pooled.len());
        for &x in pooled {
            (h, c) = self.forward.step_node(scope, x, h, c);
            forward.push(h);
        }
        let (final_h, final_c) = (h, c);
        let outputs = match &self.backward {
            None => forward,
            Some(cell) => {
                let zeros = Tensor::zeros(&[1, cell.hidden]);
                let mut hb = scope.constant(zeros.clone());
                let mut cb = scope.constant(zeros);
                let mut backward = vec![hb; pooled.len()];
                for (t, &x) in pooled.iter().enumerate().rev() {
                    (hb, cb) = cell.step_node(scope, x, hb, cb);
                    backward[t] = hb;
                }
                forward
                    .into_iter()
                    .zip(backward)
                    .map(|(f, b)| scope.graph.concat(&[f, b], 1))
                    .collect()
            }
        };
        SequenceNodes {
            outputs,
            final_h,
            final_c,
        }
    }

    /// Runs the encoder over pooled task summaries without tracking
    /// gradients, returning each task's context and the carried state.
    pub fn step_sequence(
        &self,
        store: &ParamStore,
        pooled: &[Vec<f64>],
        initial: &ContextState,
    ) -> Result<(Vec<Vec<f64>>, ContextState), ContextError> {
        if pooled.is_empty() {
            return Err(ContextError::EmptySequence);
        }
        for x in pooled {
            check(&self.forward, x, &initial.h, &initial.c)?;
        }
        let mut scope = Scope::frozen(store);
        let nodes: Vec<NodeId> = pooled.iter().map(|x| scope.constant(Tensor::row(x.clone()))).collect();
        let seq = self.sequence_nodes(&mut scope, &nodes, initial);
        scope.graph.eval().expect("shapes checked above");
        let g = &scope.graph;
        let outputs = seq.outputs.iter().map(|&o| g.value(o).unwrap().data().to_vec()).collect();
        let state = ContextState {
            direction: self.direction,
            h: g.value(seq.final_h).unwrap().data().to_vec(),
            c: g.value(seq.final_c).unwrap().data().to_vec(),
        };
        Ok((outputs, state))
    }
}
