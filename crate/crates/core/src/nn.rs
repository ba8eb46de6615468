//! Parameter storage and the dense layers shared by every network.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};

/// Standard deviation of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// # Panics
    ///
    /// If `name` is already registered.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// A graph under construction together with the parameters bound into it.
///
/// Each parameter becomes one leaf the first time it is requested. A frozen
/// scope binds parameters as constants, so no gradients are tracked.
pub struct Scope<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: HashMap<ParamId, NodeId>,
    frozen: bool,
}

impl<'s> Scope<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            frozen: false,
        }
    }

    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.bound.get(&id) {
            return n;
        }
        let value = self.store.get(id).clone();
        let n = if self.frozen {
            self.graph.constant(value)
        } else {
            self.graph.parameter(value)
        };
        self.bound.insert(id, n);
        n
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.graph.constant(t)
    }

    /// Parameter gradients keyed by store id, in store order.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&p, &n)| grads.get(n).map(|g| (p, g.clone())))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

pub(crate) fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        };
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// Fully connected layer `x W + b` on row-major batches.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), truncated_normal(rng, &[input, output], INIT_STD));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn forward(&self, scope: &mut Scope, x: NodeId) -> NodeId {
        let w = scope.param(self.weight);
        let b = scope.param(self.bias);
        let xw = scope.graph.matmul(x, w);
        scope.graph.add(xw, b)
    }
}

/// A stack of [`Linear`] layers with a shared hidden activation and an
/// optional activation on the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub last: Activation,
}

impl Mlp {
    /// `widths` lists every layer boundary, input first.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.fc{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, last }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn forward(&self, scope: &mut Scope, x: NodeId) -> NodeId {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(scope, h);
            let act = if i + 1 == n { self.last } else { self.hidden };
            h = act.apply(&mut scope.graph, h);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.input * l.output + l.output).sum()
    }
}
