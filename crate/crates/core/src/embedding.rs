//! Feature extractors mapping raw inputs to embedding rows.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{NodeId, Tensor};
use crate::nn::{truncated_normal, Activation, Mlp, ParamId, ParamStore, Scope, INIT_STD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("expected inputs of width {expected}, got shape {actual:?}")]
    InputShape { expected: usize, actual: Vec<usize> },
}

/// Fully connected ReLU network.
#[derive(Clone, Debug)]
pub struct MlpEmbedder {
    pub mlp: Mlp,
}

impl MlpEmbedder {
    /// `widths` starts with the input width.
    pub fn new(store: &mut ParamStore, widths: &[usize], rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::new(store, "embed", widths, Activation::Relu, Activation::Relu, rng),
        }
    }

    /// Two hidden layers of 40 units on scalar inputs.
    pub fn regression(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self::new(store, &[1, 40, 40], rng)
    }
}

/// Four blocks of 3×3 same-padded convolution, ReLU, dropout and 2×2
/// max-pooling over square single-channel images.
#[derive(Clone, Debug)]
pub struct CnnEmbedder {
    pub blocks: Vec<(ParamId, ParamId)>,
    pub side: usize,
    pub channels: usize,
    pub keep_prob: f64,
}

impl CnnEmbedder {
    pub fn new(store: &mut ParamStore, side: usize, channels: usize, keep_prob: f64, rng: &mut impl Rng) -> Self {
        let blocks = (0..4)
            .map(|b| {
                let cin = if b == 0 { 1 } else { channels };
                let k = store.add(
                    format!("embed.conv{b}.kernel"),
                    truncated_normal(rng, &[3, 3, cin, channels], INIT_STD),
                );
                let bias = store.add(format!("embed.conv{b}.bias"), Tensor::zeros(&[1, channels]));
                (k, bias)
            })
            .collect();
        Self {
            blocks,
            side,
            channels,
            keep_prob,
        }
    }

    /// 28×28 inputs, 64 channels, keep probability 0.9.
    pub fn omniglot(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Self::new(store, 28, 64, 0.9, rng)
    }

    /// Spatial side length after each block.
    pub fn spatial_trace(&self) -> Vec<usize> {
        let mut s = self.side;
        (0..self.blocks.len())
            .map(|_| {
                s = s.div_ceil(2);
                s
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub enum Embedder {
    Mlp(MlpEmbedder),
    Cnn(CnnEmbedder),
}

impl Embedder {
    pub fn input_dim(&self) -> usize {
        match self {
            Embedder::Mlp(m) => m.mlp.input_dim(),
            Embedder::Cnn(c) => c.side * c.side,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Embedder::Mlp(m) => m.mlp.output_dim(),
            Embedder::Cnn(c) => {
                let s = c.spatial_trace().last().copied().unwrap_or(c.side);
                s * s * c.channels
            }
        }
    }

    /// Records the embedding of `x` (`n × input_dim`, images flattened row
    /// by row). Dropout is applied only when `dropout` supplies an rng.
    pub fn forward<R: Rng>(
        &self,
        scope: &mut Scope,
        x: &Tensor,
        dropout: Option<&mut R>,
    ) -> Result<NodeId, EmbeddingError> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(EmbeddingError::InputShape {
                expected: self.input_dim(),
                actual: x.shape().to_vec(),
            });
        }
        let input = scope.constant(x.clone());
        Ok(match self {
            Embedder::Mlp(m) => m.mlp.forward(scope, input),
            Embedder::Cnn(c) => cnn_forward(c, scope, input, x.rows(), dropout),
        })
    }
}

fn cnn_forward<R: Rng>(
    cnn: &CnnEmbedder,
    scope: &mut Scope,
    input: NodeId,
    n: usize,
    mut dropout: Option<&mut R>,
) -> NodeId {
    let mut h = scope.graph.reshape(input, &[n, cnn.side, cnn.side, 1]);
    let mut side = cnn.side;
    for &(kernel, bias) in &cnn.blocks {
        let k = scope.param(kernel);
        let b = scope.param(bias);
        let conv = scope.graph.conv2d(h, k);
        let conv = scope.graph.add(conv, b);
        let mut act = scope.graph.relu(conv);
        if let Some(rng) = dropout.as_deref_mut() {
            let mask = dropout_mask(&[n, side, side, cnn.channels], cnn.keep_prob, rng);
            let m = scope.constant(mask);
            act = scope.graph.mul(act, m);
        }
        h = scope.graph.max_pool2(act);
        side = side.div_ceil(2);
    }
    scope.graph.reshape(h, &[n, side * side * cnn.channels])
}

/// Inverted dropout mask: `1/keep` with probability `keep`, otherwise 0.
pub fn dropout_mask(shape: &[usize], keep: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        if rng.random::<f64>() < keep {
            *v = 1.0 / keep;
        }
    }
    t
}

pub fn embed_mlp(store: &ParamStore, embedder: &MlpEmbedder, x: &Tensor) -> Result<Tensor, EmbeddingError> {
    run(store, &Embedder::Mlp(embedder.clone()), x, None::<&mut rand_chacha::ChaCha8Rng>)
}

/// With `train_mode` the supplied rng drives dropout.
pub fn embed_cnn<R: Rng>(
    store: &ParamStore,
    embedder: &CnnEmbedder,
    images: &Tensor,
    train_mode: Option<&mut R>,
) -> Result<Tensor, EmbeddingError> {
    run(store, &Embedder::Cnn(embedder.clone()), images, train_mode)
}

fn run<R: Rng>(store: &ParamStore, e: &Embedder, x: &Tensor, dropout: Option<&mut R>) -> Result<Tensor, EmbeddingError> {
    let mut scope = Scope::frozen(store);
    let out = e.forward(&mut scope, x, dropout)?;
    scope.graph.eval().expect("shapes checked on entry");
    Ok(scope.graph.value(out).expect("evaluated").clone())
}
