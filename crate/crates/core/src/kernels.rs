//! Random Fourier features and the Gram matrices built from them.
//!
//! A basis of `D` frequencies `ω_j` and phases `b_j` maps a point `x` to the
//! vector `z(x)_j = s · cos(ω_j · x + b_j)`. The kernel between two points is
//! then approximated by `z(x) · z(x′)`.
//!
//! ```
//! use metavrf::autodiff::Tensor;
//! use metavrf::kernels::{feature_map, gram, ScaleMode, SpectralBasis};
//!
//! let basis = SpectralBasis::new(Tensor::zeros(&[4, 2]), vec![0.0; 4], ScaleMode::Paper).unwrap();
//! let z = feature_map(&basis, &Tensor::matrix(1, 2, vec![0.3, -1.0])).unwrap();
//! assert_eq!(z.data(), &[0.5, 0.5, 0.5, 0.5]);
//! let k = gram(&z, &z).unwrap();
//! assert!((k.values.item() - 1.0).abs() < 1e-15);
//! ```

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Graph, NodeId, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: expected {expected}, got {actual}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("a spectral basis needs at least one frequency")]
    EmptyBasis,
    #[error("bias {0} lies outside [0, 2π]")]
    BiasOutOfRange(f64),
    #[error("frequencies must be finite")]
    NonFiniteFrequency,
    #[error("bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("mean pairwise distance needs at least two points, got {0}")]
    TooFewPoints(usize),
}

fn mismatch(op: &'static str, expected: impl ToString, actual: impl ToString) -> KernelError {
    KernelError::DimensionMismatch {
        op,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

/// Amplitude of the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum ScaleMode {
    /// `1/√D`: the inner product estimates half the kernel value.
    #[default]
    Paper,
    /// `√(2/D)`: the inner product is an unbiased kernel estimate.
    Unbiased,
}

impl ScaleMode {
    pub fn factor(self, basis_count: usize) -> f64 {
        let d = basis_count as f64;
        match self {
            ScaleMode::Paper => 1.0 / d.sqrt(),
            ScaleMode::Unbiased => (2.0 / d).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    /// `D × d` matrix, one frequency per row.
    pub frequencies: Tensor,
    /// One phase per frequency, in `[0, 2π]`.
    pub biases: Vec<f64>,
    pub scale_mode: ScaleMode,
}

impl SpectralBasis {
    pub fn new(frequencies: Tensor, biases: Vec<f64>, scale_mode: ScaleMode) -> Result<Self, KernelError> {
        if frequencies.rank() != 2 {
            return Err(mismatch("spectral basis", "a D × d matrix", format!("{:?}", frequencies.shape())));
        }
        if frequencies.rows() == 0 {
            return Err(KernelError::EmptyBasis);
        }
        if biases.len() != frequencies.rows() {
            return Err(mismatch("spectral basis", frequencies.rows(), biases.len()));
        }
        if !frequencies.all_finite() {
            return Err(KernelError::NonFiniteFrequency);
        }
        if let Some(&b) = biases.iter().find(|b| !(0.0..=TAU).contains(*b)) {
            return Err(KernelError::BiasOutOfRange(b));
        }
        Ok(Self {
            frequencies,
            biases,
            scale_mode,
        })
    }

    /// Frequencies from `N(0, σ⁻² I)` and phases from `Uniform[0, 2π]`, the
    /// spectral measure of a Gaussian kernel with bandwidth `sigma`.
    pub fn sample_gaussian(
        count: usize,
        dim: usize,
        sigma: f64,
        scale_mode: ScaleMode,
        rng: &mut impl Rng,
    ) -> Result<Self, KernelError> {
        if !(sigma > 0.0) {
            return Err(KernelError::NonPositiveBandwidth(sigma));
        }
        let mut freq = Tensor::zeros(&[count, dim]);
        for v in freq.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) / sigma;
        }
        Self::new(freq, sample_biases(count, rng), scale_mode)
    }

    pub fn count(&self) -> usize {
        self.frequencies.rows()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.cols()
    }

    pub fn bias_row(&self) -> Tensor {
        Tensor::row(self.biases.clone())
    }
}

pub fn sample_biases(count: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(0.0..=TAU)).collect()
}

pub fn feature_map(basis: &SpectralBasis, x: &Tensor) -> Result<Tensor, KernelError> {
    if x.rank() != 2 || x.cols() != basis.dim() {
        return Err(mismatch("feature_map", format!("n × {}", basis.dim()), format!("{:?}", x.shape())));
    }
    let mut g = Graph::new();
    let freq = g.constant(basis.frequencies.clone());
    let bias = g.constant(basis.bias_row());
    let xn = g.constant(x.clone());
    let z = feature_map_node(&mut g, freq, bias, xn, basis.scale_mode.factor(basis.count()));
    g.eval().expect("shapes checked above");
    Ok(g.value(z).expect("evaluated").clone())
}

/// Records `scale · cos(x ωᵀ + b)` for an `n × d` input, a `D × d`
/// frequency node and a `1 × D` bias node.
pub fn feature_map_node(g: &mut Graph, frequencies: NodeId, biases: NodeId, x: NodeId, scale: f64) -> NodeId {
    let proj = g.matmul_nt(x, frequencies);
    let shifted = g.add(proj, biases);
    let c = g.cos(shifted);
    g.scale(c, scale)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: Tensor,
}

impl KernelMatrix {
    pub fn left_count(&self) -> usize {
        self.values.rows()
    }

    pub fn right_count(&self) -> usize {
        self.values.cols()
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.values.max_abs_diff(&self.values.transpose())
    }
}

pub fn gram(left: &Tensor, right: &Tensor) -> Result<KernelMatrix, KernelError> {
    if left.rank() != 2 || right.rank() != 2 || left.cols() != right.cols() {
        return Err(mismatch("gram", format!("{:?}", left.shape()), format!("{:?}", right.shape())));
    }
    Ok(KernelMatrix {
        values: left.matmul_nt(right),
    })
}

pub fn gram_node(g: &mut Graph, left: NodeId, right: NodeId) -> NodeId {
    g.matmul_nt(left, right)
}

pub fn rbf_exact(x: &Tensor, y: &Tensor, sigma: f64) -> Result<KernelMatrix, KernelError> {
    if !(sigma > 0.0) {
        return Err(KernelError::NonPositiveBandwidth(sigma));
    }
    if x.rank() != 2 || y.rank() != 2 || x.cols() != y.cols() {
        return Err(mismatch("rbf_exact", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    let mut values = Tensor::zeros(&[x.rows(), y.rows()]);
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let d2: f64 = x.row_slice(i).iter().zip(y.row_slice(j)).map(|(a, b)| (a - b).powi(2)).sum();
            values.set(i, j, (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    Ok(KernelMatrix { values })
}

/// `‖x_i - y_j‖²` for every row pair, clamped at zero against rounding.
pub fn squared_distance_node(g: &mut Graph, x: NodeId, y: NodeId) -> NodeId {
    let xx = g.square(x);
    let xn = g.sum_axis(xx, 1);
    let yy = g.square(y);
    let yn = g.sum_axis(yy, 1);
    let ynt = g.transpose(yn);
    let xy = g.matmul_nt(x, y);
    let cross = g.scale(xy, -2.0);
    let partial = g.add(xn, ynt);
    let d2 = g.add(partial, cross);
    g.clamp(d2, 0.0, f64::INFINITY)
}

/// Gaussian kernel between the rows of two nodes with a fixed bandwidth.
pub fn rbf_node(g: &mut Graph, x: NodeId, y: NodeId, sigma: f64) -> NodeId {
    let d2 = squared_distance_node(g, x, y);
    let e = g.scale(d2, -1.0 / (2.0 * sigma * sigma));
    g.exp(e)
}

/// Gaussian kernel whose bandwidth is a scalar node.
pub fn rbf_node_with(g: &mut Graph, x: NodeId, y: NodeId, sigma: NodeId) -> NodeId {
    let d2 = squared_distance_node(g, x, y);
    let s2 = g.square(sigma);
    let denom = g.scale(s2, 2.0);
    let ratio = g.div(d2, denom);
    let e = g.neg(ratio);
    g.exp(e)
}

/// Mean pairwise distance between the `n` rows of `x`, detached from the
/// graph. Falls back to 1 when fewer than two rows exist or all coincide.
pub fn mean_pairwise_bandwidth_node(g: &mut Graph, x: NodeId, n: usize) -> NodeId {
    if n < 2 {
        return g.scalar(1.0);
    }
    let fixed = g.detach(x);
    let d2 = squared_distance_node(g, fixed, fixed);
    let d = g.sqrt(d2);
    // The expanded form leaves rounding residue on the diagonal that the
    // square root magnifies, so self-distances are masked out.
    let mut mask = Tensor::ones(&[n, n]);
    for i in 0..n {
        mask.set(i, i, 0.0);
    }
    let off_diagonal = g.constant(mask);
    let d = g.mul(d, off_diagonal);
    let total = g.sum(d);
    let mean = g.scale(total, 1.0 / (n * (n - 1)) as f64);
    // Coincident rows would give a zero bandwidth.
    g.clamp(mean, 1e-12, f64::INFINITY)
}

pub fn mean_pairwise_bandwidth(x: &Tensor) -> Result<f64, KernelError> {
    let n = if x.rank() == 2 { x.rows() } else { 0 };
    if n < 2 {
        return Err(KernelError::TooFewPoints(n));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = x.row_slice(i).iter().zip(x.row_slice(j)).map(|(a, b)| (a - b).powi(2)).sum();
            total += d2.sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::seeded;
    use std::f64::consts::PI;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data)
    }

    #[test]
    fn zero_basis_gives_half_under_reference_scale() {
        let b = SpectralBasis::new(Tensor::zeros(&[4, 3]), vec![0.0; 4], ScaleMode::Paper).unwrap();
        let z = feature_map(&b, &random_matrix(5, 3, 1)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn phase_pi_gives_minus_one() {
        let b = SpectralBasis::new(Tensor::zeros(&[1, 2]), vec![PI], ScaleMode::Paper).unwrap();
        let z = feature_map(&b, &random_matrix(3, 2, 2)).unwrap();
        assert!(z.data().iter().all(|&v| (v + 1.0).abs() < 1e-15));
    }

    #[test]
    fn feature_map_matches_definition() {
        let mut rng = seeded(3);
        let b = SpectralBasis::sample_gaussian(6, 3, 0.7, ScaleMode::Unbiased, &mut rng).unwrap();
        let x = random_matrix(4, 3, 4);
        let z = feature_map(&b, &x).unwrap();
        let s = (2.0f64 / 6.0).sqrt();
        for i in 0..4 {
            for j in 0..6 {
                let dot: f64 = (0..3).map(|k| b.frequencies.at(j, k) * x.at(i, k)).sum();
                assert!((z.at(i, j) - s * (dot + b.biases[j]).cos()).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn feature_map_rejects_wrong_width() {
        let b = SpectralBasis::new(Tensor::zeros(&[2, 3]), vec![0.0; 2], ScaleMode::Paper).unwrap();
        assert!(matches!(
            feature_map(&b, &Tensor::zeros(&[2, 4])),
            Err(KernelError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn basis_validation() {
        assert_eq!(
            SpectralBasis::new(Tensor::zeros(&[0, 3]), vec![], ScaleMode::Paper),
            Err(KernelError::EmptyBasis)
        );
        assert_eq!(
            SpectralBasis::new(Tensor::zeros(&[1, 1]), vec![7.0], ScaleMode::Paper),
            Err(KernelError::BiasOutOfRange(7.0))
        );
        assert_eq!(
            SpectralBasis::new(Tensor::matrix(1, 1, vec![f64::NAN]), vec![0.0], ScaleMode::Paper),
            Err(KernelError::NonFiniteFrequency)
        );
    }

    #[test]
    fn gram_examples() {
        let id = Tensor::identity(3);
        assert_eq!(gram(&id, &id).unwrap().values, Tensor::identity(3));
        let k = gram(&Tensor::row(vec![1.0, 0.0]), &Tensor::row(vec![0.0, 1.0])).unwrap();
        assert_eq!(k.values.item(), 0.0);
        assert!(gram(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn gram_matches_double_loop() {
        let a = random_matrix(5, 8, 10);
        let b = random_matrix(4, 8, 11);
        let k = gram(&a, &b).unwrap();
        assert_eq!((k.left_count(), k.right_count()), (5, 4));
        for i in 0..5 {
            for j in 0..4 {
                let dot: f64 = (0..8).map(|d| a.at(i, d) * b.at(j, d)).sum();
                assert!((k.values.at(i, j) - dot).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rbf_examples() {
        let x = random_matrix(4, 3, 5);
        let k = rbf_exact(&x, &x, 0.8).unwrap();
        for i in 0..4 {
            assert_eq!(k.values.at(i, i), 1.0);
        }
        let sigma = 1.3;
        let a = Tensor::row(vec![0.0, 0.0]);
        let b = Tensor::row(vec![sigma * 2f64.sqrt(), 0.0]);
        let v = rbf_exact(&a, &b, sigma).unwrap().values.item();
        assert!((v - (-1.0f64).exp()).abs() < 1e-14);
        assert_eq!(rbf_exact(&a, &b, 0.0), Err(KernelError::NonPositiveBandwidth(0.0)));
    }

    #[test]
    fn rbf_node_matches_direct() {
        let x = random_matrix(5, 3, 6);
        let y = random_matrix(3, 3, 7);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let yn = g.constant(y.clone());
        let k = rbf_node(&mut g, xn, yn, 0.9);
        g.eval().unwrap();
        let direct = rbf_exact(&x, &y, 0.9).unwrap();
        assert!(g.value(k).unwrap().max_abs_diff(&direct.values) < 1e-12);
    }

    #[test]
    fn bandwidth_node_matches_direct() {
        let x = random_matrix(6, 3, 15);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let bw = mean_pairwise_bandwidth_node(&mut g, xn, 6);
        let k = rbf_node_with(&mut g, xn, xn, bw);
        g.eval().unwrap();
        let direct = mean_pairwise_bandwidth(&x).unwrap();
        assert!((g.value(bw).unwrap().item() - direct).abs() < 1e-12);
        let kd = rbf_exact(&x, &x, direct).unwrap();
        assert!(g.value(k).unwrap().max_abs_diff(&kd.values) < 1e-12);
    }

    #[test]
    fn bandwidth_examples() {
        let two = Tensor::from_rows(&[vec![0.0, 0.0], vec![3.0, 0.0]]);
        assert_eq!(mean_pairwise_bandwidth(&two).unwrap(), 3.0);
        let line = Tensor::column(vec![0.0, 1.0, 2.0]);
        assert!((mean_pairwise_bandwidth(&line).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_pairwise_bandwidth(&Tensor::column(vec![1.0])), Err(KernelError::TooFewPoints(1)));
    }

    #[test]
    fn bandwidth_matches_ordered_pair_enumeration() {
        // Averaging over ordered pairs i != j counts each distance twice.
        let x = random_matrix(10, 4, 8);
        let mut sum = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                if i != j {
                    let d: f64 = (0..4).map(|k| (x.at(i, k) - x.at(j, k)).powi(2)).sum();
                    sum += d.sqrt();
                }
            }
        }
        assert!((mean_pairwise_bandwidth(&x).unwrap() - sum / 90.0).abs() < 1e-12);
    }

    #[test]
    fn reference_scale_gram_is_half_unbiased() {
        let mut rng = seeded(9);
        let p = SpectralBasis::sample_gaussian(16, 2, 1.0, ScaleMode::Paper, &mut rng).unwrap();
        let u = SpectralBasis { scale_mode: ScaleMode::Unbiased, ..p.clone() };
        let x = random_matrix(3, 2, 12);
        let kp = gram(&feature_map(&p, &x).unwrap(), &feature_map(&p, &x).unwrap()).unwrap();
        let ku = gram(&feature_map(&u, &x).unwrap(), &feature_map(&u, &x).unwrap()).unwrap();
        let half = ku.values.map(|v| v / 2.0);
        assert!(kp.values.max_abs_diff(&half) <= 1e-12);
    }

    #[test]
    fn feature_map_gradients() {
        let mut g = Graph::new();
        let w = g.parameter(random_matrix(4, 2, 13));
        let b = g.constant(Tensor::row(vec![0.1, 1.0, 2.0, 3.0]));
        let x = g.parameter(random_matrix(3, 2, 14));
        let z = feature_map_node(&mut g, w, b, x, 0.5);
        let k = gram_node(&mut g, z, z);
        let loss = g.sum(k);
        assert!(grad_check(&mut g, loss, 1e-6).unwrap() < 1e-6);
    }
}
