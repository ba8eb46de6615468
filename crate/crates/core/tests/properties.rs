use metavrf::autodiff::Tensor;
use metavrf::context::{lstm_cell, pool_support, ContextEncoder, Direction};
use metavrf::inference::{kl_diag_gaussians, laplace_attention, reparameterize, GaussianPosterior};
use metavrf::kernels::{feature_map, gram, rbf_exact, sample_biases, ScaleMode, SpectralBasis};
use metavrf::nn::ParamStore;
use metavrf::ridge::{fit, one_hot_columns, predict, softmax_xent_loss, LabelMatrix};
use metavrf::rng::{derive_seed, seeded};
use metavrf::tasks::{make_blob_dataset, rotate90, sample_classification_episode, sample_sine_task, Outputs, Partition, QueryLayout};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

fn matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded(seed);
    let mut t = Tensor::zeros(&[rows, cols]);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}

fn spd(n: usize, seed: u64) -> Tensor {
    let a = matrix(n, n, seed, -1.0, 1.0);
    let mut k = a.matmul_nt(&a);
    for i in 0..n {
        k.set(i, i, k.at(i, i) + 0.5);
    }
    k
}

fn min_eigenvalue(k: &Tensor) -> f64 {
    let m = DMatrix::from_row_slice(k.rows(), k.cols(), k.data());
    m.symmetric_eigen().eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn features_are_bounded_by_the_scale(seed in any::<u64>(), count in 1usize..64, dim in 1usize..5, n in 1usize..10) {
        let mut rng = seeded(seed);
        for mode in [ScaleMode::Paper, ScaleMode::Unbiased] {
            let basis = SpectralBasis::sample_gaussian(count, dim, 1.0, mode, &mut rng).unwrap();
            prop_assert!(basis.biases.iter().all(|b| (0.0..=std::f64::consts::TAU).contains(b)));
            let x = matrix(n, dim, seed ^ 1, -3.0, 3.0);
            let z = feature_map(&basis, &x).unwrap();
            prop_assert_eq!(z.shape(), &[n, count][..]);
            let s = mode.factor(count);
            prop_assert!(z.data().iter().all(|v| v.abs() <= s + 1e-15));
        }
    }

    #[test]
    fn self_gram_is_symmetric_and_psd(seed in any::<u64>(), count in 1usize..40, n in 1usize..12) {
        let mut rng = seeded(seed);
        let basis = SpectralBasis::sample_gaussian(count, 3, 0.8, ScaleMode::Paper, &mut rng).unwrap();
        let z = feature_map(&basis, &matrix(n, 3, seed ^ 2, -2.0, 2.0)).unwrap();
        let k = gram(&z, &z).unwrap();
        prop_assert!(k.max_asymmetry() <= 1e-12);
        prop_assert!(min_eigenvalue(&k.values) >= -1e-8);
    }

    #[test]
    fn exact_rbf_is_psd_with_unit_diagonal(seed in any::<u64>(), n in 1usize..10, sigma in 0.2f64..3.0) {
        let x = matrix(n, 2, seed, -2.0, 2.0);
        let k = rbf_exact(&x, &x, sigma).unwrap();
        for i in 0..n {
            prop_assert_eq!(k.values.at(i, i), 1.0);
        }
        prop_assert!(min_eigenvalue(&k.values) >= -1e-8);
    }

    #[test]
    fn ridge_fit_solves_its_system(seed in any::<u64>(), n in 1usize..9, outputs in 1usize..4, lambda in 1e-3f64..2.0) {
        let k = spd(n, seed);
        let y = matrix(outputs, n, seed ^ 3, -1.0, 1.0);
        let sol = fit(&gram_of(&k), &LabelMatrix { values: y.clone(), encoding: metavrf::ridge::LabelEncoding::RealTargets }, lambda).unwrap();
        prop_assert_eq!(sol.alpha.cols(), n);
        let mut reg = k.clone();
        for i in 0..n {
            reg.set(i, i, reg.at(i, i) + lambda);
        }
        prop_assert!(sol.alpha.matmul(&reg).max_abs_diff(&y) <= 1e-10);
    }

    #[test]
    fn ridge_predictions_follow_query_permutations(seed in any::<u64>(), n in 2usize..8, m in 2usize..8) {
        let k = spd(n, seed);
        let cross = matrix(n, m, seed ^ 4, -1.0, 1.0);
        let y = LabelMatrix::real(matrix(1, n, seed ^ 5, -1.0, 1.0).data());
        let sol = fit(&gram_of(&k), &y, 0.1).unwrap();
        let pred = predict(&sol, &gram_of(&cross)).unwrap();
        let perm: Vec<usize> = (0..m).rev().collect();
        let mut shuffled = Tensor::zeros(&[n, m]);
        for i in 0..n {
            for (j, &p) in perm.iter().enumerate() {
                shuffled.set(i, j, cross.at(i, p));
            }
        }
        let pred_perm = predict(&sol, &gram_of(&shuffled)).unwrap();
        for (j, &p) in perm.iter().enumerate() {
            prop_assert!((pred_perm.at(0, j) - pred.at(0, p)).abs() <= 1e-12);
        }
    }

    #[test]
    fn one_hot_columns_hold_a_single_one(labels in prop::collection::vec(0usize..6, 1..20)) {
        let t = one_hot_columns(&labels, 6).unwrap();
        for (j, &l) in labels.iter().enumerate() {
            let col: Vec<f64> = (0..6).map(|i| t.at(i, j)).collect();
            prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(col[l], 1.0);
        }
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in any::<u64>(), classes in 2usize..6, m in 1usize..10) {
        let logits = matrix(classes, m, seed, -5.0, 5.0);
        let labels: Vec<usize> = (0..m).map(|j| j % classes).collect();
        prop_assert!(softmax_xent_loss(&logits, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        mu_q in prop::collection::vec(-3.0f64..3.0, 4),
        lv_q in prop::collection::vec(-4.0f64..4.0, 4),
        mu_p in prop::collection::vec(-3.0f64..3.0, 4),
        lv_p in prop::collection::vec(-4.0f64..4.0, 4),
    ) {
        let q = GaussianPosterior { mu: mu_q, log_var: lv_q };
        let p = GaussianPosterior { mu: mu_p, log_var: lv_p };
        prop_assert!(kl_diag_gaussians(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_diag_gaussians(&q, &q).unwrap().abs() <= 1e-12);
        prop_assert!(q.sigma().iter().all(|s| *s > 0.0));
    }

    #[test]
    fn reparameterized_rows_reuse_the_noise(seed in any::<u64>(), count in 1usize..16) {
        let q = GaussianPosterior { mu: vec![0.3, -1.0], log_var: vec![-0.5, 0.7] };
        let a = reparameterize(&q, count, &mut seeded(seed));
        let b = reparameterize(&q, count, &mut seeded(seed));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.all_finite());
    }

    #[test]
    fn attention_weights_form_a_distribution(seed in any::<u64>(), classes in 1usize..6) {
        let keys = matrix(classes, 3, seed, -2.0, 2.0);
        let values = matrix(classes, 3, seed ^ 7, -2.0, 2.0);
        let (weights, out) = laplace_attention(&[0.1, 0.2, -0.3], &keys, &values).unwrap();
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(weights.iter().all(|w| *w >= 0.0));
        for j in 0..3 {
            let lo = (0..classes).map(|c| values.at(c, j)).fold(f64::INFINITY, f64::min);
            let hi = (0..classes).map(|c| values.at(c, j)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn pooling_is_order_invariant(seed in any::<u64>(), n in 1usize..8) {
        let x = matrix(n, 4, seed, -1.0, 1.0);
        let mut rev = Tensor::zeros(&[n, 4]);
        for i in 0..n {
            for j in 0..4 {
                rev.set(n - 1 - i, j, x.at(i, j));
            }
        }
        let a = pool_support(&x).unwrap();
        let b = pool_support(&rev).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-15);
        }
    }

    #[test]
    fn lstm_hidden_state_stays_in_the_unit_box(seed in any::<u64>(), steps in 1usize..6) {
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, Direction::Vanilla, 3, 5, &mut seeded(seed));
        let mut state = enc.initial_state();
        for t in 0..steps {
            let x = matrix(1, 3, seed ^ t as u64, -10.0, 10.0);
            let (h, c) = lstm_cell(&store, &enc.forward, x.data(), &state.h, &state.c).unwrap();
            prop_assert!(h.iter().all(|v| v.abs() < 1.0));
            state.h = h;
            state.c = c;
        }
    }

    #[test]
    fn sine_tasks_respect_their_ranges(seed in any::<u64>(), shots in 1usize..12, queries in 1usize..12) {
        let task = sample_sine_task(seed, shots, queries, QueryLayout::Random).unwrap();
        let params = task.sine.unwrap();
        prop_assert!((0.1..=5.0).contains(&params.amplitude));
        for x in task.support_x.data().iter().chain(task.query_x.data()) {
            prop_assert!((-5.0..=5.0).contains(x));
        }
        let Outputs::Regression { support, .. } = &task.outputs else { unreachable!() };
        for (x, y) in task.support_x.data().iter().zip(support) {
            prop_assert!((params.eval(*x) - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn episodes_are_balanced_and_relabelled(seed in any::<u64>(), ways in 2usize..6, shots in 1usize..4, queries in 1usize..4) {
        let split = make_blob_dataset(20, 3, 4.0, 11);
        let task = sample_classification_episode(split.partition(Partition::Train), ways, shots, queries, seed).unwrap();
        let support = task.support_labels().unwrap();
        let query = task.query_labels().unwrap();
        for c in 0..ways {
            prop_assert_eq!(support.iter().filter(|&&l| l == c).count(), shots);
            prop_assert_eq!(query.iter().filter(|&&l| l == c).count(), queries);
        }
    }

    #[test]
    fn derived_seeds_are_stable(base in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
        }
    }

    #[test]
    fn four_rotations_are_the_identity(pixels in prop::collection::vec(any::<u8>(), 16)) {
        let once = rotate90(&pixels, 4);
        prop_assert_ne!(&once, &Vec::<u8>::new());
        let full = rotate90(&rotate90(&rotate90(&once, 4), 4), 4);
        prop_assert_eq!(full, pixels);
    }

    #[test]
    fn sampled_biases_lie_in_one_period(seed in any::<u64>(), count in 1usize..100) {
        let b = sample_biases(count, &mut seeded(seed));
        prop_assert!(b.iter().all(|v| (0.0..=std::f64::consts::TAU).contains(v)));
    }
}

fn gram_of(t: &Tensor) -> metavrf::kernels::KernelMatrix {
    metavrf::kernels::KernelMatrix { values: t.clone() }
}
