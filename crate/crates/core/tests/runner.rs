use metavrf::autodiff::Tensor;
use metavrf::kernels::mean_pairwise_bandwidth;
use metavrf::runner::{
    load_checkpoint, load_dataset, meta_test, meta_train, meta_train_on, replay_batch, run_baseline, sweep_basis_count,
    Checkpoint, EvalSpec, ExperimentConfig, InferenceMode, KernelKind, Metric, RunError, TaskFamily,
};

/// Blobs small enough that a few iterations take milliseconds.
fn tiny_blobs() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::blobs().with_blob_dim(4);
    cfg.blobs.classes = 30;
    cfg.bases = 16;
    cfg.iterations = 3;
    cfg.batch = 2;
    cfg.queries = 3;
    cfg.dims.embed = vec![4, 8];
    cfg.dims.context_hidden = 6;
    cfg.dims.net_hidden = 8;
    cfg
}

fn tiny_sine() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::sine();
    cfg.bases = 16;
    cfg.iterations = 3;
    cfg.batch = 2;
    cfg.dims.embed = vec![1, 8];
    cfg.dims.context_hidden = 5;
    cfg.dims.net_hidden = 6;
    cfg
}

#[test]
fn one_iteration_writes_a_checkpoint_at_iteration_one() {
    let dir = tempfile::tempdir().unwrap();
    for mut cfg in [tiny_blobs(), tiny_sine()] {
        cfg.iterations = 1;
        cfg.out_dir = Some(dir.path().to_path_buf());
        let initial = metavrf::runner::MetaModel::new(&cfg).unwrap().store.checksum();
        let out = meta_train(&cfg).unwrap();
        assert_eq!(out.checkpoint.iteration, 1);
        assert_eq!(out.losses.len(), 1);
        assert_ne!(out.model.store.checksum(), initial);
        let ckpt = load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
        assert_eq!(ckpt.iteration, 1);
        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(metrics.lines().count(), 1);
        let record: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
        assert_eq!(record["iteration"], 1);
        assert!(record["wall_ms"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn fixed_seed_reproduces_the_loss_curve_bitwise() {
    let cfg = tiny_blobs();
    let a = meta_train(&cfg).unwrap();
    let b = meta_train(&cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(bits(&meta_train(&other).unwrap().losses), bits(&a.losses));
}

#[test]
fn meta_test_leaves_parameters_untouched_and_is_repeatable() {
    let out = meta_train(&tiny_blobs()).unwrap();
    let before = out.checkpoint.model().unwrap().store.checksum();
    let spec = EvalSpec::episodes(20);
    let first = meta_test(&out.checkpoint, &spec).unwrap();
    let second = meta_test(&out.checkpoint, &spec).unwrap();
    assert_eq!(out.checkpoint.model().unwrap().store.checksum(), before);
    assert_eq!(first, second);
    assert_eq!(first.episodes, 20);
    assert_eq!(first.values.len(), 20);
    assert!(first.ci95 >= 0.0);
    assert_eq!(first.metric, Metric::Accuracy);
}

#[test]
fn saved_checkpoint_reproduces_the_report_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_sine();
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = meta_train(&cfg).unwrap();
    let loaded = load_checkpoint(&dir.path().join("checkpoint.bin")).unwrap();
    assert_eq!(loaded.to_bytes(), out.checkpoint.to_bytes());
    let spec = EvalSpec {
        curves: true,
        ..EvalSpec::episodes(5)
    };
    let a = meta_test(&out.checkpoint, &spec).unwrap();
    let b = meta_test(&loaded, &spec).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.values), bits(&b.values));
    assert_eq!(a.curves, b.curves);
    assert_eq!(a.curves.len(), 5 * metavrf::runner::SINE_TEST_POINTS);
    assert_eq!(a.metric, Metric::Mse);
}

#[test]
fn stored_state_matches_a_replay_of_the_final_batch() {
    for mode in [InferenceMode::Lstm, InferenceMode::Bilstm] {
        let mut cfg = tiny_blobs();
        cfg.mode = mode;
        let out = meta_train(&cfg).unwrap();
        let stored = out.checkpoint.context.clone().expect("recurrent models carry a state");
        let replayed = replay_batch(&out.checkpoint).unwrap().unwrap();
        assert_eq!(stored, replayed);
        let bytes = out.checkpoint.to_bytes();
        let again = replay_batch(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap().unwrap();
        assert_eq!(stored, again);
    }
    let mut cfg = tiny_blobs();
    cfg.mode = InferenceMode::None;
    assert!(meta_train(&cfg).unwrap().checkpoint.context.is_none());
}

#[test]
fn evaluation_rejects_another_family() {
    let out = meta_train(&tiny_blobs()).unwrap();
    let spec = EvalSpec {
        family: Some(TaskFamily::Sine),
        ..EvalSpec::episodes(1)
    };
    assert!(matches!(
        meta_test(&out.checkpoint, &spec),
        Err(RunError::FamilyMismatch {
            trained: TaskFamily::Blobs,
            requested: TaskFamily::Sine
        })
    ));
}

#[test]
fn untrained_model_is_at_chance_on_inseparable_blobs() {
    let mut cfg = ExperimentConfig::blobs();
    cfg.blobs.separation = 0.0;
    cfg.iterations = 1;
    cfg.batch = 1;
    let out = meta_train(&cfg).unwrap();
    let report = meta_test(&out.checkpoint, &EvalSpec::episodes(500)).unwrap();
    assert!((0.16..=0.24).contains(&report.mean), "accuracy {}", report.mean);
}

#[test]
fn varied_ways_and_shots_evaluate() {
    let out = meta_train(&tiny_blobs()).unwrap();
    let spec = EvalSpec {
        ways: Some(6),
        shots: Some(2),
        ..EvalSpec::episodes(3)
    };
    let report = meta_test(&out.checkpoint, &spec).unwrap();
    assert_eq!(report.episodes, 3);
}

#[test]
fn exact_rbf_bandwidth_comes_from_the_support_points() {
    // The bandwidth node is checked against the plain helper on the same
    // five support embeddings a 5-way 1-shot episode would provide.
    let support = Tensor::matrix(5, 2, vec![0.0, 0.0, 3.0, 4.0, 1.0, 1.0, -2.0, 0.5, 0.3, -1.2]);
    let mut g = metavrf::autodiff::Graph::new();
    let x = g.constant(support.clone());
    let bw = metavrf::kernels::mean_pairwise_bandwidth_node(&mut g, x, 5);
    g.eval().unwrap();
    let expected = mean_pairwise_bandwidth(&support).unwrap();
    assert!((g.value(bw).unwrap().item() - expected).abs() <= 1e-12);

    let mut cfg = tiny_blobs();
    cfg.shots = 1;
    let (outcome, report) = run_baseline(&cfg, KernelKind::ExactRbf, &EvalSpec::episodes(5)).unwrap();
    assert_eq!(outcome.checkpoint.config.kernel, KernelKind::ExactRbf);
    assert!(report.values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn baselines_repeat_exactly() {
    for kind in [KernelKind::FixedRff, KernelKind::ExactRbf] {
        let (_, a) = run_baseline(&tiny_sine(), kind, &EvalSpec::episodes(4)).unwrap();
        let (_, b) = run_baseline(&tiny_sine(), kind, &EvalSpec::episodes(4)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn fixed_basis_never_moves() {
    let mut cfg = tiny_blobs();
    cfg.kernel = KernelKind::FixedRff;
    let out = meta_train(&cfg).unwrap();
    let basis = out.model.fixed_basis.clone().unwrap();
    let rebuilt = out.checkpoint.model().unwrap().fixed_basis.unwrap();
    assert_eq!(basis, rebuilt);
    assert!(out.model.store.iter().all(|(name, _)| !name.starts_with("posterior")));
}

#[test]
fn sweep_writes_one_row_per_basis_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_blobs();
    cfg.out_dir = Some(dir.path().to_path_buf());
    let rows = sweep_basis_count(&cfg, &[1, 4, 9], &EvalSpec::episodes(3)).unwrap();
    assert_eq!(rows.iter().map(|r| r.bases).collect::<Vec<_>>(), vec![1, 4, 9]);
    let mut reader = csv::Reader::from_path(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["D", "metric", "ci95"]);
    assert_eq!(reader.records().count(), 3);
    assert!(matches!(
        sweep_basis_count(&cfg, &[], &EvalSpec::episodes(1)),
        Err(RunError::InvalidConfig(_))
    ));
}

#[test]
fn shared_dataset_matches_a_fresh_load() {
    let cfg = tiny_blobs();
    let dataset = load_dataset(&cfg).unwrap();
    let a = meta_train_on(&cfg, &dataset).unwrap();
    let b = meta_train(&cfg).unwrap();
    assert_eq!(a.losses, b.losses);
}

#[test]
fn missing_omniglot_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::omniglot();
    cfg.data_root = Some(dir.path().join("nowhere"));
    assert!(matches!(meta_train(&cfg), Err(RunError::DatasetMissing(_))));
}

#[test]
fn invalid_configs_are_refused_before_training() {
    let mut cfg = tiny_blobs();
    cfg.bases = 0;
    assert!(matches!(meta_train(&cfg), Err(RunError::InvalidConfig(_))));
    let mut cfg = tiny_blobs();
    cfg.iterations = 0;
    assert!(matches!(meta_train(&cfg), Err(RunError::InvalidConfig(_))));
}

#[test]
fn divergent_training_dumps_the_offending_seed() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_sine();
    cfg.learning_rate = 1e12;
    cfg.iterations = 50;
    cfg.out_dir = Some(dir.path().to_path_buf());
    match meta_train(&cfg) {
        Err(RunError::NonFiniteLoss {
            task_seed, diagnostic, ..
        }) => {
            let path = diagnostic.expect("an output directory was given");
            let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
            assert_eq!(dump["task_seed"], task_seed);
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|o| o.losses)),
    }
}
