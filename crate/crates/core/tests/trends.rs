//! Ordinal checks that need real training runs. Each one trains at desk
//! scale and takes minutes on a single core.

use metavrf::runner::{meta_train, run_baseline, sweep_basis_count, EvalSpec, ExperimentConfig, KernelKind, FIXED_RFF_BASES};

const ORDERING_ITERATIONS: usize = 1_000;
const ORDERING_EPISODES: usize = 300;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn sine_training_loss_falls_tenfold() {
    let out = meta_train(&ExperimentConfig::sine()).unwrap();
    let first = mean(&out.losses[..100]);
    let last = mean(&out.losses[out.losses.len() - 100..]);
    assert!(first >= 10.0 * last, "first 100 iterations {first:.4}, last 100 {last:.4}");
}

#[test]
fn learned_bases_match_or_beat_a_larger_fixed_basis_on_blobs() {
    let mut cfg = ExperimentConfig::blobs();
    cfg.iterations = ORDERING_ITERATIONS;
    let spec = EvalSpec::episodes(ORDERING_EPISODES);
    let (_, learned) = run_baseline(&cfg, KernelKind::MetaVrf, &spec).unwrap();
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.bases = FIXED_RFF_BASES;
    let (_, fixed) = run_baseline(&fixed_cfg, KernelKind::FixedRff, &spec).unwrap();
    assert!(
        learned.mean >= fixed.mean,
        "learned D={} {:.4}, fixed D={} {:.4}",
        cfg.bases,
        learned.mean,
        FIXED_RFF_BASES,
        fixed.mean
    );
}

#[test]
fn more_bases_do_not_hurt_on_blobs() {
    let mut cfg = ExperimentConfig::blobs();
    cfg.iterations = ORDERING_ITERATIONS;
    let rows = sweep_basis_count(&cfg, &[8, 512], &EvalSpec::episodes(ORDERING_EPISODES)).unwrap();
    assert!(rows[1].metric >= rows[0].metric, "D=8 {:.4}, D=512 {:.4}", rows[0].metric, rows[1].metric);
}
