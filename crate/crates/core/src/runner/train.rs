use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, ReplayRecord, RngState};
use super::config::{ExperimentConfig, KernelKind};
use super::eval::{evaluate, EvalReport, EvalSpec};
use super::model::{stream, MetaModel, Pass};
use super::output::{write_metrics, write_sweep_csv};
use super::{io_error, load_dataset, Dataset, RunError};
use crate::autodiff::GraphError;
use crate::context::{ContextState, Direction};
use crate::nn::Scope;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, seeded};
use crate::tasks::{sample_classification_episode, sample_sine_task, Partition, QueryLayout, Task};

/// One line of `metrics.jsonl`: the mean batch loss since the previous
/// record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MetaModel,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Batch loss of every iteration.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "D")]
    pub bases: usize,
    pub metric: f64,
    pub ci95: f64,
}

pub(crate) fn sample_task(
    dataset: &Dataset,
    partition: Partition,
    ways: usize,
    shots: usize,
    queries: usize,
    layout: QueryLayout,
    seed: u64,
) -> Result<Task, RunError> {
    Ok(match dataset {
        Dataset::Sine => sample_sine_task(seed, shots, queries, layout)?,
        Dataset::Classes(split) => sample_classification_episode(split.partition(partition), ways, shots, queries, seed)?,
    })
}

fn training_tasks(dataset: &Dataset, config: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<Task>, RunError> {
    seeds
        .iter()
        .map(|&s| {
            sample_task(
                dataset,
                Partition::Train,
                config.ways,
                config.shots,
                config.queries,
                QueryLayout::Random,
                s,
            )
        })
        .collect()
}

/// Trains a model from scratch on the dataset named by the config. When
/// the config has an output directory, `checkpoint.bin` and
/// `metrics.jsonl` are written there.
pub fn meta_train(config: &ExperimentConfig) -> Result<TrainOutcome, RunError> {
    meta_train_observed(config, &mut |_| {})
}

/// [`meta_train`] that hands every log record to `on_log` as it is made.
pub fn meta_train_observed(
    config: &ExperimentConfig,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, RunError> {
    config.validate()?;
    let dataset = load_dataset(config)?;
    train_loop(config, &dataset, on_log)
}

/// [`meta_train`] on an already loaded dataset.
pub fn meta_train_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome, RunError> {
    config.validate()?;
    train_loop(config, dataset, &mut |_| {})
}

fn train_loop(
    config: &ExperimentConfig,
    dataset: &Dataset,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome, RunError> {
    let mut model = MetaModel::new(config)?;
    let mut adam = Adam::new(AdamConfig::with_learning_rate(config.learning_rate), &model.store);
    let mut master = seeded(derive_seed(config.seed, &[stream::TASKS]));
    let mut state = model.initial_state();
    let mut previous_state = state.clone();
    let mut seeds = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut log = Vec::new();
    let mut window = (0.0, 0usize);
    let start = Instant::now();
    for iteration in 1..=config.iterations {
        seeds = (0..config.batch).map(|_| master.next_u64()).collect();
        let tasks = training_tasks(dataset, config, &seeds)?;
        let (loss, grads, next_state) = {
            let mut scope = Scope::new(&model.store);
            let nodes = model.record_batch(&mut scope, &tasks, state.as_ref(), Pass::Train)?;
            if let Err(e) = scope.graph.eval() {
                let GraphError::SingularMatrix { node } = e else { return Err(e.into()) };
                // Tasks are recorded one after another, so the first task
                // whose loss comes after the failing node owns it.
                let bad = nodes.tasks.iter().position(|o| o.loss.index() >= node).unwrap_or(0);
                let per_task = vec![f64::NAN; nodes.tasks.len()];
                let diagnostic = dump_diagnostic(config, iteration, &seeds, &per_task, bad, "singular ridge system");
                return Err(RunError::NonFiniteLoss {
                    iteration,
                    task_seed: seeds[bad],
                    diagnostic,
                });
            }
            let g = &scope.graph;
            let loss = g.value(nodes.loss)?.item();
            if !loss.is_finite() {
                let per_task: Vec<f64> = nodes.tasks.iter().map(|o| g.value(o.loss).unwrap().item()).collect();
                let bad = per_task.iter().position(|l| !l.is_finite()).unwrap_or(0);
                let diagnostic = dump_diagnostic(config, iteration, &seeds, &per_task, bad, "non-finite loss");
                return Err(RunError::NonFiniteLoss {
                    iteration,
                    task_seed: seeds[bad],
                    diagnostic,
                });
            }
            let next = read_state(&scope, nodes.state, state.as_ref())?;
            let grads = scope.graph.backward(nodes.loss)?;
            (loss, scope.param_gradients(&grads), next)
        };
        adam.step(&mut model.store, &grads);
        previous_state = std::mem::replace(&mut state, next_state);
        losses.push(loss);
        window = (window.0 + loss, window.1 + 1);
        if iteration % config.log_every == 0 || iteration == config.iterations {
            let rec = LogRecord {
                iteration,
                loss: window.0 / window.1 as f64,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            on_log(&rec);
            log.push(rec);
            window = (0.0, 0);
        }
    }
    // The carried state is refreshed with the final parameters so that it
    // matches a replay of the last batch.
    let final_state = replay_state(&model, dataset, &seeds, previous_state.as_ref())?;
    let checkpoint = Checkpoint::from_model(
        &model,
        config.iterations as u64,
        RngState::capture(&master),
        final_state,
        Some(ReplayRecord {
            seeds,
            initial: previous_state,
        }),
    );
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        save_checkpoint(&dir.join("checkpoint.bin"), &checkpoint)?;
        write_metrics(&dir.join("metrics.jsonl"), &log)?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        losses,
    })
}

fn read_state(
    scope: &Scope,
    nodes: Option<(crate::autodiff::NodeId, crate::autodiff::NodeId)>,
    fallback: Option<&ContextState>,
) -> Result<Option<ContextState>, RunError> {
    let Some((h, c)) = nodes else {
        return Ok(fallback.cloned());
    };
    let direction = fallback.map_or(Direction::Vanilla, |s| s.direction);
    Ok(Some(ContextState {
        direction,
        h: scope.graph.value(h)?.data().to_vec(),
        c: scope.graph.value(c)?.data().to_vec(),
    }))
}

fn replay_state(
    model: &MetaModel,
    dataset: &Dataset,
    seeds: &[u64],
    initial: Option<&ContextState>,
) -> Result<Option<ContextState>, RunError> {
    if model.context.is_none() {
        return Ok(None);
    }
    let tasks = training_tasks(dataset, &model.config, seeds)?;
    let mut scope = Scope::frozen(&model.store);
    let nodes = model.record_batch(&mut scope, &tasks, initial, Pass::Train)?;
    scope.graph.eval()?;
    let fresh = model.initial_state();
    read_state(&scope, nodes.state, initial.or(fresh.as_ref()))
}

/// Recomputes the context state of a checkpoint by running its final
/// training batch forward from the recorded initial state.
pub fn replay_batch(ckpt: &Checkpoint) -> Result<Option<ContextState>, RunError> {
    let replay = ckpt
        .replay
        .as_ref()
        .ok_or_else(|| RunError::Checkpoint("no replay record".into()))?;
    let model = ckpt.model()?;
    let dataset = load_dataset(&ckpt.config)?;
    replay_state(&model, &dataset, &replay.seeds, replay.initial.as_ref())
}

fn dump_diagnostic(
    config: &ExperimentConfig,
    iteration: usize,
    seeds: &[u64],
    per_task: &[f64],
    bad: usize,
    reason: &str,
) -> Option<PathBuf> {
    let dir = config.out_dir.as_ref()?;
    let record = serde_json::json!({
        "reason": reason,
        "iteration": iteration,
        "task_seed": seeds[bad],
        "batch_seeds": seeds,
        "task_losses": per_task.iter().map(|l| l.to_string()).collect::<Vec<_>>(),
        "config": config,
    });
    let path = dir.join("diagnostic.json");
    fs::create_dir_all(dir).ok()?;
    fs::write(&path, serde_json::to_vec_pretty(&record).ok()?).ok()?;
    Some(path)
}

/// Trains with a baseline kernel in place of the inferred one and
/// evaluates the result.
pub fn run_baseline(
    config: &ExperimentConfig,
    kind: KernelKind,
    spec: &EvalSpec,
) -> Result<(TrainOutcome, EvalReport), RunError> {
    run_baseline_observed(config, kind, spec, &mut |_| {})
}

/// [`run_baseline`] that reports training progress to `on_log`.
pub fn run_baseline_observed(
    config: &ExperimentConfig,
    kind: KernelKind,
    spec: &EvalSpec,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<(TrainOutcome, EvalReport), RunError> {
    let mut cfg = config.clone();
    cfg.kernel = kind;
    cfg.validate()?;
    let dataset = load_dataset(&cfg)?;
    let outcome = train_loop(&cfg, &dataset, on_log)?;
    let report = evaluate(&outcome.model, outcome.checkpoint.context.as_ref(), &dataset, spec)?;
    Ok((outcome, report))
}

/// Trains and evaluates one model per basis count. With an output
/// directory the table is also written to `sweep.csv`.
pub fn sweep_basis_count(
    config: &ExperimentConfig,
    bases: &[usize],
    spec: &EvalSpec,
) -> Result<Vec<SweepRow>, RunError> {
    if bases.is_empty() {
        return Err(RunError::InvalidConfig("basis list is empty".into()));
    }
    let dataset = load_dataset(config)?;
    let mut rows = Vec::with_capacity(bases.len());
    for &d in bases {
        let mut cfg = config.clone();
        cfg.bases = d;
        cfg.out_dir = None;
        cfg.validate()?;
        let outcome = meta_train_on(&cfg, &dataset)?;
        let report = evaluate(&outcome.model, outcome.checkpoint.context.as_ref(), &dataset, spec)?;
        rows.push(SweepRow {
            bases: d,
            metric: report.mean,
            ci95: report.ci95,
        });
    }
    if let Some(dir) = &config.out_dir {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
        write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    }
    Ok(rows)
}
