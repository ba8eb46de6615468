use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TaskFamily;
use super::model::{stream, MetaModel, Pass};
use super::train::sample_task;
use super::{load_dataset, Dataset, RunError};
use crate::context::ContextState;
use crate::nn::Scope;
use crate::ridge::{accuracy, mse_loss};
use crate::rng::derive_seed;
use crate::tasks::{Outputs, Partition, QueryLayout};

/// Grid points per regression test task.
pub const SINE_TEST_POINTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Mse,
}

/// What to evaluate. Unset fields fall back to the trained configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSpec {
    pub episodes: usize,
    pub ways: Option<usize>,
    pub shots: Option<usize>,
    /// Rejects checkpoints trained on another family.
    pub family: Option<TaskFamily>,
    pub seed: Option<u64>,
    /// Keep per-point regression predictions.
    pub curves: bool,
}

impl EvalSpec {
    pub fn episodes(episodes: usize) -> Self {
        Self {
            episodes,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub task: usize,
    pub x: f64,
    pub y_true: f64,
    pub y_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub values: Vec<f64>,
    pub mean: f64,
    /// `1.96 · s / √N` with the sample standard deviation `s`.
    pub ci95: f64,
    pub episodes: usize,
    #[serde(skip)]
    pub curves: Vec<CurveRow>,
}

impl EvalReport {
    pub fn from_values(metric: Metric, values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * var.sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            metric,
            values,
            mean,
            ci95,
            episodes: n,
            curves: Vec::new(),
        }
    }
}

/// Evaluates a checkpoint on held-out episodes. Only forward passes run:
/// each episode starts from the stored context state.
pub fn meta_test(ckpt: &Checkpoint, spec: &EvalSpec) -> Result<EvalReport, RunError> {
    check_family(ckpt.config.family, spec)?;
    let model = ckpt.model()?;
    let dataset = load_dataset(&ckpt.config)?;
    evaluate(&model, ckpt.context.as_ref(), &dataset, spec)
}

fn check_family(trained: TaskFamily, spec: &EvalSpec) -> Result<(), RunError> {
    match spec.family {
        Some(requested) if requested != trained => Err(RunError::FamilyMismatch { trained, requested }),
        _ => Ok(()),
    }
}

/// Scores `episodes` test tasks with frozen parameters.
pub fn evaluate(
    model: &MetaModel,
    context: Option<&ContextState>,
    dataset: &Dataset,
    spec: &EvalSpec,
) -> Result<EvalReport, RunError> {
    let cfg = &model.config;
    check_family(cfg.family, spec)?;
    if spec.episodes == 0 {
        return Err(RunError::InvalidConfig("at least one episode is required".into()));
    }
    let ways = spec.ways.unwrap_or(cfg.ways);
    let shots = spec.shots.unwrap_or(cfg.shots);
    if cfg.family == TaskFamily::Sine && ways != 1 {
        return Err(RunError::InvalidConfig("regression tasks have exactly one output".into()));
    }
    let (queries, layout, metric) = match cfg.family {
        TaskFamily::Sine => (SINE_TEST_POINTS, QueryLayout::Grid, Metric::Mse),
        _ => (cfg.queries, QueryLayout::Random, Metric::Accuracy),
    };
    let base = derive_seed(spec.seed.unwrap_or(cfg.seed), &[stream::EVAL]);
    let mut values = Vec::with_capacity(spec.episodes);
    let mut curves = Vec::new();
    for e in 0..spec.episodes {
        let seed = derive_seed(base, &[e as u64]);
        let task = sample_task(dataset, Partition::Test, ways, shots, queries, layout, seed)?;
        let mut scope = Scope::frozen(&model.store);
        let nodes = model.record_batch(&mut scope, std::slice::from_ref(&task), context, Pass::Eval)?;
        scope.graph.eval()?;
        let pred = scope.graph.value(nodes.tasks[0].prediction)?;
        let value = match &task.outputs {
            Outputs::Classification { query, .. } => accuracy(pred, query),
            Outputs::Regression { query, .. } => {
                if spec.curves {
                    for (j, (&y, &p)) in query.iter().zip(pred.data()).enumerate() {
                        curves.push(CurveRow {
                            task: e,
                            x: task.query_x.at(j, 0),
                            y_true: y,
                            y_pred: p,
                        });
                    }
                }
                mse_loss(pred, &crate::autodiff::Tensor::row(query.clone()))
                    .map_err(|err| RunError::InvalidConfig(err.to_string()))?
            }
        };
        values.push(value);
    }
    let mut report = EvalReport::from_values(metric, values);
    report.curves = curves;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_interval_formula() {
        let r = EvalReport::from_values(Metric::Accuracy, vec![0.2, 0.4, 0.6, 0.8]);
        assert!((r.mean - 0.5).abs() < 1e-15);
        let s = (((0.3f64).powi(2) * 2.0 + (0.1f64).powi(2) * 2.0) / 3.0).sqrt();
        assert!((r.ci95 - 1.96 * s / 2.0).abs() < 1e-15);
        assert_eq!(r.episodes, 4);
        let one = EvalReport::from_values(Metric::Mse, vec![3.0]);
        assert_eq!((one.mean, one.ci95), (3.0, 0.0));
    }
}
