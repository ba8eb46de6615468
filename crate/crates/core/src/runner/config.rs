use std::path::PathBuf;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::RunError;
use crate::kernels::ScaleMode;
use crate::tasks::QUERIES_PER_CLASS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    Sine,
    Omniglot,
    Blobs,
}

impl TaskFamily {
    pub fn is_classification(self) -> bool {
        self != TaskFamily::Sine
    }
}

/// How the posterior over frequencies is conditioned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// The pooled support embedding feeds the posterior directly.
    None,
    Lstm,
    Bilstm,
}

/// Kernel used by the ridge base-learner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// Frequencies sampled per task from the inferred posterior.
    MetaVrf,
    /// Frequencies drawn once from a standard normal and kept fixed.
    FixedRff,
    /// Gaussian kernel with the mean pairwise support distance as bandwidth.
    ExactRbf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSettings {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for BlobSettings {
    fn default() -> Self {
        Self {
            classes: 100,
            dim: 16,
            separation: 6.0,
        }
    }
}

/// Network widths. An empty `embed` list selects the convolutional
/// embedder for image inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed: Vec<usize>,
    pub conv_channels: usize,
    pub keep_prob: f64,
    pub context_hidden: usize,
    pub net_hidden: usize,
    pub posterior_layers: usize,
    pub prior_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: TaskFamily,
    pub ways: usize,
    pub shots: usize,
    /// Query points per task for regression, per class for classification.
    pub queries: usize,
    pub bases: usize,
    pub mode: InferenceMode,
    pub kernel: KernelKind,
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
    pub scale_mode: ScaleMode,
    pub blobs: BlobSettings,
    pub dims: ModelDims,
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for a task family.
    pub fn for_family(family: TaskFamily) -> Self {
        match family {
            TaskFamily::Sine => Self::sine(),
            TaskFamily::Blobs => Self::blobs(),
            TaskFamily::Omniglot => Self::omniglot(),
        }
    }

    /// 10-shot sine regression, 20 000 iterations of 6 tasks.
    pub fn sine() -> Self {
        Self {
            family: TaskFamily::Sine,
            ways: 1,
            shots: 10,
            queries: 10,
            bases: 780,
            mode: InferenceMode::Bilstm,
            kernel: KernelKind::MetaVrf,
            iterations: 20_000,
            batch: 6,
            learning_rate: 1e-4,
            seed: 0,
            log_every: 100,
            scale_mode: ScaleMode::default(),
            blobs: BlobSettings::default(),
            dims: ModelDims {
                embed: vec![1, 40, 40],
                conv_channels: 0,
                keep_prob: 1.0,
                context_hidden: 40,
                net_hidden: 40,
                posterior_layers: 2,
                prior_layers: 2,
            },
            data_root: None,
            out_dir: None,
        }
    }

    /// 5-way 1-shot on synthetic Gaussian blobs, 5 000 iterations of 8 tasks.
    pub fn blobs() -> Self {
        let blobs = BlobSettings::default();
        Self {
            family: TaskFamily::Blobs,
            ways: 5,
            shots: 1,
            queries: QUERIES_PER_CLASS,
            iterations: 5_000,
            batch: 8,
            dims: ModelDims {
                embed: vec![blobs.dim, 64, 64],
                conv_channels: 0,
                keep_prob: 1.0,
                context_hidden: 64,
                net_hidden: 64,
                posterior_layers: 2,
                prior_layers: 2,
            },
            blobs,
            ..Self::sine()
        }
    }

    /// 5-way 1-shot Omniglot, 10 000 iterations of 6 tasks.
    pub fn omniglot() -> Self {
        Self {
            family: TaskFamily::Omniglot,
            ways: 5,
            shots: 1,
            queries: QUERIES_PER_CLASS,
            iterations: 10_000,
            batch: 6,
            dims: ModelDims {
                embed: Vec::new(),
                conv_channels: 64,
                keep_prob: 0.9,
                context_hidden: 256,
                net_hidden: 256,
                posterior_layers: 3,
                prior_layers: 2,
            },
            ..Self::sine()
        }
    }

    /// Changes the blob input width and keeps the embedder input in step.
    pub fn with_blob_dim(mut self, dim: usize) -> Self {
        self.blobs.dim = dim;
        if let Some(first) = self.dims.embed.first_mut() {
            *first = dim;
        }
        self
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::InvalidConfig(m.to_string()));
        if self.bases == 0 {
            return bad("basis count must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must hold at least one task");
        }
        if self.shots == 0 {
            return bad("shots must be at least 1");
        }
        if self.queries == 0 {
            return bad("queries must be at least 1");
        }
        if self.log_every == 0 {
            return bad("log interval must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        match self.family {
            TaskFamily::Sine => {
                if self.ways != 1 {
                    return bad("regression tasks have exactly one output");
                }
                if self.dims.embed.first() != Some(&1) {
                    return bad("sine embedder must take scalar inputs");
                }
            }
            TaskFamily::Blobs => {
                if self.ways < 2 {
                    return bad("classification needs at least two ways");
                }
                if self.dims.embed.first() != Some(&self.blobs.dim) {
                    return bad("blob embedder input width must equal the blob dimension");
                }
                if !(self.blobs.separation >= 0.0) {
                    return bad("blob separation must be non-negative");
                }
            }
            TaskFamily::Omniglot => {
                if self.ways < 2 {
                    return bad("classification needs at least two ways");
                }
                if !self.dims.embed.is_empty() {
                    return bad("omniglot uses the convolutional embedder; leave the embed widths empty");
                }
            }
        }
        if self.dims.embed.len() == 1 {
            return bad("embedder needs at least one layer");
        }
        if self.dims.embed.is_empty() && (self.dims.conv_channels == 0 || !(self.dims.keep_prob > 0.0)) {
            return bad("convolutional embedder needs channels and a positive keep probability");
        }
        if self.mode != InferenceMode::None && self.dims.context_hidden == 0 {
            return bad("context hidden width must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_defaults_validate() {
        for f in [TaskFamily::Sine, TaskFamily::Blobs, TaskFamily::Omniglot] {
            let c = ExperimentConfig::for_family(f);
            assert_eq!(c.family, f);
            assert_eq!(c.bases, 780);
            assert_eq!(c.learning_rate, 1e-4);
            c.validate().unwrap();
        }
        assert_eq!(ExperimentConfig::sine().iterations, 20_000);
        assert_eq!(ExperimentConfig::sine().batch, 6);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ExperimentConfig::blobs();
        c.bases = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::blobs();
        c.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::blobs();
        c.blobs.dim = 3;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::blobs().with_blob_dim(3).validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ExperimentConfig::omniglot();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&s).unwrap(), c);
        assert!(s.contains("\"mode\":\"bilstm\"") && s.contains("\"kernel\":\"meta-vrf\""));
    }
}
