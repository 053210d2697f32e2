//! Pre-training loop, Adam, and the free-latent convergence harness.

pub mod adam;
mod pretrain;
pub mod theorem;

pub use adam::{adam_step, AdamState};
pub use pretrain::{graph_target, pretrain, Trainer, TrainingData};
pub use theorem::{optimize_free_latent, verify_theorem, TheoremOptions, TheoremReport, TrialReport};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::fingerprint::FingerprintParams;
use crate::loss::{LatentSimilarityConfig, LossError};
use crate::similarity::{FusionWeights, SelfPair, SimilarityError, FUSION_PRESETS};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("missing modality: {0}")]
    MissingModality(String),
    #[error("batch {batch} of epoch {epoch} has no annotated carbon atoms")]
    EmptyNodePool { epoch: u32, batch: u32 },
    #[error("no convergence: max deviation {:.3e}, worst gradient norm {:.3e}", .0.max_softmax_deviation, worst_grad(.0))]
    NonConvergence(Box<TheoremReport>),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

fn worst_grad(r: &TheoremReport) -> f64 {
    r.trial_reports.iter().map(|t| t.grad_norm).fold(0.0, f64::max)
}

/// Which pools contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Graph,
    Node,
    Bilevel,
}

impl Level {
    pub fn uses_graph(self) -> bool {
        matches!(self, Level::Graph | Level::Bilevel)
    }

    pub fn uses_node(self) -> bool {
        matches!(self, Level::Node | Level::Bilevel)
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Graph => "graph",
            Level::Node => "node",
            Level::Bilevel => "bilevel",
        })
    }
}

impl FromStr for Level {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "graph" => Ok(Level::Graph),
            "node" => Ok(Level::Node),
            "bilevel" => Ok(Level::Bilevel),
            _ => Err(TrainError::Config(format!("unknown level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub level: Level,
    pub fusion: FusionWeights,
    pub seed: u64,
    pub latent: LatentSimilarityConfig,
    /// ppm similarity offset and scale.
    pub tau1: f64,
    pub tau2: f64,
    pub self_pair: SelfPair,
    /// Renormalize fusion over the modalities each pair actually has,
    /// instead of failing on a missing vector.
    pub permissive_missing: bool,
    pub fingerprint: FingerprintParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            epochs: 200,
            batch_size: 256,
            level: Level::Graph,
            fusion: FusionWeights::from_array(FUSION_PRESETS[3].1).expect("preset"),
            seed: 0,
            latent: LatentSimilarityConfig::default(),
            tau1: 1.0,
            tau2: 1.0,
            self_pair: SelfPair::Include,
            permissive_missing: false,
            fingerprint: FingerprintParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.tau1 > 0.0 && self.tau2 > 0.0) {
            return Err(SimilarityError::NonPositiveTemperature { tau1: self.tau1, tau2: self.tau2 }.into());
        }
        FusionWeights::from_array(self.fusion.as_array())?;
        FingerprintParams::new(self.fingerprint.radius(), self.fingerprint.n_bits())
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.latent.validate()?;
        Ok(())
    }
}

/// One optimizer step in the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: u32,
    pub batch: u32,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean batch loss per epoch, in epoch order.
pub fn epoch_means(history: &[BatchRecord]) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64, usize)> = Vec::new();
    for r in history {
        match out.last_mut() {
            Some((e, s, c)) if *e == r.epoch => {
                *s += r.loss;
                *c += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, c)| (e, s / c as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size), (0.001, 200, 256));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { tau1: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn level_round_trip() {
        for l in [Level::Graph, Level::Node, Level::Bilevel] {
            assert_eq!(l.to_string().parse::<Level>().unwrap(), l);
        }
        assert!("edge".parse::<Level>().is_err());
    }

    #[test]
    fn epoch_means_group_consecutive() {
        let r = |epoch, loss| BatchRecord { epoch, batch: 0, loss, grad_norm: 0.0 };
        let h = [r(0, 1.0), r(0, 3.0), r(1, 5.0)];
        assert_eq!(epoch_means(&h), vec![(0, 2.0), (1, 5.0)]);
    }
}
