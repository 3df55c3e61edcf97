//! Distributed training: one worker per rank, periodic ghost exchange with
//! anchor-normalized pressure, and asymmetric master/slave weighting.

mod driver;
mod exchange;
mod optim;
mod rank;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::decomposition::DecompositionError;
use crate::network::NetworkError;
use crate::physics::{LossParts, LossWeights, PhysicsError};

pub use driver::{
    setup_ranks, train, write_loss_history, EpochEvent, RunSetup, Trace, TraceOptions,
    TracedMessage, TrainOutput,
};
pub use exchange::{
    anchor_normalize, apply_message, exchange_ghosts, make_messages, outgoing_requests,
    GhostMessage, GhostRequest,
};
pub use optim::{clip_global_norm, global_norm, lr_at, optimizer_step, AdamState};
pub use rank::{
    compute_gradients, train_epoch, EpochReport, GhostCache, RankState, Role, TapeCache,
};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at rank {rank}, epoch {epoch}: {parts:?}")]
    NonFiniteLoss {
        rank: usize,
        epoch: usize,
        parts: LossParts,
    },
    #[error("non-finite gradient in tensor {tensor} at flat index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("missing anchor pressure for time {0}")]
    MissingAnchor(f64),
    #[error("rank {rank} deadlocked waiting for {interface}")]
    Deadlock { rank: usize, interface: String },
    #[error("rank {0} stopped because another rank failed")]
    Aborted(usize),
    #[error("rank {rank} failed: {source}")]
    RankFailed {
        rank: usize,
        #[source]
        source: Box<RuntimeError>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How the pressure gauge is coupled across spatial interfaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaugeProtocol {
    /// Masters send anchor-normalized pressure and ignore spatial ghost pressure.
    #[default]
    Anchored,
    /// Raw pressure everywhere, same spatial ghost-pressure weight on every rank.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Mini-batch size per rank, applied to each dataset independently.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_interval: usize,
    /// Exchange every this many epochs.
    pub comm_interval: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub weights: LossWeights,
    /// Spatial anchor point.
    pub anchor: Vec<f64>,
    #[serde(default)]
    pub gauge: GaugeProtocol,
    /// Seconds a rank waits for a ghost message before reporting a deadlock.
    #[serde(default = "default_exchange_timeout")]
    pub exchange_timeout_s: f64,
}

fn default_exchange_timeout() -> f64 {
    600.0
}

impl TrainConfig {
    pub fn validate(&self, time_splits: usize) -> Result<(), RuntimeError> {
        if self.epochs == 0 || self.batch_size == 0 || self.comm_interval == 0 || self.lr_interval == 0 {
            return Err(RuntimeError::Config(
                "epochs, batch size, communication interval and lr interval must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite() && self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return Err(RuntimeError::Config("learning rate and decay factor must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(RuntimeError::Config("clip norm must be positive".into()));
            }
        }
        self.weights.validate()?;
        if time_splits > 1 && self.weights.ghost_p_time <= 0.0 {
            return Err(RuntimeError::Config(
                "temporal ghost pressure weight must be positive when time is split".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr, self.lr_factor, self.lr_interval)
    }
}

/// Weights a rank actually trains with.
pub fn effective_weights(base: &LossWeights, role: Role, gauge: GaugeProtocol) -> LossWeights {
    let mut w = base.clone();
    if role == Role::Master && gauge == GaugeProtocol::Anchored {
        w.ghost_p_space = 0.0;
    }
    w
}
