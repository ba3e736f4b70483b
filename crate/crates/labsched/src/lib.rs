//! Offline reinforcement learning for ICU lab-test measurement scheduling.
//!
//! The pipeline: `cohort` generates synthetic episodic EHR data with a known
//! ground-truth severity process; `trajectory` trains an LSTM mortality model
//! whose hidden states and probabilities drive everything downstream;
//! `experience` converts logged stays into per-step / time-passing RL tuples;
//! `agents` trains scheduling policies (BC, dueling DQN, CQL, IQL) on a fixed
//! replay buffer; `policyeval` executes policies and scores them with a
//! regression-based off-policy estimator; `harness` orchestrates sweeps and
//! emits cost-vs-gain frontier reports.

pub mod agents;
pub mod cohort;
pub mod experience;
pub mod harness;
pub mod policyeval;
pub mod trajectory;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] numkernel::KernelError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training error: {0}")]
    Train(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// In-place Fisher–Yates. Hand-rolled so shuffles stay stable across
/// dependency upgrades; reproducibility of generated experience depends on it.
pub fn shuffle<T>(rng: &mut rand_chacha::ChaCha8Rng, items: &mut [T]) {
    use rand::Rng;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
