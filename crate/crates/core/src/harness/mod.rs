//! Synthetic data, training, evaluation and the ablation runner.

pub mod ablate;
pub mod gradcheck;
pub mod metrics;
pub mod pretrain;
pub mod synth;
pub mod train;
