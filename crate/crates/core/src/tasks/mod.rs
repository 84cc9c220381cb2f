//! Synthetic problems: few-shot regression and classification episodes, a
//! meta-network transfer task, and the gradient-difference diagnostic.

mod episodes;
mod graddiff;
mod mlp;
mod transfer;

pub use episodes::{
    sample_cluster_episode, sample_cluster_episode_with, sample_sinusoid, sinusoid, ClusterSpec,
    Episode, TaskDescriptor, SINUSOID_AMPLITUDE, SINUSOID_INPUT, SINUSOID_PHASE,
};
pub use graddiff::{grad_diff_series, median, GradDiffSeries, GRAD_NORM_FLOOR};
pub use mlp::{
    accuracy, cross_entropy, mse, Activation, CrossEntropyObjective, Forward, Mlp, MseObjective,
};
pub use transfer::{
    transfer_losses, LinearLabeler, TransferLoss, TransferObjective, TransferSpec, TransferTask,
};
