//! Uplink NOMA simulator for multiple active STAR-RIS deployments with
//! DDPG and Meta-DDPG resource allocation.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod channel;
pub mod error;
pub mod harness;
pub mod kv;
pub mod mdp;
pub mod neural;
pub mod physics;

pub use agents::{
    train, AgentBundle, AgentConfig, AgentKind, Batch, EpisodeStats, MetaState, Reduction, ReplayBuffer,
    TrainOptions, TrainOutcome,
};
pub use channel::{sample_channels, ChannelSet, PathLoss, Side, Topology};
pub use error::{Error, Result};
pub use harness::{
    compare, complexity_report, export, import, run_experiment, run_experiment_with, run_seed, sweep, Comparison, ComplexityReport,
    ExperimentConfig, Metric, MetricsLog, Profile, Scenario, SweepVariable,
};
pub use kv::KvFile;
pub use mdp::{ActionLayout, EnvConfig, Environment, Fading, StateVector, Transition};
pub use neural::{flops_count, Activation, DenseNet, Optimizer};
pub use physics::{
    effective_channel, rate_report, sinr, Constraint, FeasibleAction, NumeratorForm, RateReport,
    StarRisProfile,
};
