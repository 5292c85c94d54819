//! Multi-modal world model for a procedural push-world: a VQ tokenizer over
//! RGB+depth+mask frames, an action-conditioned autoregressive dynamics
//! transformer, imagined-demonstration rollouts, and an imagined-replay RL
//! harness, plus deterministic dataset/checkpoint persistence.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod metrics;
pub mod rl;
pub mod rollout;
pub mod shard;
pub mod tokenizer;
pub mod transformer;

pub use env::{
    collect_dataset, run_episode, Action, Block, EnvConfig, EnvState, Observation, Policy,
    PushWorld, RandomPolicy, ScriptedExpert, Trajectory, TrajectoryMeta, ACTION_DIM,
};
