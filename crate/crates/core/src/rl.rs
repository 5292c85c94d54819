//! Model-based RL harness: real replay buffer, imagined replay buffer
//! filled by world-model branches, a pixel actor–critic updated on the
//! union, plus behavior cloning on demonstration trajectories.

use crate::env::{Action, EnvState, Observation, Policy, PushWorld, RandomPolicy, Trajectory};
use crate::env::{run_episode, ACTION_DIM};
use crate::rollout::{RolloutConfig, RolloutEngine, RolloutError};
use crate::tokenizer::{
    normalized_frames, train_tokenizer, NormalizedObs, Tokenizer, TokenizerError,
    TokenizerTrainConfig,
};
use crate::transformer::{
    tokenize_trajectory, train_world_model, Transformer, TransformerError, WmTrainConfig,
};
use mowm_autograd::{
    mix_seed, Adam, AdamConfig, Graph, Init, ParamStore, Rng, Tensor, TensorError, Var,
};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("autograd: {0}")]
    Autograd(#[from] TensorError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("world model: {0}")]
    Transformer(#[from] TransformerError),
    #[error("rollout: {0}")]
    Rollout(#[from] RolloutError),
    #[error("config: {0}")]
    Config(String),
    #[error("origin mismatch: {buffer:?} buffer refused a {transition:?} transition")]
    OriginMismatch { buffer: Origin, transition: Origin },
    #[error("batch of {need} requested from {have} stored transitions")]
    InsufficientData { need: usize, have: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("run diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Imagined,
}

/// Compactly stored normalized observation: RGB and mask quantized to
/// u8, depth kept exact.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedObs {
    pub h: usize,
    pub w: usize,
    rgb: Vec<u8>,
    depth: Vec<f32>,
    mask: Vec<u8>,
}

impl PackedObs {
    pub fn from_normalized(obs: &NormalizedObs) -> Self {
        Self {
            h: obs.h,
            w: obs.w,
            rgb: obs.rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
            depth: obs.depth.clone(),
            mask: obs.mask.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        }
    }

    pub fn from_observation(obs: &Observation, depth_scale: f32) -> Self {
        Self::from_normalized(&NormalizedObs::from_observation(obs, depth_scale))
    }

    pub fn to_normalized(&self) -> NormalizedObs {
        NormalizedObs {
            h: self.h,
            w: self.w,
            rgb: self.rgb.iter().map(|&v| v as f32 / 255.0).collect(),
            depth: self.depth.clone(),
            mask: self.mask.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Network input planes [5·h·w]: rgb, depth, mask, all in [0,1].
    pub fn planes(&self) -> Vec<f32> {
        let hw = self.h * self.w;
        let mut out = Vec::with_capacity(5 * hw);
        out.extend(self.rgb.iter().map(|&v| v as f32 / 255.0));
        out.extend_from_slice(&self.depth);
        out.extend(self.mask.iter().map(|&v| v as f32));
        out
    }
}

/// Network input planes straight from a live observation (no
/// quantization round-trip).
pub fn obs_planes(obs: &Observation, depth_scale: f32) -> Vec<f32> {
    let hw = obs.h * obs.w;
    let mut out = Vec::with_capacity(5 * hw);
    out.extend_from_slice(&obs.rgb);
    out.extend(obs.depth.iter().map(|d| d / depth_scale));
    out.extend_from_slice(&obs.mask);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: PackedObs,
    pub action: Action,
    pub reward: f32,
    pub next: PackedObs,
    pub done: bool,
    pub origin: Origin,
}

/// FIFO replay buffer holding transitions of exactly one origin.
pub struct ReplayBuffer {
    capacity: usize,
    origin: Origin,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, origin: Origin) -> Self {
        Self { capacity, origin, items: VecDeque::new() }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.origin != self.origin {
            return Err(RlError::OriginMismatch { buffer: self.origin, transition: t.origin });
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// `k` distinct indices, uniform without replacement.
    fn sample_indices(&self, k: usize, rng: &mut Rng) -> Vec<usize> {
        let n = self.items.len();
        debug_assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        let mut out = Vec::with_capacity(k);
        for i in 0..k {
            let j = i + rng.below(n - i);
            pool.swap(i, j);
            out.push(pool[i]);
        }
        out
    }
}

/// Draws ⌈ratio·n⌉ real and the rest imagined transitions; an empty or
/// short split falls back to the other one (flagged so callers can log a
/// warning).
pub fn sample_batch<'a>(
    real: &'a ReplayBuffer,
    imagined: &'a ReplayBuffer,
    n: usize,
    ratio: f32,
    rng: &mut Rng,
) -> Result<(Vec<&'a Transition>, bool)> {
    let combined = real.len() + imagined.len();
    if n == 0 || n > combined {
        return Err(RlError::InsufficientData { need: n, have: combined });
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(RlError::Config(format!("real:imagined ratio {ratio} outside [0,1]")));
    }
    let want_real = ((ratio * n as f32).ceil() as usize).min(n);
    let want_imag = n - want_real;
    // Shift any deficit to the other split (combined >= n guarantees room).
    let take_real = want_real.min(real.len());
    let take_imag = want_imag.min(imagined.len());
    let deficit = n - take_real - take_imag;
    let take_real = (take_real + deficit).min(real.len());
    let take_imag = n - take_real;
    let fallback = take_real != want_real || take_imag != want_imag;
    let mut out = Vec::with_capacity(n);
    for i in real.sample_indices(take_real, rng) {
        out.push(real.get(i));
    }
    for i in imagined.sample_indices(take_imag, rng) {
        out.push(imagined.get(i));
    }
    debug_assert_eq!(out.len(), n);
    Ok((out, fallback))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ActorCriticConfig {
    pub enc_channels: [usize; 3],
    pub hidden: usize,
    pub gamma: f32,
    /// Polyak averaging rate for the target critic/encoder.
    pub tau: f32,
    pub actor_lr: f32,
    pub critic_lr: f32,
    /// Exploration noise scale as a fraction of the action bound.
    pub noise_sigma: f32,
    /// Absolute per-axis action bound (the env step limit).
    pub max_action: f32,
}

impl Default for ActorCriticConfig {
    fn default() -> Self {
        Self {
            enc_channels: [16, 32, 32],
            hidden: 128,
            gamma: 0.99,
            tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            noise_sigma: 0.1,
            max_action: 0.05,
        }
    }
}

pub struct UpdateLosses {
    pub critic: f32,
    pub actor: f32,
}

/// Deterministic-policy TD learner on pixels: shared conv encoder, actor
/// and critic heads, lagged target copy of the encoder+critic.
pub struct ActorCritic {
    pub cfg: ActorCriticConfig,
    pub h: usize,
    pub w: usize,
    pub store: ParamStore,
    target: ParamStore,
    opt_actor: Adam,
    opt_critic: Adam,
}

impl ActorCritic {
    pub fn new(cfg: ActorCriticConfig, h: usize, w: usize, seed: u64) -> Result<Self> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(RlError::Config(format!("{h}x{w} observations must be multiples of 8")));
        }
        let mut rng = Rng::seed_from_u64(mix_seed(seed, 0xAC00));
        let mut store = ParamStore::new();
        let [c1, c2, c3] = cfg.enc_channels;
        let feat = c3 * (h / 8) * (w / 8);
        let conv = |s: &mut ParamStore, rng: &mut Rng, name: &str, co: usize, ci: usize| {
            s.init(&format!("{name}.w"), &[co, ci, 3, 3], Init::Kaiming { fan_in: ci * 9 }, rng);
            s.init(&format!("{name}.b"), &[co], Init::Zeros, rng);
        };
        conv(&mut store, &mut rng, "ac.enc.c1", c1, 5);
        conv(&mut store, &mut rng, "ac.enc.c2", c2, c1);
        conv(&mut store, &mut rng, "ac.enc.c3", c3, c2);
        let lin = |s: &mut ParamStore, rng: &mut Rng, name: &str, i: usize, o: usize| {
            s.init(&format!("{name}.w"), &[i, o], Init::Xavier { fan_in: i, fan_out: o }, rng);
            s.init(&format!("{name}.b"), &[o], Init::Zeros, rng);
        };
        lin(&mut store, &mut rng, "ac.actor.l1", feat, cfg.hidden);
        lin(&mut store, &mut rng, "ac.actor.l2", cfg.hidden, ACTION_DIM);
        lin(&mut store, &mut rng, "ac.critic.l1", feat + ACTION_DIM, cfg.hidden);
        lin(&mut store, &mut rng, "ac.critic.l2", cfg.hidden, 1);

        // Target: lagged copy of the encoder and critic.
        let mut target = ParamStore::new();
        for (_, name, tensor) in store.iter() {
            if name.starts_with("ac.enc.") || name.starts_with("ac.critic.") {
                target.add(name, tensor.clone())?;
            }
        }
        let opt_actor = Adam::new(AdamConfig { lr: cfg.actor_lr, ..AdamConfig::default() });
        let opt_critic = Adam::new(AdamConfig { lr: cfg.critic_lr, ..AdamConfig::default() });
        Ok(Self { cfg, h, w, store, target, opt_actor, opt_critic })
    }

    pub fn target_store(&self) -> &ParamStore {
        &self.target
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore, name: &str, trainable: bool) -> Var {
        let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if trainable {
            g.param(store, id)
        } else {
            g.param_frozen(store, id)
        }
    }

    /// Conv encoder: [B,5,h,w] -> [B, feat].
    fn features(&self, g: &mut Graph, store: &ParamStore, trainable: bool, x: Var) -> Result<Var> {
        let [_, _, c3] = self.cfg.enc_channels;
        let mut h = x;
        for name in ["ac.enc.c1", "ac.enc.c2", "ac.enc.c3"] {
            let w = self.bind(g, store, &format!("{name}.w"), trainable);
            let b = self.bind(g, store, &format!("{name}.b"), trainable);
            h = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.silu(h);
        }
        let shape = g.val(h).shape().to_vec();
        let feat = c3 * shape[2] * shape[3];
        Ok(g.reshape(h, &[shape[0], feat])?)
    }

    fn actor_out(&self, g: &mut Graph, trainable: bool, feat: Var) -> Result<Var> {
        let w1 = self.bind(g, &self.store, "ac.actor.l1.w", trainable);
        let b1 = self.bind(g, &self.store, "ac.actor.l1.b", trainable);
        let w2 = self.bind(g, &self.store, "ac.actor.l2.w", trainable);
        let b2 = self.bind(g, &self.store, "ac.actor.l2.b", trainable);
        let h = g.linear(feat, w1, Some(b1))?;
        let h = g.silu(h);
        let h = g.linear(h, w2, Some(b2))?;
        let h = g.tanh(h);
        Ok(g.mul_scalar(h, self.cfg.max_action))
    }

    fn critic_out(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        feat: Var,
        action: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(feat, action)?;
        let w1 = self.bind(g, store, "ac.critic.l1.w", trainable);
        let b1 = self.bind(g, store, "ac.critic.l1.b", trainable);
        let w2 = self.bind(g, store, "ac.critic.l2.w", trainable);
        let b2 = self.bind(g, store, "ac.critic.l2.b", trainable);
        let h = g.linear(x, w1, Some(b1))?;
        let h = g.silu(h);
        Ok(g.linear(h, w2, Some(b2))?)
    }

    fn batch_tensors(&self, batch: &[&Transition]) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
        let b = batch.len();
        let hw = self.h * self.w;
        let mut obs = Vec::with_capacity(b * 5 * hw);
        let mut next = Vec::with_capacity(b * 5 * hw);
        let mut act = Vec::with_capacity(b * ACTION_DIM);
        let mut rew = Vec::with_capacity(b);
        let mut cont = Vec::with_capacity(b);
        for t in batch {
            if t.obs.h != self.h || t.obs.w != self.w {
                return Err(RlError::Config(format!(
                    "transition of {}x{} in a {}x{} learner",
                    t.obs.h, t.obs.w, self.h, self.w
                )));
            }
            obs.extend(t.obs.planes());
            next.extend(t.next.planes());
            act.extend_from_slice(&t.action);
            rew.push(t.reward);
            cont.push(if t.done { 0.0 } else { self.cfg.gamma });
        }
        Ok((
            Tensor::new(vec![b, 5, self.h, self.w], obs)?,
            Tensor::new(vec![b, 5, self.h, self.w], next)?,
            Tensor::new(vec![b, ACTION_DIM], act)?,
            Tensor::new(vec![b, 1], rew)?,
            Tensor::new(vec![b, 1], cont)?,
        ))
    }

    /// TD targets r + γ·(1−done)·Q_target(next, π(next)), as a [B,1]
    /// tensor computed without gradients.
    pub fn td_targets(&self, batch: &[&Transition]) -> Result<Tensor> {
        let (_, next, _, rew, cont) = self.batch_tensors(batch)?;
        let mut g = Graph::inference();
        let x = g.constant(next);
        let feat = self.features(&mut g, &self.target, false, x)?;
        let a = self.actor_out(&mut g, false, feat)?;
        let q = self.critic_out(&mut g, &self.target, false, feat, a)?;
        let r = g.constant(rew);
        let k = g.constant(cont);
        let disc = g.mul(k, q)?;
        let y = g.add(r, disc)?;
        Ok(g.val(y).clone())
    }

    /// One TD step: critic regression to the lagged target, actor ascent
    /// on the critic, Polyak update of the target copy.  Encoder
    /// gradients flow only through the critic loss.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateLosses> {
        if batch.is_empty() {
            return Err(RlError::InsufficientData { need: 1, have: 0 });
        }
        let y = self.td_targets(batch)?;
        if !y.is_finite() {
            return Err(RlError::Diverged("non-finite TD target".into()));
        }
        let (obs, _, act, _, _) = self.batch_tensors(batch)?;

        let critic = {
            let mut g = Graph::new();
            let x = g.constant(obs.clone());
            let feat = self.features(&mut g, &self.store, true, x)?;
            let a = g.constant(act);
            let q = self.critic_out(&mut g, &self.store, true, feat, a)?;
            let tgt = g.constant(y);
            let loss = g.mse_loss(q, tgt)?;
            let val = g.val(loss).item()?;
            if !val.is_finite() {
                return Err(RlError::Diverged(format!("critic loss {val}")));
            }
            let grads = g.backward(loss)?;
            self.opt_critic.step(&mut self.store, &g, &grads)?;
            val
        };

        let actor = {
            let mut g = Graph::new();
            let x = g.constant(obs);
            // Detached encoder: the actor head trains against frozen
            // features and a frozen critic.
            let feat = self.features(&mut g, &self.store, false, x)?;
            let a = self.actor_out(&mut g, true, feat)?;
            let q = self.critic_out(&mut g, &self.store, false, feat, a)?;
            let mean_q = g.mean_all(q);
            let loss = g.mul_scalar(mean_q, -1.0);
            let val = g.val(loss).item()?;
            if !val.is_finite() {
                return Err(RlError::Diverged(format!("actor loss {val}")));
            }
            let grads = g.backward(loss)?;
            self.opt_actor.step(&mut self.store, &g, &grads)?;
            val
        };

        self.polyak();
        Ok(UpdateLosses { critic, actor })
    }

    /// target ← (1−τ)·target + τ·main, for every target-tracked tensor.
    fn polyak(&mut self) {
        let tau = self.cfg.tau;
        let names: Vec<String> = self.target.sorted_names().iter().map(|s| s.to_string()).collect();
        for name in names {
            let src = self.store.get_by_name(&name).expect("target tracks main").clone();
            let id = self.target.id(&name).unwrap();
            let dst = self.target.get_mut(id);
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = (1.0 - tau) * *d + tau * *s;
            }
        }
    }

    /// Deterministic action for normalized input planes.
    pub fn act_planes(&self, planes: &[f32]) -> Result<Action> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![1, 5, self.h, self.w], planes.to_vec())?);
        let feat = self.features(&mut g, &self.store, false, x)?;
        let a = self.actor_out(&mut g, false, feat)?;
        Ok(g.val(a).data().to_vec())
    }

    /// Action with exploration noise, clipped to the action bound.
    pub fn act_noisy(&self, planes: &[f32], sigma: f32, rng: &mut Rng) -> Result<Action> {
        let mut a = self.act_planes(planes)?;
        let bound = self.cfg.max_action;
        for v in &mut a {
            *v = (*v + sigma * bound * rng.normal()).clamp(-bound, bound);
        }
        Ok(a)
    }
}

/// Wraps the actor as an environment policy; `sigma = 0` is the
/// evaluation (noise-free) policy.
pub struct AcPolicy<'a> {
    pub ac: &'a ActorCritic,
    pub sigma: f32,
    pub depth_scale: f32,
}

impl Policy for AcPolicy<'_> {
    fn act(&mut self, _state: &EnvState, obs: &Observation, rng: &mut Rng) -> Action {
        let planes = obs_planes(obs, self.depth_scale);
        if self.sigma > 0.0 {
            self.ac.act_noisy(&planes, self.sigma, rng).expect("actor forward")
        } else {
            self.ac.act_planes(&planes).expect("actor forward")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOutcome {
    pub success_rate: f32,
    pub mean_return: f32,
}

/// Deterministic evaluation: fixed per-episode seeds, no exploration
/// noise; success means the episode ended with the goal bonus.
pub fn evaluate_policy(
    policy: &mut dyn Policy,
    env: &PushWorld,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if n_episodes == 0 {
        return Err(RlError::Config("need at least one evaluation episode".into()));
    }
    let mut successes = 0usize;
    let mut returns = 0.0f32;
    for ep in 0..n_episodes {
        let traj = run_episode(env, policy, mix_seed(seed, ep as u64), env.cfg.horizon);
        if traj.rewards.iter().any(|&r| r > 0.0) {
            successes += 1;
        }
        returns += traj.rewards.iter().sum::<f32>();
    }
    Ok(EvalOutcome {
        success_rate: successes as f32 / n_episodes as f32,
        mean_return: returns / n_episodes as f32,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MbpoConfig {
    pub iterations: usize,
    pub env_steps_per_iter: usize,
    /// Imagined rollout length k.
    pub model_rollout_len: usize,
    /// Imagined branch starts per iteration; 0 disables imagination
    /// (the pure model-free baseline).
    pub imagined_branches: usize,
    /// Fraction of each policy batch drawn from the real buffer.
    pub real_ratio: f32,
    pub updates_per_iter: usize,
    pub batch_size: usize,
    /// Real steps collected with random actions before policy control.
    pub warmup_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// World-model fine-tuning period in iterations; 0 = never.
    pub wm_finetune_every: usize,
    pub wm_finetune_steps: usize,
    pub tok_finetune_steps: usize,
    pub real_capacity: usize,
    pub imagined_capacity: usize,
    /// Episodes kept for world-model fine-tuning.
    pub episode_log: usize,
    /// Abort when model loss exceeds this multiple of its initial value.
    pub divergence_factor: f32,
    pub rollout: RolloutConfig,
    pub ac: ActorCriticConfig,
    pub bc: BcConfig,
}

impl Default for MbpoConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            env_steps_per_iter: 500,
            model_rollout_len: 5,
            imagined_branches: 20,
            real_ratio: 0.5,
            updates_per_iter: 500,
            batch_size: 64,
            warmup_steps: 1000,
            eval_every: 2,
            eval_episodes: 20,
            wm_finetune_every: 0,
            wm_finetune_steps: 200,
            tok_finetune_steps: 100,
            real_capacity: 20_000,
            imagined_capacity: 20_000,
            episode_log: 40,
            divergence_factor: 10.0,
            rollout: RolloutConfig::default(),
            ac: ActorCriticConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MbpoLogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub success_rate: f32,
    pub mean_return: f32,
    pub critic_loss: f32,
    pub actor_loss: f32,
    pub model_ce: f32,
}

#[derive(Debug, Clone, Default)]
pub struct MbpoReport {
    pub rows: Vec<MbpoLogRow>,
    pub env_steps: usize,
    pub final_success: f32,
}

/// Prefix of a trajectory with at most `max_frames` observations.
pub fn truncate_frames(traj: &Trajectory, max_frames: usize) -> Trajectory {
    if traj.observations.len() <= max_frames {
        return traj.clone();
    }
    let n = max_frames.max(2);
    Trajectory {
        observations: traj.observations[..n].to_vec(),
        actions: traj.actions[..n - 1].to_vec(),
        rewards: traj.rewards[..n - 1].to_vec(),
        done: traj.done[..n - 1].to_vec(),
        meta: traj.meta.clone(),
    }
}

const STREAM_COLLECT: u64 = 0xC0_11EC;
const STREAM_IMAGINE: u64 = 0x1_3461;
const STREAM_BATCH: u64 = 0xBA_7C4;
const STREAM_EVAL: u64 = 0xE_7A1;
const STREAM_FINETUNE: u64 = 0xF1_47;

/// The model-based loop: collect real steps, (periodically) fine-tune
/// the world model, branch short imagined rollouts from real states,
/// update the actor–critic on the union, and evaluate on a schedule.
pub fn mbpo_train(
    env: &PushWorld,
    tok: &mut Tokenizer,
    wm: &mut Transformer,
    ac: &mut ActorCritic,
    cfg: &MbpoConfig,
    seed: u64,
    mut on_log: impl FnMut(&MbpoLogRow),
) -> Result<MbpoReport> {
    if cfg.iterations == 0 || cfg.env_steps_per_iter == 0 || cfg.batch_size == 0 {
        return Err(RlError::Config("iterations, steps per iteration and batch size must be positive".into()));
    }
    let depth_scale = env.depth_scale();
    let mut real = ReplayBuffer::new(cfg.real_capacity, Origin::Real);
    let mut imag = ReplayBuffer::new(cfg.imagined_capacity, Origin::Imagined);
    let mut episodes: VecDeque<Trajectory> = VecDeque::new();
    let mut report = MbpoReport::default();
    let mut env_steps = 0usize;
    let mut episode_counter = 0u64;
    let mut initial_model_loss: Option<f32> = None;
    let mut tok_steps_done = 0usize;
    let mut wm_steps_done = 0usize;
    let mut last_model_ce = f32::NAN;
    let mut fallback_warned = false;

    for iter in 0..cfg.iterations {
        // Phase 1: real environment collection.
        let mut collected = 0usize;
        while collected < cfg.env_steps_per_iter {
            let ep_seed = mix_seed(mix_seed(seed, STREAM_COLLECT), episode_counter);
            episode_counter += 1;
            let traj = if env_steps + collected < cfg.warmup_steps {
                run_episode(env, &mut RandomPolicy, ep_seed, env.cfg.horizon)
            } else {
                let mut pol = AcPolicy { ac, sigma: ac.cfg.noise_sigma, depth_scale };
                run_episode(env, &mut pol, ep_seed, env.cfg.horizon)
            };
            collected += traj.actions.len();
            for t in 0..traj.actions.len() {
                real.push(Transition {
                    obs: PackedObs::from_observation(&traj.observations[t], depth_scale),
                    action: traj.actions[t].clone(),
                    reward: traj.rewards[t],
                    next: PackedObs::from_observation(&traj.observations[t + 1], depth_scale),
                    done: traj.done[t],
                    origin: Origin::Real,
                })?;
            }
            if traj.observations.len() > tok.cfg.t0 + 1 {
                episodes.push_back(traj);
                if episodes.len() > cfg.episode_log {
                    episodes.pop_front();
                }
            }
        }
        env_steps += collected;

        // Phase 2: periodic world-model fine-tuning on logged episodes.
        if cfg.wm_finetune_every > 0 && iter % cfg.wm_finetune_every == 0 && !episodes.is_empty() {
            // Long episodes are trained on a prefix that fits the
            // model's token budget.
            let t0 = tok.cfg.t0;
            let mut max_frames = t0 + 2;
            while max_frames <= env.cfg.horizon
                && wm.cfg.layout_len(t0, max_frames + 1) <= wm.cfg.max_len
            {
                max_frames += 1;
            }
            let clipped: Vec<Trajectory> =
                episodes.iter().map(|t| truncate_frames(t, max_frames)).collect();
            let seqs: Vec<Vec<NormalizedObs>> = clipped.iter().map(normalized_frames).collect();
            let tcfg = TokenizerTrainConfig {
                steps: tok_steps_done + cfg.tok_finetune_steps,
                start_step: tok_steps_done,
                revival_every: 0,
                ..TokenizerTrainConfig::default()
            };
            let mut topt = Adam::new(AdamConfig { lr: tcfg.lr, ..AdamConfig::default() });
            train_tokenizer(tok, &mut topt, &seqs, &tcfg, mix_seed(seed, STREAM_FINETUNE), |_| {})?;
            tok_steps_done += cfg.tok_finetune_steps;

            let mut tds = Vec::with_capacity(clipped.len());
            for traj in &clipped {
                tds.push(tokenize_trajectory(tok, traj)?);
            }
            let wcfg = WmTrainConfig {
                steps: wm_steps_done + cfg.wm_finetune_steps,
                start_step: wm_steps_done,
                ..WmTrainConfig::default()
            };
            let mut wopt = Adam::new(AdamConfig { lr: wcfg.lr, ..AdamConfig::default() });
            let rep = train_world_model(
                wm,
                &mut wopt,
                &tds,
                &wcfg,
                mix_seed(seed, STREAM_FINETUNE ^ 1),
                |_| {},
            )?;
            wm_steps_done += cfg.wm_finetune_steps;
            if let Some(last) = rep.rows.last() {
                last_model_ce = last.ce;
                let initial = *initial_model_loss.get_or_insert(last.ce.max(1e-3));
                if last.ce > cfg.divergence_factor * initial {
                    return Err(RlError::Diverged(format!(
                        "model loss {} exceeded {}x initial {} at iteration {iter} ({} env steps)",
                        last.ce, cfg.divergence_factor, initial, env_steps
                    )));
                }
            }
        }

        // Phase 3: imagined branches from real states.
        if cfg.imagined_branches > 0 && !real.is_empty() {
            let engine = RolloutEngine::new(tok, wm, cfg.rollout.clone(), depth_scale)?;
            let mut rng = Rng::derive(mix_seed(seed, STREAM_IMAGINE), iter as u64);
            for _ in 0..cfg.imagined_branches {
                let start = real.get(rng.below(real.len()));
                let ctx = start.obs.to_normalized();
                let mut state = engine.prime(std::slice::from_ref(&ctx), &[])?;
                let mut prev = start.obs.clone();
                for _ in 0..cfg.model_rollout_len {
                    let action = ac.act_noisy(&prev.planes(), ac.cfg.noise_sigma, &mut rng)?;
                    let step = engine.step_imagined(&mut state, &action, &mut rng)?;
                    let next = PackedObs::from_observation(&step.observation, depth_scale);
                    imag.push(Transition {
                        obs: prev.clone(),
                        action,
                        reward: step.reward,
                        next: next.clone(),
                        done: false,
                        origin: Origin::Imagined,
                    })?;
                    prev = next;
                }
            }
        }

        // Phase 4: actor–critic updates on the union.
        let (mut csum, mut asum, mut nupd) = (0.0f32, 0.0f32, 0usize);
        if env_steps >= cfg.warmup_steps && real.len() + imag.len() >= cfg.batch_size {
            let mut rng = Rng::derive(mix_seed(seed, STREAM_BATCH), iter as u64);
            for _ in 0..cfg.updates_per_iter {
                let (batch, fellback) =
                    sample_batch(&real, &imag, cfg.batch_size, cfg.real_ratio, &mut rng)?;
                if fellback && !fallback_warned && cfg.imagined_branches > 0 {
                    eprintln!("warning: replay split short; batch fell back to the other origin");
                    fallback_warned = true;
                }
                let losses = ac.update(&batch)?;
                csum += losses.critic;
                asum += losses.actor;
                nupd += 1;
            }
        }

        // Phase 5: scheduled evaluation.
        if iter % cfg.eval_every.max(1) == 0 || iter + 1 == cfg.iterations {
            let mut pol = AcPolicy { ac, sigma: 0.0, depth_scale };
            let outcome = evaluate_policy(
                &mut pol,
                env,
                cfg.eval_episodes,
                mix_seed(mix_seed(seed, STREAM_EVAL), iter as u64),
            )?;
            let row = MbpoLogRow {
                iteration: iter,
                env_steps,
                success_rate: outcome.success_rate,
                mean_return: outcome.mean_return,
                critic_loss: if nupd > 0 { csum / nupd as f32 } else { f32::NAN },
                actor_loss: if nupd > 0 { asum / nupd as f32 } else { f32::NAN },
                model_ce: last_model_ce,
            };
            on_log(&row);
            report.rows.push(row);
            report.final_success = outcome.success_rate;
        }
    }
    report.env_steps = env_steps;
    Ok(report)
}

/// The pure model-free baseline: the same loop with imagination and
/// model fine-tuning disabled.  Given the same seed its stream of real
/// environment interactions is bit-identical to `mbpo_train` with
/// `imagined_branches = 0`.
pub fn model_free_train(
    env: &PushWorld,
    tok: &mut Tokenizer,
    wm: &mut Transformer,
    ac: &mut ActorCritic,
    cfg: &MbpoConfig,
    seed: u64,
    on_log: impl FnMut(&MbpoLogRow),
) -> Result<MbpoReport> {
    let cfg = MbpoConfig { imagined_branches: 0, wm_finetune_every: 0, ..cfg.clone() };
    mbpo_train(env, tok, wm, ac, &cfg, seed, on_log)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BcConfig {
    /// Actions predicted per forward pass.
    pub chunk: usize,
    pub steps: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub log_every: usize,
    pub hidden: usize,
    pub enc_channels: [usize; 3],
    pub max_action: f32,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            chunk: 4,
            steps: 2000,
            lr: 1e-3,
            batch_size: 16,
            log_every: 25,
            hidden: 128,
            enc_channels: [16, 32, 32],
            max_action: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcLogRow {
    pub step: usize,
    pub loss: f32,
}

#[derive(Debug, Clone, Default)]
pub struct BcReport {
    pub rows: Vec<BcLogRow>,
}

/// Behavior-cloned policy predicting actions in chunks; executes each
/// chunk open-loop before re-predicting.
pub struct BcPolicy {
    pub cfg: BcConfig,
    pub h: usize,
    pub w: usize,
    pub depth_scale: f32,
    pub store: ParamStore,
    pending: VecDeque<Action>,
}

impl BcPolicy {
    pub fn new(cfg: BcConfig, h: usize, w: usize, depth_scale: f32, seed: u64) -> Result<Self> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(RlError::Config(format!("{h}x{w} observations must be multiples of 8")));
        }
        if cfg.chunk == 0 {
            return Err(RlError::Config("chunk length must be at least 1".into()));
        }
        let mut rng = Rng::seed_from_u64(mix_seed(seed, 0xBC00));
        let mut store = ParamStore::new();
        let [c1, c2, c3] = cfg.enc_channels;
        let feat = c3 * (h / 8) * (w / 8);
        let conv = |s: &mut ParamStore, rng: &mut Rng, name: &str, co: usize, ci: usize| {
            s.init(&format!("{name}.w"), &[co, ci, 3, 3], Init::Kaiming { fan_in: ci * 9 }, rng);
            s.init(&format!("{name}.b"), &[co], Init::Zeros, rng);
        };
        conv(&mut store, &mut rng, "bc.enc.c1", c1, 5);
        conv(&mut store, &mut rng, "bc.enc.c2", c2, c1);
        conv(&mut store, &mut rng, "bc.enc.c3", c3, c2);
        store.init("bc.h1.w", &[feat, cfg.hidden], Init::Xavier { fan_in: feat, fan_out: cfg.hidden }, &mut rng);
        store.init("bc.h1.b", &[cfg.hidden], Init::Zeros, &mut rng);
        let out = cfg.chunk * ACTION_DIM;
        store.init("bc.h2.w", &[cfg.hidden, out], Init::Xavier { fan_in: cfg.hidden, fan_out: out }, &mut rng);
        store.init("bc.h2.b", &[out], Init::Zeros, &mut rng);
        Ok(Self { cfg, h, w, depth_scale, store, pending: VecDeque::new() })
    }

    fn forward(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<Var> {
        let bind = |g: &mut Graph, store: &ParamStore, name: &str| {
            let id = store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
            if trainable {
                g.param(store, id)
            } else {
                g.param_frozen(store, id)
            }
        };
        let mut h = x;
        for name in ["bc.enc.c1", "bc.enc.c2", "bc.enc.c3"] {
            let w = bind(g, &self.store, &format!("{name}.w"));
            let b = bind(g, &self.store, &format!("{name}.b"));
            h = g.conv2d(h, w, Some(b), 2, 1)?;
            h = g.silu(h);
        }
        let shape = g.val(h).shape().to_vec();
        let feat = shape[1] * shape[2] * shape[3];
        let h2 = g.reshape(h, &[shape[0], feat])?;
        let w1 = bind(g, &self.store, "bc.h1.w");
        let b1 = bind(g, &self.store, "bc.h1.b");
        let w2 = bind(g, &self.store, "bc.h2.w");
        let b2 = bind(g, &self.store, "bc.h2.b");
        let h3 = g.linear(h2, w1, Some(b1))?;
        let h3 = g.silu(h3);
        let h3 = g.linear(h3, w2, Some(b2))?;
        let h3 = g.tanh(h3);
        Ok(g.mul_scalar(h3, self.cfg.max_action))
    }

    /// Predicts the next action chunk for one observation.
    pub fn predict_chunk(&self, planes: &[f32]) -> Result<Vec<Action>> {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(vec![1, 5, self.h, self.w], planes.to_vec())?);
        let out = self.forward(&mut g, x, false)?;
        let data = g.val(out).data();
        Ok(data.chunks(ACTION_DIM).map(|c| c.to_vec()).collect())
    }
}

impl Policy for BcPolicy {
    fn act(&mut self, state: &EnvState, obs: &Observation, _rng: &mut Rng) -> Action {
        if state.step_index == 0 {
            self.pending.clear();
        }
        if self.pending.is_empty() {
            let planes = obs_planes(obs, self.depth_scale);
            let chunk = self.predict_chunk(&planes).expect("chunk forward");
            self.pending.extend(chunk);
        }
        self.pending.pop_front().expect("chunk is non-empty")
    }
}

/// Supervised regression of expert action chunks from single
/// observations over real and/or imagined demonstrations.
pub fn behavior_clone(
    dataset: &[Trajectory],
    cfg: &BcConfig,
    seed: u64,
    mut on_log: impl FnMut(&BcLogRow),
) -> Result<(BcPolicy, BcReport)> {
    if dataset.is_empty() {
        return Err(RlError::EmptyDataset);
    }
    let meta = &dataset[0].meta;
    let (h, w, depth_scale) = (meta.h, meta.w, meta.depth_scale);
    for traj in dataset {
        traj.validate().map_err(RlError::Config)?;
        if traj.actions.is_empty() {
            return Err(RlError::Config("demonstration without actions".into()));
        }
        if traj.meta.h != h || traj.meta.w != w {
            return Err(RlError::Config("mixed observation shapes in demonstrations".into()));
        }
    }
    let mut policy = BcPolicy::new(cfg.clone(), h, w, depth_scale, seed)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut report = BcReport::default();
    let hw = h * w;
    let ad = ACTION_DIM;
    for step in 0..cfg.steps {
        let mut rng = Rng::derive(mix_seed(seed, 0xBC57), step as u64);
        let b = cfg.batch_size;
        let mut obs = Vec::with_capacity(b * 5 * hw);
        let mut tgt = Vec::with_capacity(b * cfg.chunk * ad);
        for _ in 0..b {
            let traj = &dataset[rng.below(dataset.len())];
            let t = rng.below(traj.actions.len());
            obs.extend(obs_planes(&traj.observations[t], depth_scale));
            for j in 0..cfg.chunk {
                // Past the episode end the expert holds still.
                match traj.actions.get(t + j) {
                    Some(a) => tgt.extend_from_slice(a),
                    None => tgt.extend(std::iter::repeat(0.0).take(ad)),
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![b, 5, h, w], obs)?);
        let pred = policy.forward(&mut g, x, true)?;
        let target = g.constant(Tensor::new(vec![b, cfg.chunk * ad], tgt)?);
        let loss = g.mse_loss(pred, target)?;
        let val = g.val(loss).item()?;
        if !val.is_finite() {
            return Err(RlError::Diverged(format!("behavior-cloning loss {val} at step {step}")));
        }
        let grads = g.backward(loss)?;
        opt.step(&mut policy.store, &g, &grads)?;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let row = BcLogRow { step, loss: val };
            on_log(&row);
            report.rows.push(row);
        }
    }
    Ok((policy, report))
}
