//! Procedural top-down push-world environment.
//!
//! A disc-shaped arm (with a thin link to the top edge) pushes square blocks
//! across a unit workspace toward a goal marker.  An orthographic camera at
//! fixed height renders ground-truth RGB, metric depth (camera height minus
//! surface height) and a binary arm mask with hard edges.  Everything is a
//! pure function of the seed.

use mowm_autograd::rng::{mix_seed, Rng};
use serde::{Deserialize, Serialize};

pub const ACTION_DIM: usize = 3;

/// Per-step action: (dx, dy, gripper).
pub type Action = Vec<f32>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub h: usize,
    pub w: usize,
    pub n_blocks: usize,
    pub horizon: usize,
    pub camera_height: f32,
    pub arm_radius: f32,
    pub arm_height: f32,
    pub link_width: f32,
    pub max_step: f32,
    pub goal_radius: f32,
    /// Episodes written by the dataset exporter.
    pub n_traj: usize,
    /// Acting policy for dataset export.
    pub gen_policy: GenPolicy,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            n_blocks: 1,
            horizon: 50,
            camera_height: 0.5,
            arm_radius: 0.06,
            arm_height: 0.06,
            link_width: 0.025,
            max_step: 0.05,
            goal_radius: 0.03,
            n_traj: 50,
            gen_policy: GenPolicy::Expert,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenPolicy {
    Random,
    Expert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub xy: [f32; 2],
    pub edge: f32,
    pub height: f32,
    pub color: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub arm_xy: [f32; 2],
    pub gripper: f32,
    pub blocks: Vec<Block>,
    pub goal_xy: [f32; 2],
    pub step_index: usize,
}

/// One rendered time step: planar RGB [3,H,W], metric depth [H,W] in
/// meters, binary arm mask [H,W].
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<f32>,
}

const TABLE_COLOR: [f32; 3] = [0.82, 0.80, 0.76];
const GOAL_COLOR: [f32; 3] = [0.92, 0.25, 0.80];
const ARM_COLOR: [f32; 3] = [0.22, 0.24, 0.30];
const BLOCK_COLORS: [[f32; 3]; 4] = [
    [0.85, 0.15, 0.10],
    [0.10, 0.65, 0.20],
    [0.15, 0.30, 0.85],
    [0.90, 0.75, 0.10],
];

fn dist(a: [f32; 2], b: [f32; 2]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Does the arm disc at `center` overlap the axis-aligned block square?
fn disc_overlaps_block(center: [f32; 2], radius: f32, block: &Block) -> bool {
    let half = block.edge * 0.5;
    let cx = center[0].clamp(block.xy[0] - half, block.xy[0] + half);
    let cy = center[1].clamp(block.xy[1] - half, block.xy[1] + half);
    dist(center, [cx, cy]) <= radius
}

pub struct PushWorld {
    pub cfg: EnvConfig,
}

impl PushWorld {
    pub fn new(cfg: EnvConfig) -> Self {
        Self { cfg }
    }

    /// Depth values are always within [camera_height - 0.10, camera_height].
    pub fn depth_scale(&self) -> f32 {
        self.cfg.camera_height
    }

    /// Deterministic initial state: goal in the middle region, primary
    /// block a push-length away, arm behind the block opposite the goal.
    pub fn reset(&self, seed: u64, n_blocks: usize) -> (EnvState, Observation) {
        assert!((1..=4).contains(&n_blocks), "n_blocks must be in 1..=4");
        let cfg = &self.cfg;
        let mut rng = Rng::derive(seed, 0xE17);
        let (goal, block0, arm) = loop {
            let goal = [rng.uniform_in(0.25, 0.75), rng.uniform_in(0.25, 0.75)];
            let angle = rng.uniform_in(0.0, std::f32::consts::TAU);
            let d = rng.uniform_in(0.33, 0.42);
            let block0 = [goal[0] + d * angle.cos(), goal[1] + d * angle.sin()];
            if !(0.12..=0.88).contains(&block0[0]) || !(0.12..=0.88).contains(&block0[1]) {
                continue;
            }
            let dir = [(block0[0] - goal[0]) / d, (block0[1] - goal[1]) / d];
            let back = cfg.arm_radius + 0.07 * 0.5 + 0.02;
            let arm = [block0[0] + dir[0] * back, block0[1] + dir[1] * back];
            if (0.02..=0.98).contains(&arm[0]) && (0.02..=0.98).contains(&arm[1]) {
                break (goal, block0, arm);
            }
        };
        let mut blocks = vec![Block {
            xy: block0,
            edge: rng.uniform_in(0.08, 0.13),
            height: rng.uniform_in(0.03, 0.10),
            color: 0,
        }];
        while blocks.len() < n_blocks {
            let cand = Block {
                xy: [rng.uniform_in(0.10, 0.90), rng.uniform_in(0.10, 0.90)],
                edge: rng.uniform_in(0.06, 0.11),
                height: rng.uniform_in(0.02, 0.10),
                color: blocks.len() % BLOCK_COLORS.len(),
            };
            let clear = blocks.iter().all(|b| dist(b.xy, cand.xy) > b.edge + cand.edge)
                && dist(cand.xy, arm) > cfg.arm_radius + cand.edge
                && dist(cand.xy, goal) > 0.15;
            if clear {
                blocks.push(cand);
            }
        }
        let state = EnvState {
            arm_xy: arm,
            gripper: 0.0,
            blocks,
            goal_xy: goal,
            step_index: 0,
        };
        let obs = self.render(&state);
        (state, obs)
    }

    /// Applies a (clipped) action.  A block overlapped by the moved arm disc
    /// is carried along the arm's motion vector, so per-step block
    /// displacement never exceeds arm displacement.
    pub fn step(&self, state: &EnvState, action: &[f32]) -> (EnvState, Observation, f32, bool) {
        let cfg = &self.cfg;
        let dx = action.first().copied().unwrap_or(0.0).clamp(-cfg.max_step, cfg.max_step);
        let dy = action.get(1).copied().unwrap_or(0.0).clamp(-cfg.max_step, cfg.max_step);
        let gripper = action.get(2).copied().unwrap_or(0.0).clamp(0.0, 1.0);

        let mut next = state.clone();
        let old = next.arm_xy;
        next.arm_xy = [(old[0] + dx).clamp(0.0, 1.0), (old[1] + dy).clamp(0.0, 1.0)];
        next.gripper = gripper;
        let disp = [next.arm_xy[0] - old[0], next.arm_xy[1] - old[1]];
        if disp[0] != 0.0 || disp[1] != 0.0 {
            for b in &mut next.blocks {
                if disc_overlaps_block(next.arm_xy, cfg.arm_radius, b) {
                    let half = b.edge * 0.5;
                    b.xy[0] = (b.xy[0] + disp[0]).clamp(half, 1.0 - half);
                    b.xy[1] = (b.xy[1] + disp[1]).clamp(half, 1.0 - half);
                }
            }
        }
        next.step_index += 1;

        let d0 = dist(next.blocks[0].xy, next.goal_xy);
        let success = d0 <= cfg.goal_radius;
        let reward = -d0 + if success { 1.0 } else { 0.0 };
        let done = success || next.step_index >= cfg.horizon;
        let obs = self.render(&next);
        (next, obs, reward, done)
    }

    /// Orthographic top-down render with hard edges.  Draw order: table,
    /// flat goal marker, blocks, arm; the mask is exactly the arm pixels.
    pub fn render(&self, state: &EnvState) -> Observation {
        let cfg = &self.cfg;
        let (h, w) = (cfg.h, cfg.w);
        let mut rgb = vec![0.0f32; 3 * h * w];
        let mut depth = vec![cfg.camera_height; h * w];
        let mut mask = vec![0.0f32; h * w];
        for i in 0..h {
            for j in 0..w {
                let x = (j as f32 + 0.5) / w as f32;
                let y = (i as f32 + 0.5) / h as f32;
                let p = i * w + j;
                let mut color = TABLE_COLOR;
                // Goal marker: flat (zero height), color only.
                if dist([x, y], state.goal_xy) <= cfg.goal_radius + 0.015 {
                    color = GOAL_COLOR;
                }
                for b in &state.blocks {
                    let half = b.edge * 0.5;
                    if (x - b.xy[0]).abs() <= half && (y - b.xy[1]).abs() <= half {
                        color = BLOCK_COLORS[b.color % BLOCK_COLORS.len()];
                        depth[p] = cfg.camera_height - b.height;
                    }
                }
                if self.arm_covers(state, x, y) {
                    color = ARM_COLOR;
                    depth[p] = cfg.camera_height - cfg.arm_height;
                    mask[p] = 1.0;
                }
                rgb[p] = color[0];
                rgb[h * w + p] = color[1];
                rgb[2 * h * w + p] = color[2];
            }
        }
        Observation { h, w, rgb, depth, mask }
    }

    /// Arm footprint: disc at arm_xy plus a thin link rectangle running to
    /// the top edge (y = 0).
    pub fn arm_covers(&self, state: &EnvState, x: f32, y: f32) -> bool {
        let cfg = &self.cfg;
        let a = state.arm_xy;
        if dist([x, y], a) <= cfg.arm_radius {
            return true;
        }
        (x - a[0]).abs() <= cfg.link_width * 0.5 && y <= a[1]
    }

    /// Proportional controller: line up behind the primary block (relative
    /// to the goal), then push straight through it toward the goal.
    pub fn scripted_expert(&self, state: &EnvState) -> Action {
        let cfg = &self.cfg;
        let b = &state.blocks[0];
        let d_goal = dist(b.xy, state.goal_xy);
        if d_goal <= cfg.goal_radius {
            return vec![0.0, 0.0, 0.0];
        }
        let push_dir = [
            (state.goal_xy[0] - b.xy[0]) / d_goal,
            (state.goal_xy[1] - b.xy[1]) / d_goal,
        ];
        let back = cfg.arm_radius + b.edge * 0.5 + 0.01;
        let behind = [b.xy[0] - push_dir[0] * back, b.xy[1] - push_dir[1] * back];
        let arm = state.arm_xy;
        // Aligned when the arm sits in the pushing corridor behind the block.
        let to_block = [b.xy[0] - arm[0], b.xy[1] - arm[1]];
        let along = to_block[0] * push_dir[0] + to_block[1] * push_dir[1];
        let lateral = (to_block[0] * push_dir[1] - to_block[1] * push_dir[0]).abs();
        let aligned = along > 0.0 && lateral <= 0.03;
        if aligned {
            return vec![push_dir[0] * cfg.max_step, push_dir[1] * cfg.max_step, 0.0];
        }
        // Reposition toward the behind-point, preserving direction so the
        // per-axis env clip never bends the motion.
        let delta = [behind[0] - arm[0], behind[1] - arm[1]];
        let n = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
        let scale = if n > cfg.max_step { cfg.max_step / n } else { 1.0 };
        vec![delta[0] * scale, delta[1] * scale, 0.0]
    }
}

/// Metadata stored alongside every trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub h: usize,
    pub w: usize,
    pub action_dim: usize,
    pub depth_scale: f32,
    pub imagined: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f32>,
    pub done: Vec<bool>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len_frames(&self) -> usize {
        self.observations.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        let t = self.observations.len();
        if t == 0 {
            return Err("trajectory has no observations".into());
        }
        if self.actions.len() != t - 1 || self.rewards.len() != t - 1 || self.done.len() != t - 1 {
            return Err(format!(
                "inconsistent lengths: {t} frames, {} actions, {} rewards, {} done",
                self.actions.len(),
                self.rewards.len(),
                self.done.len()
            ));
        }
        for o in &self.observations {
            if o.h != self.meta.h || o.w != self.meta.w {
                return Err("observation shape differs from meta".into());
            }
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err("non-finite reward".into());
        }
        Ok(())
    }
}

/// Anything that can pick actions during data collection.
pub trait Policy {
    fn act(&mut self, state: &EnvState, obs: &Observation, rng: &mut Rng) -> Action;
}

pub struct ScriptedExpert<'a>(pub &'a PushWorld);

impl Policy for ScriptedExpert<'_> {
    fn act(&mut self, state: &EnvState, _obs: &Observation, _rng: &mut Rng) -> Action {
        self.0.scripted_expert(state)
    }
}

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&mut self, _state: &EnvState, _obs: &Observation, rng: &mut Rng) -> Action {
        vec![rng.uniform_in(-0.05, 0.05), rng.uniform_in(-0.05, 0.05), 0.0]
    }
}

/// Runs one episode of at most `max_steps` env steps (so up to
/// `max_steps + 1` observations), stopping early at `done`.
pub fn run_episode(
    env: &PushWorld,
    policy: &mut dyn Policy,
    episode_seed: u64,
    max_steps: usize,
) -> Trajectory {
    let (mut state, obs0) = env.reset(episode_seed, env.cfg.n_blocks);
    let mut rng = Rng::derive(episode_seed, 0xAC7);
    let mut observations = vec![obs0];
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut done_flags = Vec::new();
    for _ in 0..max_steps {
        let action = policy.act(&state, observations.last().unwrap(), &mut rng);
        let (next, obs, reward, done) = env.step(&state, &action);
        actions.push(action);
        rewards.push(reward);
        done_flags.push(done);
        observations.push(obs);
        state = next;
        if done {
            break;
        }
    }
    Trajectory {
        observations,
        actions,
        rewards,
        done: done_flags,
        meta: TrajectoryMeta {
            h: env.cfg.h,
            w: env.cfg.w,
            action_dim: ACTION_DIM,
            depth_scale: env.depth_scale(),
            imagined: false,
            seed: episode_seed,
        },
    }
}

/// Collects `n_traj` episodes under per-episode derived seeds.
pub fn collect_dataset(
    env: &PushWorld,
    policy: &mut dyn Policy,
    n_traj: usize,
    max_steps: usize,
    seed: u64,
) -> Vec<Trajectory> {
    (0..n_traj)
        .map(|i| run_episode(env, policy, mix_seed(seed, i as u64), max_steps))
        .collect()
}
