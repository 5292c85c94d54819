//! `mowm`: dataset generation, tokenizer/world-model training, imagined
//! rollouts, rollout scoring, model-based RL, and behavior cloning for
//! the built-in push environment.
//!
//! Every subcommand reads an optional TOML config plus `--set key=value`
//! overrides, then writes its artifacts, the fully-resolved config, and
//! a line-oriented metrics CSV into a run directory.

use clap::{Parser, Subcommand};
use mowm_autograd::{mix_seed, Adam, AdamConfig};
use mowm_core::checkpoint::{
    load_checkpoint, save_checkpoint, store_to_named, CheckpointError,
};
use mowm_core::config::{ConfigError, RunConfig};
use mowm_core::env::{
    collect_dataset, GenPolicy, PushWorld, RandomPolicy, ScriptedExpert, Trajectory,
};
use mowm_core::metrics::{MetricError, MetricReport};
use mowm_core::rl::{behavior_clone, evaluate_policy, mbpo_train, ActorCritic, RlError};
use mowm_core::rollout::{context_of, RolloutEngine, RolloutError};
use mowm_core::shard::{read_dataset, read_manifest, write_dataset, ShardError};
use mowm_core::tokenizer::{
    normalized_frames, train_tokenizer, Tokenizer, TokenizerConfig, TokenizerError,
};
use mowm_core::transformer::{
    tokenize_trajectory, train_world_model, Transformer, TransformerConfig, TransformerError,
};
use serde::Serialize;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("shard: {0}")]
    Shard(#[from] ShardError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("tokenizer: {0}")]
    Tokenizer(#[from] TokenizerError),
    #[error("world model: {0}")]
    Transformer(#[from] TransformerError),
    #[error("rollout: {0}")]
    Rollout(#[from] RolloutError),
    #[error("rl: {0}")]
    Rl(#[from] RlError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

type Result<T> = std::result::Result<T, CliError>;

/// Trainable multi-modal world model over a procedural push task.
#[derive(Parser)]
#[command(name = "mowm", version, about)]
struct Cli {
    /// Base configuration file (TOML); omitted keys take defaults.
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set tokenizer.train.steps=500.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run directory for outputs (default: runs/<subcommand>).
    #[arg(short, long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an episode dataset with the scripted expert or a random policy.
    EnvGen,
    /// Train the multi-modal tokenizer on a shard dataset.
    TokenizerTrain {
        /// Dataset directory (shards + manifest).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Train the action-conditioned dynamics model on tokenized episodes.
    WmTrain {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Trained tokenizer checkpoint.
        #[arg(long, value_name = "PATH")]
        tokenizer: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Imagine rollouts that replay each dataset episode's actions.
    Rollout {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        tokenizer: PathBuf,
        /// Trained dynamics-model checkpoint.
        #[arg(long, value_name = "PATH")]
        wm: PathBuf,
    },
    /// Score imagined rollouts against ground-truth environment replays.
    Eval {
        /// Run directory produced by `rollout`.
        #[arg(long, value_name = "DIR")]
        rollouts: PathBuf,
    },
    /// Model-based RL with imagined replay on the push task.
    Mbrl {
        /// Tokenizer checkpoint; a fresh tokenizer is used when omitted.
        #[arg(long, value_name = "PATH")]
        tokenizer: Option<PathBuf>,
        /// Dynamics-model checkpoint; a fresh model is used when omitted.
        #[arg(long, value_name = "PATH")]
        wm: Option<PathBuf>,
    },
    /// Behavior cloning on demonstration datasets, then a policy eval.
    Bc {
        /// Demonstration dataset directory.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Additional (e.g. imagined) demonstration dataset.
        #[arg(long, value_name = "DIR")]
        imagined: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::EnvGen => "env-gen",
            Command::TokenizerTrain { .. } => "tokenizer-train",
            Command::WmTrain { .. } => "wm-train",
            Command::Rollout { .. } => "rollout",
            Command::Eval { .. } => "eval",
            Command::Mbrl { .. } => "mbrl",
            Command::Bc { .. } => "bc",
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        // Malformed overrides are usage errors, like unknown flags.
        Err(CliError::Config(ConfigError::Override { key, msg })) => {
            eprintln!("error: --set {key}: {msg}");
            std::process::exit(2);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    match &cli.command {
        Command::EnvGen => env_gen(&cfg, &out),
        Command::TokenizerTrain { data, init } => {
            tokenizer_train(&cfg, &out, data, init.as_deref())
        }
        Command::WmTrain { data, tokenizer, init } => {
            wm_train(&cfg, &out, data, tokenizer, init.as_deref())
        }
        Command::Rollout { data, tokenizer, wm } => rollout_cmd(&cfg, &out, data, tokenizer, wm),
        Command::Eval { rollouts } => eval_cmd(&cfg, &out, rollouts),
        Command::Mbrl { tokenizer, wm } => {
            mbrl_cmd(&cfg, &out, tokenizer.as_deref(), wm.as_deref())
        }
        Command::Bc { data, imagined } => bc_cmd(&cfg, &out, data, imagined.as_deref()),
    }
}

/// Line-oriented CSV, flushed per row so long runs are observable.
struct CsvLog {
    file: std::fs::File,
}

impl CsvLog {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{header}")?;
        Ok(Self { file })
    }

    fn row(&mut self, line: &str) {
        let _ = writeln!(self.file, "{line}");
        let _ = self.file.flush();
    }
}

fn toml_text<T: Serialize>(value: &T) -> Result<String> {
    Ok(toml::to_string_pretty(value).map_err(ConfigError::Serialize)?)
}

fn load_tokenizer(path: &Path) -> Result<Tokenizer> {
    let ckpt = load_checkpoint(path)?;
    let cfg: TokenizerConfig = toml::from_str(&ckpt.config).map_err(ConfigError::Parse)?;
    let mut tok = Tokenizer::new(cfg, 0)?;
    ckpt.apply_to_store(&mut tok.store)?;
    Ok(tok)
}

fn load_transformer(path: &Path) -> Result<Transformer> {
    let ckpt = load_checkpoint(path)?;
    let cfg: TransformerConfig = toml::from_str(&ckpt.config).map_err(ConfigError::Parse)?;
    let mut wm = Transformer::new(cfg, 0)?;
    ckpt.apply_to_store(&mut wm.store)?;
    Ok(wm)
}

fn check_dataset_size(dir: &Path, h: usize, w: usize) -> Result<()> {
    let m = read_manifest(dir)?;
    if m.h != h || m.w != w {
        return Err(CliError::Other(format!(
            "dataset {} is {}x{} but the configuration expects {h}x{w}",
            dir.display(),
            m.h,
            m.w
        )));
    }
    Ok(())
}

fn env_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let env = PushWorld::new(cfg.env.clone());
    let trajs = match cfg.env.gen_policy {
        GenPolicy::Random => {
            collect_dataset(&env, &mut RandomPolicy, cfg.env.n_traj, cfg.env.horizon, cfg.seed)
        }
        GenPolicy::Expert => collect_dataset(
            &env,
            &mut ScriptedExpert(&env),
            cfg.env.n_traj,
            cfg.env.horizon,
            cfg.seed,
        ),
    };
    let manifest = write_dataset(out, &trajs)?;
    let mut csv = CsvLog::create(&out.join("metrics.csv"), "episode,frames,return,success")?;
    let mut successes = 0usize;
    for (i, t) in trajs.iter().enumerate() {
        let ret: f32 = t.rewards.iter().sum();
        let success = t.rewards.iter().any(|&r| r > 0.0);
        successes += usize::from(success);
        csv.row(&format!("{i},{},{ret},{}", t.observations.len(), u8::from(success)));
    }
    println!(
        "wrote {} episodes ({} frames, {} successful) to {}",
        manifest.n_trajectories,
        manifest.total_frames,
        successes,
        out.display()
    );
    Ok(())
}

fn tokenizer_train(cfg: &RunConfig, out: &Path, data: &Path, init: Option<&Path>) -> Result<()> {
    check_dataset_size(data, cfg.tokenizer.h, cfg.tokenizer.w)?;
    let trajs = read_dataset(data)?;
    let seqs: Vec<_> = trajs.iter().map(normalized_frames).collect();
    let mut tok = Tokenizer::new(cfg.tokenizer.clone(), cfg.seed)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.tokenizer.train.lr, ..AdamConfig::default() });
    if let Some(p) = init {
        let ckpt = load_checkpoint(p)?;
        ckpt.apply_to_store(&mut tok.store)?;
        opt.load_state(&ckpt.optimizer_tensors()).map_err(TokenizerError::from)?;
    }
    let mut csv =
        CsvLog::create(&out.join("metrics.csv"), "step,total,rgb,depth,mask,codebook,commit")?;
    let tcfg = &cfg.tokenizer.train;
    let report = train_tokenizer(&mut tok, &mut opt, &seqs, tcfg, cfg.seed, |row| {
        csv.row(&format!(
            "{},{},{},{},{},{},{}",
            row.step, row.total, row.rgb, row.depth, row.mask, row.codebook, row.commit
        ));
        println!(
            "step {:>6}/{}  loss {:.4}  rgb {:.4}  depth {:.4}  mask {:.4}",
            row.step, tcfg.steps, row.total, row.rgb, row.depth, row.mask
        );
    })?;
    let mut tensors = store_to_named(&tok.store);
    tensors.extend(opt.export_state());
    save_checkpoint(&out.join("tokenizer.ckpt"), &toml_text(&tok.cfg)?, &tensors)?;
    println!(
        "trained {} steps on {} episodes; checkpoint at {}",
        report.steps_run,
        trajs.len(),
        out.join("tokenizer.ckpt").display()
    );
    Ok(())
}

fn wm_train(
    cfg: &RunConfig,
    out: &Path,
    data: &Path,
    tokenizer: &Path,
    init: Option<&Path>,
) -> Result<()> {
    let tok = load_tokenizer(tokenizer)?;
    cfg.transformer.check_tokenizer(&tok.cfg)?;
    check_dataset_size(data, tok.cfg.h, tok.cfg.w)?;
    let trajs = read_dataset(data)?;
    let mut tds = Vec::with_capacity(trajs.len());
    for t in &trajs {
        tds.push(tokenize_trajectory(&tok, t)?);
    }
    let mut wm = Transformer::new(cfg.transformer.clone(), cfg.seed)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.transformer.train.lr, ..AdamConfig::default() });
    if let Some(p) = init {
        let ckpt = load_checkpoint(p)?;
        ckpt.apply_to_store(&mut wm.store)?;
        opt.load_state(&ckpt.optimizer_tensors()).map_err(TransformerError::from)?;
    }
    let mut csv = CsvLog::create(&out.join("metrics.csv"), "step,total,ce,reward")?;
    let wcfg = &cfg.transformer.train;
    let report = train_world_model(&mut wm, &mut opt, &tds, wcfg, cfg.seed, |row| {
        csv.row(&format!("{},{},{},{}", row.step, row.total, row.ce, row.reward));
        println!(
            "step {:>6}/{}  loss {:.4}  ce {:.4}  reward {:.4}",
            row.step, wcfg.steps, row.total, row.ce, row.reward
        );
    })?;
    let mut tensors = store_to_named(&wm.store);
    tensors.extend(opt.export_state());
    save_checkpoint(&out.join("wm.ckpt"), &toml_text(&wm.cfg)?, &tensors)?;
    println!(
        "trained {} steps on {} episodes; checkpoint at {}",
        report.steps_run,
        tds.len(),
        out.join("wm.ckpt").display()
    );
    Ok(())
}

fn rollout_cmd(
    cfg: &RunConfig,
    out: &Path,
    data: &Path,
    tokenizer: &Path,
    wm: &Path,
) -> Result<()> {
    let tok = load_tokenizer(tokenizer)?;
    let model = load_transformer(wm)?;
    let manifest = read_manifest(data)?;
    check_dataset_size(data, tok.cfg.h, tok.cfg.w)?;
    let engine = RolloutEngine::new(&tok, &model, cfg.rollout.clone(), manifest.depth_scale)?;
    let trajs = read_dataset(data)?;
    let t0 = tok.cfg.t0;
    let mut imagined = Vec::new();
    let mut csv = CsvLog::create(&out.join("metrics.csv"), "source,rollout,frames,mean_reward")?;
    for (i, src) in trajs.iter().enumerate() {
        if src.observations.len() <= t0 {
            continue;
        }
        let context = context_of(src, t0)?;
        let context_actions = src.actions[..t0 - 1].to_vec();
        let future = &src.actions[t0 - 1..];
        let future = &future[..future.len().min(cfg.rollout.horizon)];
        let demos = engine.imagine_demonstrations(
            &context,
            &context_actions,
            future,
            cfg.rollout.rollouts_per_context,
            mix_seed(cfg.seed, i as u64),
        )?;
        for (j, mut demo) in demos.into_iter().enumerate() {
            // Keyed to the source episode so ground truth can be replayed.
            demo.meta.seed = src.meta.seed;
            let imagined_rewards = &demo.rewards[t0 - 1..];
            let mean_r = imagined_rewards.iter().sum::<f32>() / imagined_rewards.len().max(1) as f32;
            csv.row(&format!("{i},{j},{},{mean_r}", demo.observations.len()));
            imagined.push(demo);
        }
    }
    if imagined.is_empty() {
        return Err(CliError::Other("no source episode is long enough to roll out".into()));
    }
    let m = write_dataset(out, &imagined)?;
    println!("imagined {} rollouts ({} frames) into {}", m.n_trajectories, m.total_frames, out.display());
    Ok(())
}

/// Re-runs the environment from the shard's seed with the shard's
/// actions; valid because the env is deterministic.
fn replay_ground_truth(env: &PushWorld, im: &Trajectory) -> Trajectory {
    let (mut state, obs0) = env.reset(im.meta.seed, env.cfg.n_blocks);
    let mut observations = vec![obs0];
    let mut rewards = Vec::new();
    let mut done = Vec::new();
    for a in &im.actions {
        let (next, obs, r, d) = env.step(&state, a);
        observations.push(obs);
        rewards.push(r);
        done.push(d);
        state = next;
    }
    Trajectory {
        observations,
        actions: im.actions.clone(),
        rewards,
        done,
        meta: mowm_core::env::TrajectoryMeta { imagined: false, ..im.meta.clone() },
    }
}

fn eval_cmd(cfg: &RunConfig, out: &Path, rollouts: &Path) -> Result<()> {
    let imagined = read_dataset(rollouts)?;
    if imagined.is_empty() {
        return Err(CliError::Other(format!("no shards under {}", rollouts.display())));
    }
    let env = PushWorld::new(cfg.env.clone());
    if env.cfg.h != imagined[0].meta.h || env.cfg.w != imagined[0].meta.w {
        return Err(CliError::Other(format!(
            "rollouts are {}x{} but env config renders {}x{}",
            imagined[0].meta.h, imagined[0].meta.w, env.cfg.h, env.cfg.w
        )));
    }
    let t0 = cfg.tokenizer.t0;
    let cap = if cfg.eval.max_trajectories > 0 { cfg.eval.max_trajectories } else { usize::MAX };
    let mut report = MetricReport::default();
    let mut reward_err = Vec::new();
    let mut csv = CsvLog::create(
        &out.join("metrics.csv"),
        "trajectory,frames,psnr,ssim,absrel,mask_iou,reward_mae",
    )?;
    for (i, im) in imagined.iter().take(cap).enumerate() {
        let truth = replay_ground_truth(&env, im);
        let mut local = MetricReport::default();
        for t in t0..im.observations.len() {
            local.push_frame(&im.observations[t], &truth.observations[t])?;
        }
        let mut mae = 0.0f32;
        let mut n = 0usize;
        for t in (t0 - 1)..im.actions.len() {
            let e = (im.rewards[t] - truth.rewards[t]).abs();
            reward_err.push(e);
            mae += e;
            n += 1;
        }
        mae /= n.max(1) as f32;
        csv.row(&format!(
            "{i},{},{},{},{},{},{mae}",
            im.observations.len() - t0,
            local.psnr_mean(),
            local.ssim_mean(),
            local.absrel_mean(),
            local.mask_iou_mean()
        ));
        report.psnr.extend(local.psnr);
        report.ssim.extend(local.ssim);
        report.absrel.extend(local.absrel);
        report.mask_iou.extend(local.mask_iou);
    }
    let reward_mae = reward_err.iter().sum::<f32>() / reward_err.len().max(1) as f32;
    let text = format!("{}reward_mae={reward_mae:.6}\n", report.to_text());
    std::fs::write(out.join("report.txt"), &text)?;
    println!(
        "evaluated {} rollouts: psnr {:.2} dB  ssim {:.4}  absrel {:.4}  iou {:.4}  reward mae {:.4}",
        imagined.len().min(cap),
        report.psnr_mean(),
        report.ssim_mean(),
        report.absrel_mean(),
        report.mask_iou_mean(),
        reward_mae
    );
    Ok(())
}

fn mbrl_cmd(
    cfg: &RunConfig,
    out: &Path,
    tokenizer: Option<&Path>,
    wm: Option<&Path>,
) -> Result<()> {
    let mut tok = match tokenizer {
        Some(p) => load_tokenizer(p)?,
        None => Tokenizer::new(cfg.tokenizer.clone(), cfg.seed)?,
    };
    let mut model = match wm {
        Some(p) => load_transformer(p)?,
        None => Transformer::new(cfg.transformer.clone(), cfg.seed)?,
    };
    model.cfg.check_tokenizer(&tok.cfg)?;
    let env = PushWorld::new(cfg.env.clone());
    let mut ac = ActorCritic::new(cfg.mbrl.ac.clone(), env.cfg.h, env.cfg.w, cfg.seed)?;
    let mut csv = CsvLog::create(
        &out.join("metrics.csv"),
        "iteration,env_steps,success_rate,mean_return,critic_loss,actor_loss,model_ce",
    )?;
    let report = mbpo_train(&env, &mut tok, &mut model, &mut ac, &cfg.mbrl, cfg.seed, |row| {
        csv.row(&format!(
            "{},{},{},{},{},{},{}",
            row.iteration,
            row.env_steps,
            row.success_rate,
            row.mean_return,
            row.critic_loss,
            row.actor_loss,
            row.model_ce
        ));
        println!(
            "iter {:>4}  env steps {:>7}  success {:>5.1}%  return {:>8.3}",
            row.iteration,
            row.env_steps,
            row.success_rate * 100.0,
            row.mean_return
        );
    })?;
    save_checkpoint(
        &out.join("ac.ckpt"),
        &toml_text(&cfg.mbrl.ac)?,
        &store_to_named(&ac.store),
    )?;
    save_checkpoint(&out.join("tokenizer.ckpt"), &toml_text(&tok.cfg)?, &store_to_named(&tok.store))?;
    save_checkpoint(&out.join("wm.ckpt"), &toml_text(&model.cfg)?, &store_to_named(&model.store))?;
    println!(
        "finished after {} env steps; final success rate {:.1}%",
        report.env_steps,
        report.final_success * 100.0
    );
    Ok(())
}

fn bc_cmd(cfg: &RunConfig, out: &Path, data: &Path, imagined: Option<&Path>) -> Result<()> {
    let mut demos = read_dataset(data)?;
    let n_real = demos.len();
    if let Some(p) = imagined {
        demos.extend(read_dataset(p)?);
    }
    let mut csv = CsvLog::create(&out.join("metrics.csv"), "step,loss")?;
    let (mut policy, report) = behavior_clone(&demos, &cfg.mbrl.bc, cfg.seed, |row| {
        csv.row(&format!("{},{}", row.step, row.loss));
    })?;
    if let Some(last) = report.rows.last() {
        println!("behavior cloning finished at loss {:.6}", last.loss);
    }
    let env = PushWorld::new(cfg.env.clone());
    let outcome =
        evaluate_policy(&mut policy, &env, cfg.mbrl.eval_episodes, mix_seed(cfg.seed, 0xE7A1))?;
    save_checkpoint(&out.join("bc.ckpt"), &toml_text(&cfg.mbrl.bc)?, &store_to_named(&policy.store))?;
    let text = format!(
        "demos_real={n_real}\ndemos_total={}\nsuccess_rate={:.6}\nmean_return={:.6}\n",
        demos.len(),
        outcome.success_rate,
        outcome.mean_return
    );
    std::fs::write(out.join("report.txt"), &text)?;
    println!(
        "cloned {} demos ({} real); eval success {:.1}% over {} episodes",
        demos.len(),
        n_real,
        outcome.success_rate * 100.0,
        cfg.mbrl.eval_episodes
    );
    Ok(())
}
