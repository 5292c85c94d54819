//! Scratch tuning harness for the acceptance-level training runs.
//! Not part of the test suite; run as
//!   cargo run --release -p mowm-core --example pilot -- <tok|wm|mbrl|bc> [args]

use std::path::Path;
use std::time::Instant;

use mowm_core::checkpoint::{load_checkpoint, save_checkpoint, store_to_named};
use mowm_core::metrics::MetricReport;
use mowm_core::rl::{
    behavior_clone, evaluate_policy, mbpo_train, model_free_train, truncate_frames, ActorCritic,
    BcConfig, MbpoConfig,
};
use mowm_core::rollout::{context_of, RolloutConfig, RolloutEngine};
use mowm_core::tokenizer::{
    normalized_frames, train_tokenizer, NormalizedObs, Tokenizer, TokenizerConfig,
    TokenizerTrainConfig,
};
use mowm_core::transformer::{
    tokenize_trajectory, train_world_model, Transformer, TransformerConfig, WmTrainConfig,
};
use mowm_core::{collect_dataset, EnvConfig, PushWorld, RandomPolicy, ScriptedExpert, Trajectory};
use mowm_autograd::{mix_seed, Adam, AdamConfig, Rng};

const DATA_SEED: u64 = 11;
const TOK_SEED: u64 = 42;
const WM_SEED: u64 = 43;

fn env32() -> PushWorld {
    PushWorld::new(EnvConfig::default())
}

fn expert_dataset(env: &PushWorld, n: usize, seed: u64, max_frames: usize) -> Vec<Trajectory> {
    collect_dataset(env, &mut ScriptedExpert(env), n, env.cfg.horizon, seed)
        .iter()
        .map(|t| truncate_frames(t, max_frames))
        .collect()
}

fn roundtrip_metrics(tok: &Tokenizer, seqs: &[Vec<NormalizedObs>], depth_scale: f32) -> MetricReport {
    let mut rep = MetricReport::default();
    for seq in seqs {
        let ctx = &seq[..tok.cfg.t0];
        for obs in ctx {
            let (grid, _) = tok.encode_context(obs).unwrap();
            let rec = tok.decode_context(&grid).unwrap();
            rep.push_frame(&rec.to_observation(depth_scale), &obs.to_observation(depth_scale))
                .unwrap();
        }
        let cache = tok.build_cache(ctx).unwrap();
        for obs in &seq[tok.cfg.t0..] {
            let grid = tok.encode_dynamic(obs, &cache).unwrap();
            let rec = tok.decode_dynamic(&grid, &cache).unwrap();
            rep.push_frame(&rec.to_observation(depth_scale), &obs.to_observation(depth_scale))
                .unwrap();
        }
    }
    rep
}

fn save_tok(path: &Path, tok: &Tokenizer) {
    let echo = toml::to_string_pretty(&tok.cfg).unwrap();
    save_checkpoint(path, &echo, &store_to_named(&tok.store)).unwrap();
}

fn load_tok(path: &Path) -> Tokenizer {
    let ck = load_checkpoint(path).unwrap();
    let cfg: TokenizerConfig = toml::from_str(&ck.config).unwrap();
    let mut tok = Tokenizer::new(cfg, 0).unwrap();
    ck.apply_to_store(&mut tok.store).unwrap();
    tok
}

fn save_wm(path: &Path, wm: &Transformer) {
    let echo = toml::to_string_pretty(&wm.cfg).unwrap();
    save_checkpoint(path, &echo, &store_to_named(&wm.store)).unwrap();
}

fn load_wm(path: &Path) -> Transformer {
    let ck = load_checkpoint(path).unwrap();
    let cfg: TransformerConfig = toml::from_str(&ck.config).unwrap();
    let mut wm = Transformer::new(cfg, 0).unwrap();
    ck.apply_to_store(&mut wm.store).unwrap();
    wm
}

fn pilot_tok(n_traj: usize, steps: usize, chunk: usize, out: &Path) {
    let env = env32();
    let trajs = expert_dataset(&env, n_traj, DATA_SEED, 8);
    let seqs: Vec<Vec<NormalizedObs>> = trajs.iter().map(normalized_frames).collect();
    println!(
        "dataset: {} sequences, frames {:?}",
        seqs.len(),
        trajs.iter().map(|t| t.observations.len()).collect::<Vec<_>>()
    );
    let mut tok = Tokenizer::new(TokenizerConfig::default(), TOK_SEED).unwrap();
    let mut opt = Adam::new(AdamConfig {
        lr: tok.cfg.train.lr,
        clip_global_norm: Some(tok.cfg.train.grad_clip),
        ..AdamConfig::default()
    });
    let t0 = Instant::now();
    let mut done_steps = 0;
    while done_steps < steps {
        let upto = (done_steps + chunk).min(steps);
        let tc = TokenizerTrainConfig {
            steps: upto,
            start_step: done_steps,
            log_every: chunk,
            ..tok.cfg.train.clone()
        };
        let rep = train_tokenizer(&mut tok, &mut opt, &seqs, &tc, TOK_SEED, |_| {}).unwrap();
        let last = rep.rows.last().unwrap();
        done_steps = upto;
        let m = roundtrip_metrics(&tok, &seqs, env.depth_scale());
        let (uc, ud) = tok.codebook_usage(&seqs).unwrap();
        println!(
            "step={} total={:.4} psnr={:.2} absrel={:.4} iou={:.3} use_ctx={:.2} use_dyn={:.2} elapsed={:.0}s ({:.0} ms/step)",
            done_steps,
            last.total,
            m.psnr_mean(),
            m.absrel_mean(),
            m.mask_iou_mean(),
            uc,
            ud,
            t0.elapsed().as_secs_f32(),
            t0.elapsed().as_secs_f32() * 1000.0 / done_steps as f32,
        );
        if m.psnr_mean() >= 25.0 && m.absrel_mean() <= 0.05 && m.mask_iou_mean() >= 0.85 {
            println!("targets met at step {done_steps}");
            break;
        }
    }
    save_tok(out, &tok);
    println!("saved {}", out.display());
}

fn pilot_wm(tok_path: &Path, steps: usize, chunk: usize, out: &Path) {
    let env = env32();
    let tok = load_tok(tok_path);
    let trajs = expert_dataset(&env, 10, DATA_SEED, 8);
    let dataset: Vec<_> = trajs.iter().map(|t| tokenize_trajectory(&tok, t).unwrap()).collect();
    let mut wm = Transformer::new(TransformerConfig::default(), WM_SEED).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: wm.cfg.train.lr, ..AdamConfig::default() });
    let t0 = Instant::now();
    let mut done_steps = 0;
    while done_steps < steps {
        let upto = (done_steps + chunk).min(steps);
        let tc = WmTrainConfig { steps: upto, start_step: done_steps, log_every: chunk, ..wm.cfg.train.clone() };
        let rep = train_world_model(&mut wm, &mut opt, &dataset, &tc, WM_SEED, |_| {}).unwrap();
        let last = rep.rows.last().unwrap();
        done_steps = upto;
        println!(
            "step={} total={:.4} ce={:.4} reward={:.5} elapsed={:.0}s ({:.0} ms/step)",
            done_steps,
            last.total,
            last.ce,
            last.reward,
            t0.elapsed().as_secs_f32(),
            t0.elapsed().as_secs_f32() * 1000.0 / done_steps as f32,
        );
        if last.ce < 1.0 && done_steps >= steps / 2 {
            break;
        }
    }
    save_wm(out, &wm);
    println!("saved {}", out.display());
}

/// Held-out fidelity: prime on frame 0 of a fresh expert episode, replay its
/// actions for 7 steps, compare against the env's ground truth.
fn pilot_fidelity(tok_path: &Path, wm_path: &Path, top_k: usize) {
    let env = env32();
    let tok = load_tok(tok_path);
    let wm = load_wm(wm_path);
    let engine = RolloutEngine::new(
        &tok,
        &wm,
        RolloutConfig { top_k, horizon: 50, ..RolloutConfig::default() },
        env.depth_scale(),
    )
    .unwrap();
    let mut rep = MetricReport::default();
    let mut rerr = Vec::new();
    let mut used = 0;
    let mut seed = 5000u64;
    while used < 10 {
        let traj = run_expert(&env, seed);
        seed += 1;
        if traj.actions.len() < 7 {
            continue;
        }
        used += 1;
        let ctx = context_of(&traj, 1).unwrap();
        let mut state = engine.prime(&ctx, &[]).unwrap();
        let mut rng = Rng::seed_from_u64(mix_seed(777, seed));
        let steps = engine.replay_actions(&mut state, &traj.actions[..7], &mut rng).unwrap();
        for (t, st) in steps.iter().enumerate() {
            rep.push_frame(&st.observation, &traj.observations[t + 1]).unwrap();
            rerr.push((st.reward - traj.rewards[t]).abs());
        }
    }
    let mae = rerr.iter().sum::<f32>() / rerr.len() as f32;
    println!(
        "fidelity over 10 held-out seeds: psnr={:.2} absrel={:.4} iou={:.3} reward_mae={:.4}",
        rep.psnr_mean(),
        rep.absrel_mean(),
        rep.mask_iou_mean(),
        mae
    );
}

fn run_expert(env: &PushWorld, seed: u64) -> Trajectory {
    let mut pol = ScriptedExpert(env);
    mowm_core::run_episode(env, &mut pol, seed, env.cfg.horizon)
}

fn pilot_mbrl(tok_path: &Path, wm_path: &Path, seed: u64, branches: usize, args: &[String]) {
    let env = env32();
    let mut tok = load_tok(tok_path);
    let mut wm = load_wm(wm_path);
    let mut cfg = MbpoConfig { imagined_branches: branches, ..MbpoConfig::default() };
    for a in args {
        let (k, v) = a.split_once('=').unwrap();
        match k {
            "iterations" => cfg.iterations = v.parse().unwrap(),
            "env_steps_per_iter" => cfg.env_steps_per_iter = v.parse().unwrap(),
            "updates_per_iter" => cfg.updates_per_iter = v.parse().unwrap(),
            "warmup_steps" => cfg.warmup_steps = v.parse().unwrap(),
            "wm_finetune_every" => cfg.wm_finetune_every = v.parse().unwrap(),
            "wm_finetune_steps" => cfg.wm_finetune_steps = v.parse().unwrap(),
            "tok_finetune_steps" => cfg.tok_finetune_steps = v.parse().unwrap(),
            "actor_lr" => cfg.ac.actor_lr = v.parse().unwrap(),
            "critic_lr" => cfg.ac.critic_lr = v.parse().unwrap(),
            "noise_sigma" => cfg.ac.noise_sigma = v.parse().unwrap(),
            "batch_size" => cfg.batch_size = v.parse().unwrap(),
            "eval_every" => cfg.eval_every = v.parse().unwrap(),
            "model_rollout_len" => cfg.model_rollout_len = v.parse().unwrap(),
            "real_ratio" => cfg.real_ratio = v.parse().unwrap(),
            _ => panic!("unknown key {k}"),
        }
    }
    let mut ac = ActorCritic::new(cfg.ac.clone(), env.cfg.h, env.cfg.w, seed).unwrap();
    let t0 = Instant::now();
    let report = if branches == 0 {
        model_free_train(&env, &mut tok, &mut wm, &mut ac, &cfg, seed, |row| {
            println!(
                "iter={} env_steps={} success={:.2} ret={:.2} critic={:.4} actor={:.4} ce={:.3} t={:.0}s",
                row.iteration,
                row.env_steps,
                row.success_rate,
                row.mean_return,
                row.critic_loss,
                row.actor_loss,
                row.model_ce,
                t0.elapsed().as_secs_f32()
            );
        })
        .unwrap()
    } else {
        mbpo_train(&env, &mut tok, &mut wm, &mut ac, &cfg, seed, |row| {
            println!(
                "iter={} env_steps={} success={:.2} ret={:.2} critic={:.4} actor={:.4} ce={:.3} t={:.0}s",
                row.iteration,
                row.env_steps,
                row.success_rate,
                row.mean_return,
                row.critic_loss,
                row.actor_loss,
                row.model_ce,
                t0.elapsed().as_secs_f32()
            );
        })
        .unwrap()
    };
    println!(
        "final success {:.2} after {} env steps in {:.0}s",
        report.final_success,
        report.env_steps,
        t0.elapsed().as_secs_f32()
    );
}

fn pilot_bc(tok_path: &Path, wm_path: &Path, seeds: &[u64]) {
    let env = env32();
    let tok = load_tok(tok_path);
    let wm = load_wm(wm_path);
    let engine = RolloutEngine::new(
        &tok,
        &wm,
        RolloutConfig { top_k: 1, horizon: 50, ..RolloutConfig::default() },
        env.depth_scale(),
    )
    .unwrap();
    let demos = expert_dataset(&env, 50, mix_seed(DATA_SEED, 0xDE30), 50);
    let real50: Vec<Trajectory> = demos.clone();
    let mut mixed: Vec<Trajectory> = demos[..25].to_vec();
    let t0 = Instant::now();
    for (i, src) in demos[25..].iter().enumerate() {
        let ctx = context_of(src, 1).unwrap();
        let mut d = engine
            .imagine_demonstrations(&ctx, &[], &src.actions, 1, mix_seed(0x13A6, i as u64))
            .unwrap()
            .remove(0);
        d.rewards = src.rewards.clone();
        mixed.push(d);
    }
    println!("imagined 25 demos in {:.0}s", t0.elapsed().as_secs_f32());
    let cfg = BcConfig::default();
    for seed in seeds {
        for (name, data) in [("real50", &real50), ("mixed", &mixed)] {
            let t1 = Instant::now();
            let (policy, rep) = behavior_clone(data, &cfg, *seed, |_| {}).unwrap();
            let out = evaluate_policy(&mut { policy }, &env, 50, mix_seed(0xEE, *seed)).unwrap();
            println!(
                "seed={seed} {name}: success={:.2} return={:.2} loss_last={:.4} train={:.0}s",
                out.success_rate,
                out.mean_return,
                rep.rows.last().unwrap().loss,
                t1.elapsed().as_secs_f32()
            );
        }
    }
    // Reference points: random and expert.
    let rand = evaluate_policy(&mut RandomPolicy, &env, 50, 123).unwrap();
    println!("random: success={:.2}", rand.success_rate);
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::fs::create_dir_all("/tmp/pilot").unwrap();
    let tok_path = Path::new("/tmp/pilot/tokenizer.ckpt");
    let wm_path = Path::new("/tmp/pilot/wm.ckpt");
    match args.first().map(String::as_str) {
        Some("tok") => {
            let steps = args.get(1).map_or(3000, |s| s.parse().unwrap());
            pilot_tok(10, steps, 250, tok_path)
        }
        Some("wm") => {
            let steps = args.get(1).map_or(3000, |s| s.parse().unwrap());
            pilot_wm(tok_path, steps, 100, wm_path)
        }
        Some("fid") => {
            let top_k = args.get(1).map_or(1, |s| s.parse().unwrap());
            pilot_fidelity(tok_path, wm_path, top_k)
        }
        Some("mbrl") => {
            let seed = args.get(1).map_or(1, |s| s.parse().unwrap());
            let branches = args.get(2).map_or(20, |s| s.parse().unwrap());
            pilot_mbrl(tok_path, wm_path, seed, branches, &args[3.min(args.len())..])
        }
        Some("bc") => pilot_bc(tok_path, wm_path, &[1, 2, 3]),
        _ => eprintln!("usage: pilot <tok|wm|fid|mbrl|bc> [args]"),
    }
}
