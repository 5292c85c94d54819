//! Unified multi-modal VQ tokenizer: a conditional vector-quantized
//! autoencoder pair over RGB+depth+mask frames.
//!
//! Two encoder–decoder pairs share one architecture family.  The context
//! pair maps a frame to an (H/4)² token grid.  The dynamic pair maps a
//! frame to a coarser (H/8)² grid and is conditioned on the context
//! frames through one cross-attention block at the bottleneck of both its
//! encoder and decoder; the conditioning content is the pre-quantization
//! bottleneck features of all context frames, concatenated along the
//! token axis.  Each modality enters through its own replicated first
//! layer (stem) plus a learned per-channel modality embedding; stems are
//! summed into a shared trunk.  Each modality leaves through its own
//! replicated sigmoid head.

use crate::env::{Observation, Trajectory};
use mowm_autograd::kernels::nearest_code;
use mowm_autograd::{mix_seed, Adam, Graph, Init, ParamStore, Rng, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("autograd: {0}")]
    Autograd(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("depth not normalized: max value {0} exceeds 1+1e-6")]
    UnnormalizedDepth(f32),
    #[error("observation out of range: {0}")]
    OutOfRange(String),
    #[error("expected {expected:?} grid, got {got:?}")]
    WrongKind { expected: GridKind, got: GridKind },
    #[error("grid {got_h}x{got_w}, expected {want_h}x{want_w}")]
    BadGridShape { got_h: usize, got_w: usize, want_h: usize, want_w: usize },
    #[error("token index {index} outside codebook of {k} entries")]
    TokenOutOfRange { index: usize, k: usize },
    #[error("context cache mismatch: {0}")]
    CacheMismatch(String),
    #[error("sequence of {t} frames is not longer than the {t0} context frames")]
    SequenceTooShort { t: usize, t0: usize },
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, TokenizerError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
    Mask,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Mask];

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
            Modality::Mask => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
            Modality::Mask => "mask",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub h: usize,
    pub w: usize,
    /// Trunk widths at full, half, and quarter resolution.
    pub widths: [usize; 3],
    pub code_dim: usize,
    pub codebook_size: usize,
    /// Number of context frames conditioning the dynamic pair.
    pub t0: usize,
    /// Commitment loss weight.
    pub beta: f32,
    pub rgb: bool,
    pub depth: bool,
    pub mask: bool,
    pub train: TokenizerTrainConfig,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            h: 32,
            w: 32,
            widths: [64, 128, 256],
            code_dim: 64,
            codebook_size: 512,
            t0: 1,
            beta: 0.25,
            rgb: true,
            depth: true,
            mask: true,
            train: TokenizerTrainConfig::default(),
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h != self.w {
            return Err(TokenizerError::Config(format!("h {} != w {}", self.h, self.w)));
        }
        if self.h % 8 != 0 || self.h == 0 {
            return Err(TokenizerError::Config(format!("h {} must be a positive multiple of 8", self.h)));
        }
        if !(self.rgb || self.depth || self.mask) {
            return Err(TokenizerError::Config("no active modalities".into()));
        }
        if self.t0 == 0 {
            return Err(TokenizerError::Config("t0 must be at least 1".into()));
        }
        if self.code_dim == 0 || self.codebook_size < 2 {
            return Err(TokenizerError::Config("codebook too small".into()));
        }
        Ok(())
    }

    pub fn active_modalities(&self) -> Vec<Modality> {
        let mut v = Vec::new();
        if self.rgb {
            v.push(Modality::Rgb);
        }
        if self.depth {
            v.push(Modality::Depth);
        }
        if self.mask {
            v.push(Modality::Mask);
        }
        v
    }

    /// Context grid side length (H/4).
    pub fn context_grid(&self) -> usize {
        self.h / 4
    }

    /// Dynamic grid side length (H/8).
    pub fn dynamic_grid(&self) -> usize {
        self.h / 8
    }

    pub fn context_tokens_per_frame(&self) -> usize {
        self.context_grid() * self.context_grid()
    }

    pub fn dynamic_tokens_per_frame(&self) -> usize {
        self.dynamic_grid() * self.dynamic_grid()
    }
}

/// A frame with every channel scaled to [0,1]; depth is divided by the
/// recorded depth scale.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedObs {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub mask: Vec<f32>,
}

impl NormalizedObs {
    pub fn from_observation(obs: &Observation, depth_scale: f32) -> Self {
        Self {
            h: obs.h,
            w: obs.w,
            rgb: obs.rgb.clone(),
            depth: obs.depth.iter().map(|d| d / depth_scale).collect(),
            mask: obs.mask.clone(),
        }
    }

    pub fn to_observation(&self, depth_scale: f32) -> Observation {
        Observation {
            h: self.h,
            w: self.w,
            rgb: self.rgb.clone(),
            depth: self.depth.iter().map(|d| d * depth_scale).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.h * self.w;
        if self.rgb.len() != 3 * hw || self.depth.len() != hw || self.mask.len() != hw {
            return Err(TokenizerError::OutOfRange(format!(
                "channel lengths {}/{}/{} for {}x{}",
                self.rgb.len(),
                self.depth.len(),
                self.mask.len(),
                self.h,
                self.w
            )));
        }
        let depth_max = self.depth.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        if depth_max > 1.0 + 1e-6 {
            return Err(TokenizerError::UnnormalizedDepth(depth_max));
        }
        for (name, chan) in [("rgb", &self.rgb), ("depth", &self.depth), ("mask", &self.mask)] {
            if chan.iter().any(|v| !v.is_finite() || *v < -1e-6 || *v > 1.0 + 1e-6) {
                return Err(TokenizerError::OutOfRange(format!("{name} outside [0,1]")));
            }
        }
        Ok(())
    }

    fn modality_tensor(&self, m: Modality) -> Tensor {
        let data = match m {
            Modality::Rgb => self.rgb.clone(),
            Modality::Depth => self.depth.clone(),
            Modality::Mask => self.mask.clone(),
        };
        Tensor::new(vec![1, m.channels(), self.h, self.w], data).expect("validated shape")
    }
}

/// Converts every frame of a trajectory to normalized model inputs.
pub fn normalized_frames(traj: &Trajectory) -> Vec<NormalizedObs> {
    traj.observations
        .iter()
        .map(|o| NormalizedObs::from_observation(o, traj.meta.depth_scale))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Context,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub kind: GridKind,
    pub grid_h: usize,
    pub grid_w: usize,
    pub indices: Vec<usize>,
    pub frame_index: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Pre-quantization context bottleneck features of the T0 context frames,
/// concatenated along the token axis: [t0 · (H/4)², code_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    pub t0: usize,
    pub tokens_per_frame: usize,
    pub features: Tensor,
}

/// Nearest codebook row (Euclidean) for each feature row; ties break to
/// the lowest index.
pub fn nearest_indices(features: &Tensor, codebook: &Tensor) -> Vec<usize> {
    let d = features.shape()[1];
    let k = codebook.shape()[0];
    assert_eq!(codebook.shape()[1], d, "code dim mismatch");
    let n = features.shape()[0];
    (0..n)
        .map(|i| nearest_code(&features.data()[i * d..(i + 1) * d], codebook.data(), k, d))
        .collect()
}

struct QuantOut {
    /// Straight-through features: value ≈ quantized, gradient = identity
    /// into the encoder features.
    st: Var,
    indices: Vec<usize>,
    codebook_loss: Var,
    commit_loss: Var,
}

#[derive(Debug, Clone, Copy)]
enum Pair {
    Context,
    Dynamic,
}

impl Pair {
    fn enc(self) -> &'static str {
        match self {
            Pair::Context => "ctx.enc",
            Pair::Dynamic => "dyn.enc",
        }
    }

    fn dec(self) -> &'static str {
        match self {
            Pair::Context => "ctx.dec",
            Pair::Dynamic => "dyn.dec",
        }
    }

    fn codebook(self) -> &'static str {
        match self {
            Pair::Context => "tok.cb.ctx",
            Pair::Dynamic => "tok.cb.dyn",
        }
    }
}

/// Decoded modality planes as graph variables.
pub struct DecodedHeads {
    pub rgb: Option<Var>,
    pub depth: Option<Var>,
    pub mask: Option<Var>,
}

#[derive(Clone)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub store: ParamStore,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(mix_seed(seed, 0x70CE));
        let mut store = ParamStore::new();
        let [w0, w1, w2] = cfg.widths;
        let d = cfg.code_dim;
        let k = cfg.codebook_size;

        let conv = |s: &mut ParamStore, rng: &mut Rng, name: &str, co: usize, ci: usize, ks: usize| {
            s.init(&format!("{name}.w"), &[co, ci, ks, ks], Init::Kaiming { fan_in: ci * ks * ks }, rng);
            s.init(&format!("{name}.b"), &[co], Init::Zeros, rng);
        };
        let res = |s: &mut ParamStore, rng: &mut Rng, prefix: &str, c: usize| {
            s.init(&format!("{prefix}.n1.g"), &[c], Init::Const(1.0), rng);
            s.init(&format!("{prefix}.c1.w"), &[c, c, 3, 3], Init::Kaiming { fan_in: c * 9 }, rng);
            s.init(&format!("{prefix}.c1.b"), &[c], Init::Zeros, rng);
            s.init(&format!("{prefix}.n2.g"), &[c], Init::Const(1.0), rng);
            // Zero-initialized second conv makes each block start as identity.
            s.init(&format!("{prefix}.c2.w"), &[c, c, 3, 3], Init::Zeros, rng);
            s.init(&format!("{prefix}.c2.b"), &[c], Init::Zeros, rng);
        };
        let xattn = |s: &mut ParamStore, rng: &mut Rng, prefix: &str| {
            s.init(&format!("{prefix}.n.g"), &[w2], Init::Const(1.0), rng);
            s.init(&format!("{prefix}.wq"), &[w2, d], Init::Xavier { fan_in: w2, fan_out: d }, rng);
            s.init(&format!("{prefix}.wk"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }, rng);
            s.init(&format!("{prefix}.wv"), &[d, d], Init::Xavier { fan_in: d, fan_out: d }, rng);
            // Small output projection keeps early training stable while
            // leaving the conditioning path live from the first step.
            s.init(&format!("{prefix}.wo"), &[d, w2], Init::Normal { std: 0.02 }, rng);
        };

        for pair in [Pair::Context, Pair::Dynamic] {
            let enc = format!("tok.{}", pair.enc());
            for m in cfg.active_modalities() {
                conv(&mut store, &mut rng, &format!("{enc}.stem.{}", m.tag()), w0, m.channels(), 3);
                store.init(&format!("{enc}.emb.{}", m.tag()), &[w0], Init::Normal { std: 0.1 }, &mut rng);
            }
            res(&mut store, &mut rng, &format!("{enc}.s1"), w0);
            conv(&mut store, &mut rng, &format!("{enc}.down1"), w1, w0, 3);
            res(&mut store, &mut rng, &format!("{enc}.s2"), w1);
            conv(&mut store, &mut rng, &format!("{enc}.down2"), w2, w1, 3);
            res(&mut store, &mut rng, &format!("{enc}.s3"), w2);
            if matches!(pair, Pair::Dynamic) {
                conv(&mut store, &mut rng, &format!("{enc}.down3"), w2, w2, 3);
                xattn(&mut store, &mut rng, &format!("{enc}.xa"));
            }
            conv(&mut store, &mut rng, &format!("{enc}.proj"), d, w2, 1);

            let dec = format!("tok.{}", pair.dec());
            conv(&mut store, &mut rng, &format!("{dec}.proj"), w2, d, 1);
            if matches!(pair, Pair::Dynamic) {
                xattn(&mut store, &mut rng, &format!("{dec}.xa"));
                res(&mut store, &mut rng, &format!("{dec}.s4"), w2);
                conv(&mut store, &mut rng, &format!("{dec}.ch0"), w2, w2, 3);
            }
            res(&mut store, &mut rng, &format!("{dec}.s3"), w2);
            conv(&mut store, &mut rng, &format!("{dec}.ch1"), w1, w2, 3);
            res(&mut store, &mut rng, &format!("{dec}.s2"), w1);
            conv(&mut store, &mut rng, &format!("{dec}.ch2"), w0, w1, 3);
            res(&mut store, &mut rng, &format!("{dec}.s1"), w0);
            store.init(&format!("{dec}.out.g"), &[w0], Init::Const(1.0), &mut rng);
            for m in cfg.active_modalities() {
                conv(&mut store, &mut rng, &format!("{dec}.head.{}", m.tag()), m.channels(), w0, 3);
            }
        }
        store.init(Pair::Context.codebook(), &[k, d], Init::Normal { std: 0.5 }, &mut rng);
        store.init(Pair::Dynamic.codebook(), &[k, d], Init::Normal { std: 0.5 }, &mut rng);
        Ok(Self { cfg, store })
    }

    pub fn from_parts(cfg: TokenizerConfig, store: ParamStore) -> Self {
        Self { cfg, store }
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.store, id)
    }

    fn resblock(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let g1 = self.p(g, &format!("{prefix}.n1.g"));
        let mut h = g.rmsnorm_channels(x, g1, NORM_EPS)?;
        h = g.silu(h);
        let w1 = self.p(g, &format!("{prefix}.c1.w"));
        let b1 = self.p(g, &format!("{prefix}.c1.b"));
        h = g.conv2d(h, w1, Some(b1), 1, 1)?;
        let g2 = self.p(g, &format!("{prefix}.n2.g"));
        h = g.rmsnorm_channels(h, g2, NORM_EPS)?;
        h = g.silu(h);
        let w2 = self.p(g, &format!("{prefix}.c2.w"));
        let b2 = self.p(g, &format!("{prefix}.c2.b"));
        h = g.conv2d(h, w2, Some(b2), 1, 1)?;
        Ok(g.add(x, h)?)
    }

    fn conv_named(&self, g: &mut Graph, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        Ok(g.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// Per-modality stem outputs (conv + modality embedding), before the
    /// sum into the trunk.
    fn stem_outputs(&self, g: &mut Graph, enc: &str, obs: &NormalizedObs) -> Result<Vec<(Modality, Var)>> {
        let (h, w) = (self.cfg.h, self.cfg.w);
        let w0 = self.cfg.widths[0];
        let mut outs = Vec::new();
        for m in self.cfg.active_modalities() {
            let x = g.constant(obs.modality_tensor(m));
            let y = self.conv_named(g, &format!("tok.{enc}.stem.{}", m.tag()), x, 1, 1)?;
            let rows = g.nchw_to_rows(y)?;
            let emb = self.p(g, &format!("tok.{enc}.emb.{}", m.tag()));
            let rows = g.add_bias_rows(rows, emb)?;
            let y = g.rows_to_nchw(rows, 1, w0, h, w)?;
            outs.push((m, y));
        }
        Ok(outs)
    }

    fn stems_summed(&self, g: &mut Graph, enc: &str, obs: &NormalizedObs) -> Result<Var> {
        let outs = self.stem_outputs(g, enc, obs)?;
        let mut acc = outs[0].1;
        for (_, y) in &outs[1..] {
            acc = g.add(acc, *y)?;
        }
        Ok(acc)
    }

    fn cross_attention(&self, g: &mut Graph, prefix: &str, x: Var, cache: Var) -> Result<Var> {
        let shape = g.val(x).shape().to_vec();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let rows = g.nchw_to_rows(x)?;
        let gam = self.p(g, &format!("{prefix}.n.g"));
        let xn = g.rmsnorm_rows(rows, gam, NORM_EPS)?;
        let wq = self.p(g, &format!("{prefix}.wq"));
        let wk = self.p(g, &format!("{prefix}.wk"));
        let wv = self.p(g, &format!("{prefix}.wv"));
        let wo = self.p(g, &format!("{prefix}.wo"));
        let q = g.linear(xn, wq, None)?;
        let k = g.linear(cache, wk, None)?;
        let v = g.linear(cache, wv, None)?;
        let s = g.attn_scores(q, k, 1, false)?;
        let p = g.softmax_rows(s)?;
        let mix = g.attn_mix(p, v, 1)?;
        let o = g.linear(mix, wo, None)?;
        let y = g.add(rows, o)?;
        Ok(g.rows_to_nchw(y, 1, c, h, w)?)
    }

    /// Encoder forward to pre-quantization bottleneck rows [tokens, D].
    fn encode_features(
        &self,
        g: &mut Graph,
        pair: Pair,
        obs: &NormalizedObs,
        cache: Option<Var>,
    ) -> Result<Var> {
        let enc = pair.enc();
        let full = format!("tok.{enc}");
        let mut x = self.stems_summed(g, enc, obs)?;
        x = self.resblock(g, &format!("{full}.s1"), x)?;
        x = self.conv_named(g, &format!("{full}.down1"), x, 2, 1)?;
        x = self.resblock(g, &format!("{full}.s2"), x)?;
        x = self.conv_named(g, &format!("{full}.down2"), x, 2, 1)?;
        x = self.resblock(g, &format!("{full}.s3"), x)?;
        if matches!(pair, Pair::Dynamic) {
            x = self.conv_named(g, &format!("{full}.down3"), x, 2, 1)?;
            let cache = cache.expect("dynamic encode requires a context cache");
            x = self.cross_attention(g, &format!("{full}.xa"), x, cache)?;
        }
        x = self.conv_named(g, &format!("{full}.proj"), x, 1, 0)?;
        Ok(g.nchw_to_rows(x)?)
    }

    /// Decoder forward from bottleneck rows [tokens, D] to modality planes.
    fn decode_heads(
        &self,
        g: &mut Graph,
        pair: Pair,
        z_rows: Var,
        cache: Option<Var>,
    ) -> Result<DecodedHeads> {
        let dec = pair.dec();
        let full = format!("tok.{dec}");
        let w0 = self.cfg.widths[0];
        let d = self.cfg.code_dim;
        let grid = match pair {
            Pair::Context => self.cfg.context_grid(),
            Pair::Dynamic => self.cfg.dynamic_grid(),
        };
        let mut x = g.rows_to_nchw(z_rows, 1, d, grid, grid)?;
        x = self.conv_named(g, &format!("{full}.proj"), x, 1, 0)?;
        if matches!(pair, Pair::Dynamic) {
            let cache = cache.expect("dynamic decode requires a context cache");
            x = self.cross_attention(g, &format!("{full}.xa"), x, cache)?;
            x = self.resblock(g, &format!("{full}.s4"), x)?;
            x = self.conv_named(g, &format!("{full}.ch0"), x, 1, 1)?;
            x = g.upsample2x(x)?;
        }
        x = self.resblock(g, &format!("{full}.s3"), x)?;
        x = self.conv_named(g, &format!("{full}.ch1"), x, 1, 1)?;
        x = g.upsample2x(x)?;
        x = self.resblock(g, &format!("{full}.s2"), x)?;
        x = self.conv_named(g, &format!("{full}.ch2"), x, 1, 1)?;
        x = g.upsample2x(x)?;
        x = self.resblock(g, &format!("{full}.s1"), x)?;
        let gam = self.p(g, &format!("{full}.out.g"));
        x = g.rmsnorm_channels(x, gam, NORM_EPS)?;
        x = g.silu(x);
        debug_assert_eq!(g.val(x).shape(), &[1, w0, self.cfg.h, self.cfg.w]);
        let mut heads = DecodedHeads { rgb: None, depth: None, mask: None };
        for m in self.cfg.active_modalities() {
            let y = self.conv_named(g, &format!("{full}.head.{}", m.tag()), x, 1, 1)?;
            let y = g.sigmoid(y);
            match m {
                Modality::Rgb => heads.rgb = Some(y),
                Modality::Depth => heads.depth = Some(y),
                Modality::Mask => heads.mask = Some(y),
            }
        }
        Ok(heads)
    }

    fn quantize_graph(&self, g: &mut Graph, z_e: Var, pair: Pair) -> Result<QuantOut> {
        let book = self.p(g, pair.codebook());
        let indices = nearest_indices(g.val(z_e), g.val(book));
        let e = g.gather_rows(book, &indices)?;
        let z_detached = g.detach(z_e);
        let codebook_loss = g.mse_loss(e, z_detached)?;
        let e_detached = g.detach(e);
        let commit_raw = g.mse_loss(z_e, e_detached)?;
        let commit_loss = g.mul_scalar(commit_raw, self.cfg.beta);
        let delta = g.sub(e, z_e)?;
        let delta = g.detach(delta);
        let st = g.add(z_e, delta)?;
        Ok(QuantOut { st, indices, codebook_loss, commit_loss })
    }

    fn grid_from_indices(&self, kind: GridKind, indices: Vec<usize>) -> TokenGrid {
        let side = match kind {
            GridKind::Context => self.cfg.context_grid(),
            GridKind::Dynamic => self.cfg.dynamic_grid(),
        };
        TokenGrid { kind, grid_h: side, grid_w: side, indices, frame_index: 0 }
    }

    fn check_grid(&self, grid: &TokenGrid, kind: GridKind) -> Result<()> {
        if grid.kind != kind {
            return Err(TokenizerError::WrongKind { expected: kind, got: grid.kind });
        }
        let side = match kind {
            GridKind::Context => self.cfg.context_grid(),
            GridKind::Dynamic => self.cfg.dynamic_grid(),
        };
        if grid.grid_h != side || grid.grid_w != side || grid.len() != side * side {
            return Err(TokenizerError::BadGridShape {
                got_h: grid.grid_h,
                got_w: grid.grid_w,
                want_h: side,
                want_w: side,
            });
        }
        for &i in &grid.indices {
            if i >= self.cfg.codebook_size {
                return Err(TokenizerError::TokenOutOfRange { index: i, k: self.cfg.codebook_size });
            }
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ContextCache) -> Result<()> {
        let per = self.cfg.context_tokens_per_frame();
        if cache.t0 != self.cfg.t0 || cache.tokens_per_frame != per {
            return Err(TokenizerError::CacheMismatch(format!(
                "cache t0={} tokens={} vs config t0={} tokens={per}",
                cache.t0, cache.tokens_per_frame, self.cfg.t0
            )));
        }
        let want = [cache.t0 * per, self.cfg.code_dim];
        if cache.features.shape() != want {
            return Err(TokenizerError::CacheMismatch(format!(
                "cache features {:?}, expected {want:?}",
                cache.features.shape()
            )));
        }
        Ok(())
    }

    fn heads_to_obs(&self, g: &Graph, heads: &DecodedHeads) -> NormalizedObs {
        let hw = self.cfg.h * self.cfg.w;
        let plane = |v: Option<Var>, ch: usize| -> Vec<f32> {
            match v {
                Some(var) => g.val(var).data().to_vec(),
                None => vec![0.0; ch * hw],
            }
        };
        NormalizedObs {
            h: self.cfg.h,
            w: self.cfg.w,
            rgb: plane(heads.rgb, 3),
            depth: plane(heads.depth, 1),
            mask: plane(heads.mask, 1),
        }
    }

    /// Maps a normalized frame to the (H/4)² context token grid; also
    /// returns the pre-quantization bottleneck features [tokens, D].
    pub fn encode_context(&self, obs: &NormalizedObs) -> Result<(TokenGrid, Tensor)> {
        obs.validate()?;
        let mut g = Graph::inference();
        let z = self.encode_features(&mut g, Pair::Context, obs, None)?;
        let book = self.store.get_by_name(Pair::Context.codebook()).unwrap();
        let indices = nearest_indices(g.val(z), book);
        Ok((self.grid_from_indices(GridKind::Context, indices), g.val(z).clone()))
    }

    /// Reconstructs a frame from context tokens.
    pub fn decode_context(&self, grid: &TokenGrid) -> Result<NormalizedObs> {
        self.check_grid(grid, GridKind::Context)?;
        let mut g = Graph::inference();
        let book = self.p(&mut g, Pair::Context.codebook());
        let e = g.gather_rows(book, &grid.indices)?;
        let heads = self.decode_heads(&mut g, Pair::Context, e, None)?;
        Ok(self.heads_to_obs(&g, &heads))
    }

    /// Runs the context encoder over the T0 context frames and caches
    /// their pre-quantization bottleneck features.
    pub fn build_cache(&self, context_frames: &[NormalizedObs]) -> Result<ContextCache> {
        if context_frames.len() != self.cfg.t0 {
            return Err(TokenizerError::CacheMismatch(format!(
                "{} context frames, config t0={}",
                context_frames.len(),
                self.cfg.t0
            )));
        }
        let per = self.cfg.context_tokens_per_frame();
        let d = self.cfg.code_dim;
        let mut data = Vec::with_capacity(self.cfg.t0 * per * d);
        for obs in context_frames {
            let (_, features) = self.encode_context(obs)?;
            data.extend_from_slice(features.data());
        }
        Ok(ContextCache {
            t0: self.cfg.t0,
            tokens_per_frame: per,
            features: Tensor::new(vec![self.cfg.t0 * per, d], data).expect("cache shape"),
        })
    }

    /// Maps a future frame to the (H/8)² dynamic grid, conditioned on the
    /// context cache.
    pub fn encode_dynamic(&self, obs: &NormalizedObs, cache: &ContextCache) -> Result<TokenGrid> {
        obs.validate()?;
        self.check_cache(cache)?;
        let mut g = Graph::inference();
        let cache_var = g.constant(cache.features.clone());
        let z = self.encode_features(&mut g, Pair::Dynamic, obs, Some(cache_var))?;
        let book = self.store.get_by_name(Pair::Dynamic.codebook()).unwrap();
        let indices = nearest_indices(g.val(z), book);
        Ok(self.grid_from_indices(GridKind::Dynamic, indices))
    }

    /// Reconstructs a future frame from dynamic tokens and the cache.
    pub fn decode_dynamic(&self, grid: &TokenGrid, cache: &ContextCache) -> Result<NormalizedObs> {
        self.check_grid(grid, GridKind::Dynamic)?;
        self.check_cache(cache)?;
        let mut g = Graph::inference();
        let cache_var = g.constant(cache.features.clone());
        let book = self.p(&mut g, Pair::Dynamic.codebook());
        let e = g.gather_rows(book, &grid.indices)?;
        let heads = self.decode_heads(&mut g, Pair::Dynamic, e, Some(cache_var))?;
        Ok(self.heads_to_obs(&g, &heads))
    }

    /// Pre-quantization dynamic bottleneck features for a frame (used by
    /// perturbation tests).
    pub fn dynamic_features(&self, obs: &NormalizedObs, cache: &ContextCache) -> Result<Tensor> {
        obs.validate()?;
        self.check_cache(cache)?;
        let mut g = Graph::inference();
        let cache_var = g.constant(cache.features.clone());
        let z = self.encode_features(&mut g, Pair::Dynamic, obs, Some(cache_var))?;
        Ok(g.val(z).clone())
    }

    /// Per-modality stem activations of one encoder, before the stem sum.
    pub fn stem_activations(&self, dynamic: bool, obs: &NormalizedObs) -> Result<Vec<(Modality, Tensor)>> {
        obs.validate()?;
        let enc = if dynamic { "dyn.enc" } else { "ctx.enc" };
        let mut g = Graph::inference();
        let outs = self.stem_outputs(&mut g, enc, obs)?;
        Ok(outs.into_iter().map(|(m, v)| (m, g.val(v).clone())).collect())
    }

    /// Full training loss on one window: T0 context frames plus any
    /// number of future frames, all from one sequence.
    pub fn window_loss(
        &self,
        g: &mut Graph,
        context_frames: &[NormalizedObs],
        future_frames: &[NormalizedObs],
    ) -> Result<WindowLoss> {
        if context_frames.len() != self.cfg.t0 {
            return Err(TokenizerError::CacheMismatch(format!(
                "{} context frames, config t0={}",
                context_frames.len(),
                self.cfg.t0
            )));
        }
        for f in context_frames.iter().chain(future_frames) {
            f.validate()?;
        }
        let mut recon: [Option<Var>; 3] = [None, None, None];
        let mut vq_codebook: Option<Var> = None;
        let mut vq_commit: Option<Var> = None;
        let mut ctx_indices = Vec::new();
        let mut dyn_indices = Vec::new();
        let mut add_to = |g: &mut Graph, slot: &mut Option<Var>, v: Var| -> Result<()> {
            *slot = Some(match slot.take() {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
            Ok(())
        };

        let mut cache_parts = Vec::new();
        for obs in context_frames {
            let z = self.encode_features(g, Pair::Context, obs, None)?;
            cache_parts.push(z);
            let q = self.quantize_graph(g, z, Pair::Context)?;
            ctx_indices.push(q.indices);
            add_to(g, &mut vq_codebook, q.codebook_loss)?;
            add_to(g, &mut vq_commit, q.commit_loss)?;
            let heads = self.decode_heads(g, Pair::Context, q.st, None)?;
            self.recon_terms(g, &heads, obs, &mut recon, &mut add_to)?;
        }

        if !future_frames.is_empty() {
            let cache = self.assemble_cache(g, &cache_parts)?;
            for obs in future_frames {
                let z = self.encode_features(g, Pair::Dynamic, obs, Some(cache))?;
                let q = self.quantize_graph(g, z, Pair::Dynamic)?;
                dyn_indices.push(q.indices);
                add_to(g, &mut vq_codebook, q.codebook_loss)?;
                add_to(g, &mut vq_commit, q.commit_loss)?;
                let heads = self.decode_heads(g, Pair::Dynamic, q.st, Some(cache))?;
                self.recon_terms(g, &heads, obs, &mut recon, &mut add_to)?;
            }
        }

        let zero = g.constant(Tensor::scalar(0.0));
        let [rgb, depth, mask] = recon.map(|r| r.unwrap_or(zero));
        let codebook = vq_codebook.unwrap_or(zero);
        let commit = vq_commit.unwrap_or(zero);
        let mut total = g.add(rgb, depth)?;
        total = g.add(total, mask)?;
        total = g.add(total, codebook)?;
        total = g.add(total, commit)?;
        Ok(WindowLoss { total, rgb, depth, mask, codebook, commit, ctx_indices, dyn_indices })
    }

    /// Concatenates per-frame context feature rows into one cache tensor
    /// (gradient-carrying version of `ContextCache`).
    fn assemble_cache(&self, g: &mut Graph, cache_parts: &[Var]) -> Result<Var> {
        let per = self.cfg.context_tokens_per_frame();
        let total_rows = self.cfg.t0 * per;
        if cache_parts.len() == 1 {
            return Ok(cache_parts[0]);
        }
        let mut acc: Option<Var> = None;
        for (fi, part) in cache_parts.iter().enumerate() {
            let rows: Vec<usize> = (fi * per..(fi + 1) * per).collect();
            let placed = g.place_rows(*part, &rows, total_rows)?;
            acc = Some(match acc {
                Some(a) => g.add(a, placed)?,
                None => placed,
            });
        }
        Ok(acc.unwrap())
    }

    /// Captures the stop-gradient constants of one window (code
    /// assignments, pre-quantization features, selected code vectors) at
    /// the current parameters.
    pub fn freeze_window(
        &self,
        context_frames: &[NormalizedObs],
        future_frames: &[NormalizedObs],
    ) -> Result<WindowFreeze> {
        if context_frames.len() != self.cfg.t0 {
            return Err(TokenizerError::CacheMismatch(format!(
                "{} context frames, config t0={}",
                context_frames.len(),
                self.cfg.t0
            )));
        }
        let mut g = Graph::inference();
        let mut out = WindowFreeze { context: Vec::new(), future: Vec::new() };
        let mut cache_parts = Vec::new();
        for obs in context_frames {
            let z = self.encode_features(&mut g, Pair::Context, obs, None)?;
            cache_parts.push(z);
            out.context.push(self.freeze_frame(&g, z, Pair::Context));
        }
        if !future_frames.is_empty() {
            let cache = self.assemble_cache(&mut g, &cache_parts)?;
            for obs in future_frames {
                let z = self.encode_features(&mut g, Pair::Dynamic, obs, Some(cache))?;
                out.future.push(self.freeze_frame(&g, z, Pair::Dynamic));
            }
        }
        Ok(out)
    }

    fn freeze_frame(&self, g: &Graph, z: Var, pair: Pair) -> FrameFreeze {
        let book = self.store.get_by_name(pair.codebook()).unwrap();
        let z_bar = g.val(z).clone();
        let indices = nearest_indices(&z_bar, book);
        let d = self.cfg.code_dim;
        let mut e_data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            e_data.extend_from_slice(&book.data()[i * d..(i + 1) * d]);
        }
        let e_bar = Tensor::new(vec![indices.len(), d], e_data).unwrap();
        FrameFreeze { indices, z_bar, e_bar }
    }

    /// Window loss with every stop-gradient argument pinned to the
    /// constants captured by [`freeze_window`].  At the capture point the
    /// value equals `window_loss` and the function is smooth in all
    /// parameters; its true gradient is exactly the straight-through
    /// gradient that `window_loss` backpropagates, so finite-difference
    /// verification runs against this form.
    pub fn window_loss_frozen(
        &self,
        g: &mut Graph,
        context_frames: &[NormalizedObs],
        future_frames: &[NormalizedObs],
        frozen: &WindowFreeze,
    ) -> Result<Var> {
        if context_frames.len() != frozen.context.len() || future_frames.len() != frozen.future.len()
        {
            return Err(TokenizerError::CacheMismatch(format!(
                "frozen constants cover {}+{} frames, window has {}+{}",
                frozen.context.len(),
                frozen.future.len(),
                context_frames.len(),
                future_frames.len()
            )));
        }
        let mut total: Option<Var> = None;
        let mut add_to = |g: &mut Graph, acc: &mut Option<Var>, v: Var| -> Result<()> {
            *acc = Some(match acc.take() {
                Some(a) => g.add(a, v)?,
                None => v,
            });
            Ok(())
        };
        let mut cache_parts = Vec::new();
        for (obs, fr) in context_frames.iter().zip(&frozen.context) {
            let z = self.encode_features(g, Pair::Context, obs, None)?;
            cache_parts.push(z);
            let st = self.quantize_frozen(g, z, Pair::Context, fr, &mut total, &mut add_to)?;
            let heads = self.decode_heads(g, Pair::Context, st, None)?;
            let mut recon: [Option<Var>; 3] = [None, None, None];
            self.recon_terms(g, &heads, obs, &mut recon, &mut add_to)?;
            for r in recon.into_iter().flatten() {
                add_to(g, &mut total, r)?;
            }
        }
        if !future_frames.is_empty() {
            let cache = self.assemble_cache(g, &cache_parts)?;
            for (obs, fr) in future_frames.iter().zip(&frozen.future) {
                let z = self.encode_features(g, Pair::Dynamic, obs, Some(cache))?;
                let st = self.quantize_frozen(g, z, Pair::Dynamic, fr, &mut total, &mut add_to)?;
                let heads = self.decode_heads(g, Pair::Dynamic, st, Some(cache))?;
                let mut recon: [Option<Var>; 3] = [None, None, None];
                self.recon_terms(g, &heads, obs, &mut recon, &mut add_to)?;
                for r in recon.into_iter().flatten() {
                    add_to(g, &mut total, r)?;
                }
            }
        }
        Ok(total.expect("window has at least one frame"))
    }

    /// Frozen-constant analogue of `quantize_graph`: adds the codebook and
    /// commitment terms to `total` and returns the decoder input
    /// `z + (e_bar - z_bar)`.
    fn quantize_frozen(
        &self,
        g: &mut Graph,
        z_e: Var,
        pair: Pair,
        fr: &FrameFreeze,
        total: &mut Option<Var>,
        add_to: &mut impl FnMut(&mut Graph, &mut Option<Var>, Var) -> Result<()>,
    ) -> Result<Var> {
        let book = self.p(g, pair.codebook());
        let e = g.gather_rows(book, &fr.indices)?;
        let z_bar = g.constant(fr.z_bar.clone());
        let codebook_loss = g.mse_loss(e, z_bar)?;
        add_to(g, total, codebook_loss)?;
        let e_bar = g.constant(fr.e_bar.clone());
        let commit_raw = g.mse_loss(z_e, e_bar)?;
        let commit_loss = g.mul_scalar(commit_raw, self.cfg.beta);
        add_to(g, total, commit_loss)?;
        let mut off = fr.e_bar.clone();
        for (o, zb) in off.data_mut().iter_mut().zip(fr.z_bar.data()) {
            *o -= *zb;
        }
        let off = g.constant(off);
        Ok(g.add(z_e, off)?)
    }

    fn recon_terms(
        &self,
        g: &mut Graph,
        heads: &DecodedHeads,
        target: &NormalizedObs,
        recon: &mut [Option<Var>; 3],
        add_to: &mut impl FnMut(&mut Graph, &mut Option<Var>, Var) -> Result<()>,
    ) -> Result<()> {
        let pairs = [
            (heads.rgb, target.modality_tensor(Modality::Rgb), 0usize),
            (heads.depth, target.modality_tensor(Modality::Depth), 1),
            (heads.mask, target.modality_tensor(Modality::Mask), 2),
        ];
        for (pred, tgt, slot) in pairs {
            if let Some(pred) = pred {
                let t = g.constant(tgt);
                let l = g.l1_loss(pred, t)?;
                add_to(g, &mut recon[slot], l)?;
            }
        }
        Ok(())
    }

    /// Loss over full sequences (each: T0 context frames + rest future),
    /// evaluated without gradients.
    pub fn tokenizer_loss(&self, sequences: &[Vec<NormalizedObs>]) -> Result<TokenizerLossBreakdown> {
        if sequences.is_empty() {
            return Err(TokenizerError::EmptyDataset);
        }
        let mut out = TokenizerLossBreakdown::default();
        for seq in sequences {
            if seq.len() <= self.cfg.t0 {
                return Err(TokenizerError::SequenceTooShort { t: seq.len(), t0: self.cfg.t0 });
            }
            let mut g = Graph::inference();
            let wl = self.window_loss(&mut g, &seq[..self.cfg.t0], &seq[self.cfg.t0..])?;
            out.total += g.val(wl.total).item().unwrap();
            out.rgb += g.val(wl.rgb).item().unwrap();
            out.depth += g.val(wl.depth).item().unwrap();
            out.mask += g.val(wl.mask).item().unwrap();
            out.codebook += g.val(wl.codebook).item().unwrap();
            out.commit += g.val(wl.commit).item().unwrap();
        }
        Ok(out)
    }

    /// Distinct code usage fractions (context, dynamic) over a dataset.
    pub fn codebook_usage(&self, sequences: &[Vec<NormalizedObs>]) -> Result<(f32, f32)> {
        let k = self.cfg.codebook_size;
        let mut used_ctx = vec![false; k];
        let mut used_dyn = vec![false; k];
        for seq in sequences {
            if seq.len() <= self.cfg.t0 {
                return Err(TokenizerError::SequenceTooShort { t: seq.len(), t0: self.cfg.t0 });
            }
            let ctx = &seq[..self.cfg.t0];
            for obs in ctx {
                let (grid, _) = self.encode_context(obs)?;
                for i in grid.indices {
                    used_ctx[i] = true;
                }
            }
            let cache = self.build_cache(ctx)?;
            for obs in &seq[self.cfg.t0..] {
                let grid = self.encode_dynamic(obs, &cache)?;
                for i in grid.indices {
                    used_dyn[i] = true;
                }
            }
        }
        let frac = |v: &[bool]| v.iter().filter(|&&b| b).count() as f32 / k as f32;
        Ok((frac(&used_ctx), frac(&used_dyn)))
    }
}

pub struct WindowLoss {
    pub total: Var,
    pub rgb: Var,
    pub depth: Var,
    pub mask: Var,
    pub codebook: Var,
    pub commit: Var,
    pub ctx_indices: Vec<Vec<usize>>,
    pub dyn_indices: Vec<Vec<usize>>,
}

/// Stop-gradient constants of one frame, captured at a parameter point:
/// code assignments, pre-quantization features, and the selected code rows.
#[derive(Debug, Clone)]
pub struct FrameFreeze {
    pub indices: Vec<usize>,
    pub z_bar: Tensor,
    pub e_bar: Tensor,
}

/// Stop-gradient constants for a full training window.
#[derive(Debug, Clone)]
pub struct WindowFreeze {
    pub context: Vec<FrameFreeze>,
    pub future: Vec<FrameFreeze>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TokenizerLossBreakdown {
    pub total: f32,
    pub rgb: f32,
    pub depth: f32,
    pub mask: f32,
    pub codebook: f32,
    pub commit: f32,
}

impl TokenizerLossBreakdown {
    pub fn component_sum(&self) -> f32 {
        self.rgb + self.depth + self.mask + self.codebook + self.commit
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub start_step: usize,
    pub lr: f32,
    /// Future frames sampled per training window.
    pub window_dynamic: usize,
    pub log_every: usize,
    /// Dead-code revival cadence in steps (0 disables).
    pub revival_every: usize,
    /// Fraction of the schedule after which revival stops.
    pub revival_stop_frac: f32,
    /// Dead entries replaced per codebook per revival event.
    pub revival_quota: usize,
    pub grad_clip: f32,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            start_step: 0,
            lr: 1e-3,
            window_dynamic: 2,
            log_every: 25,
            revival_every: 100,
            revival_stop_frac: 0.8,
            revival_quota: 8,
            grad_clip: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenizerLogRow {
    pub step: usize,
    pub total: f32,
    pub rgb: f32,
    pub depth: f32,
    pub mask: f32,
    pub codebook: f32,
    pub commit: f32,
}

#[derive(Debug, Clone, Default)]
pub struct TokenizerTrainReport {
    pub rows: Vec<TokenizerLogRow>,
    pub steps_run: usize,
}

/// One gradient step on a sampled window; exposed so training can be
/// segmented (for snapshots) without losing bitwise reproducibility:
/// all per-step randomness derives from (seed, step) alone.
pub fn tokenizer_train_step(
    tok: &mut Tokenizer,
    opt: &mut Adam,
    dataset: &[Vec<NormalizedObs>],
    cfg: &TokenizerTrainConfig,
    seed: u64,
    step: usize,
) -> Result<TokenizerLogRow> {
    let mut rng = Rng::derive(mix_seed(seed, 0x57E9), step as u64);
    let t0 = tok.cfg.t0;
    let ti = rng.below(dataset.len());
    let seq = &dataset[ti];
    let future_pool = seq.len() - t0;
    let n_dyn = cfg.window_dynamic.min(future_pool);
    let mut picks: Vec<usize> = Vec::with_capacity(n_dyn);
    while picks.len() < n_dyn {
        let c = t0 + rng.below(future_pool);
        if !picks.contains(&c) {
            picks.push(c);
        }
    }
    let future: Vec<NormalizedObs> = picks.iter().map(|&i| seq[i].clone()).collect();

    let mut g = Graph::new();
    let wl = tok.window_loss(&mut g, &seq[..t0], &future)?;
    let row = TokenizerLogRow {
        step,
        total: g.val(wl.total).item()?,
        rgb: g.val(wl.rgb).item()?,
        depth: g.val(wl.depth).item()?,
        mask: g.val(wl.mask).item()?,
        codebook: g.val(wl.codebook).item()?,
        commit: g.val(wl.commit).item()?,
    };
    let grads = g.backward(wl.total)?;
    opt.step(&mut tok.store, &g, &grads)?;
    Ok(row)
}

/// Replaces codebook entries unused on a probe encoding of the dataset
/// with perturbed copies of currently used features.  Deterministic in
/// (seed, step); probe runs in inference mode.
pub fn revive_dead_codes(
    tok: &mut Tokenizer,
    dataset: &[Vec<NormalizedObs>],
    cfg: &TokenizerTrainConfig,
    seed: u64,
    step: usize,
) -> Result<usize> {
    let mut rng = Rng::derive(mix_seed(seed, 0xDEAD), step as u64);
    let k = tok.cfg.codebook_size;
    let d = tok.cfg.code_dim;
    let t0 = tok.cfg.t0;
    let probe_trajs = dataset.len().min(10);
    let dyn_per_traj = 3usize;

    let mut ctx_feats: Vec<f32> = Vec::new();
    let mut dyn_feats: Vec<f32> = Vec::new();
    let mut used_ctx = vec![false; k];
    let mut used_dyn = vec![false; k];
    for seq in dataset.iter().take(probe_trajs) {
        let ctx = &seq[..t0];
        let cache = tok.build_cache(ctx)?;
        for obs in ctx {
            let (grid, feats) = tok.encode_context(obs)?;
            for i in grid.indices {
                used_ctx[i] = true;
            }
            ctx_feats.extend_from_slice(feats.data());
        }
        let pool = seq.len() - t0;
        for _ in 0..dyn_per_traj.min(pool) {
            let fi = t0 + rng.below(pool);
            let feats = tok.dynamic_features(&seq[fi], &cache)?;
            let book = tok.store.get_by_name(Pair::Dynamic.codebook()).unwrap();
            for i in nearest_indices(&feats, book) {
                used_dyn[i] = true;
            }
            dyn_feats.extend_from_slice(feats.data());
        }
    }

    let mut revived = 0;
    for (book_name, used, feats) in [
        (Pair::Context.codebook(), used_ctx, ctx_feats),
        (Pair::Dynamic.codebook(), used_dyn, dyn_feats),
    ] {
        let n_src = feats.len() / d;
        if n_src == 0 {
            continue;
        }
        let dead: Vec<usize> = (0..k).filter(|&i| !used[i]).collect();
        let book = tok.store.get_by_name(book_name).unwrap().clone();
        let mut data = book.data().to_vec();
        for &entry in dead.iter().take(cfg.revival_quota) {
            let src = rng.below(n_src);
            for j in 0..d {
                data[entry * d + j] = feats[src * d + j] + rng.normal() * 0.02;
            }
            revived += 1;
        }
        let new_book = Tensor::new(book.shape().to_vec(), data).unwrap();
        tok.store.load(book_name, new_book).unwrap();
    }
    Ok(revived)
}

/// Trains the tokenizer in place.  `on_log` receives a row every
/// `log_every` steps and at the final step.
pub fn train_tokenizer(
    tok: &mut Tokenizer,
    opt: &mut Adam,
    dataset: &[Vec<NormalizedObs>],
    cfg: &TokenizerTrainConfig,
    seed: u64,
    mut on_log: impl FnMut(&TokenizerLogRow),
) -> Result<TokenizerTrainReport> {
    if dataset.is_empty() {
        return Err(TokenizerError::EmptyDataset);
    }
    for seq in dataset {
        if seq.len() <= tok.cfg.t0 {
            return Err(TokenizerError::SequenceTooShort { t: seq.len(), t0: tok.cfg.t0 });
        }
    }
    let mut report = TokenizerTrainReport::default();
    let revival_stop = (cfg.steps as f32 * cfg.revival_stop_frac) as usize;
    for step in cfg.start_step..cfg.steps {
        if cfg.revival_every > 0 && step > 0 && step % cfg.revival_every == 0 && step < revival_stop
        {
            revive_dead_codes(tok, dataset, cfg, seed, step)?;
        }
        let row = tokenizer_train_step(tok, opt, dataset, cfg, seed, step)?;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            on_log(&row);
            report.rows.push(row);
        }
        report.steps_run += 1;
    }
    Ok(report)
}

/// Tokenizes one frame with three single-modality tokenizers (the
/// triple-token baseline).  Each tokenizer must have exactly one active
/// modality; order is (rgb, depth, mask).
pub fn tokenize_per_modality(
    tokenizers: &[&Tokenizer; 3],
    obs: &NormalizedObs,
) -> Result<[TokenGrid; 3]> {
    let expect = [Modality::Rgb, Modality::Depth, Modality::Mask];
    let mut out = Vec::with_capacity(3);
    for (tok, want) in tokenizers.iter().zip(expect) {
        let active = tok.cfg.active_modalities();
        if active != [want] {
            return Err(TokenizerError::Config(format!(
                "per-modality tokenizer must be {want:?}-only, has {active:?}"
            )));
        }
        let (grid, _) = tok.encode_context(obs)?;
        out.push(grid);
    }
    Ok([out[0].clone(), out[1].clone(), out[2].clone()])
}

pub fn single_modality_config(base: &TokenizerConfig, m: Modality) -> TokenizerConfig {
    TokenizerConfig {
        rgb: m == Modality::Rgb,
        depth: m == Modality::Depth,
        mask: m == Modality::Mask,
        ..base.clone()
    }
}
