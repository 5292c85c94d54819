//! Bit-exact trajectory shard files and directory datasets.
//!
//! One trajectory per shard.  Little-endian layout, fixed field order:
//! magic "MOWM", format version u32, H u32, W u32, T u32, A u32,
//! depth_scale f32, imagined u8, seed u64, then per frame rgb u8 H·W·3
//! (row-major, interleaved), depth f32 H·W, mask u8 H·W, then actions
//! f32 (T−1)·A, rewards f32 (T−1), done u8 (T−1).  RGB is quantized to
//! u8 on write (the one documented lossy step); depth, mask, actions,
//! rewards round-trip exactly.

use crate::env::{Observation, Trajectory, TrajectoryMeta};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SHARD_MAGIC: [u8; 4] = *b"MOWM";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 4 + 1 + 8;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated shard: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, ShardError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub version: u32,
    pub h: u32,
    pub w: u32,
    pub t: u32,
    pub a: u32,
    pub depth_scale: f32,
    pub imagined: bool,
    pub seed: u64,
}

impl ShardHeader {
    /// Total file size implied by the header alone.
    pub fn expected_file_len(&self) -> usize {
        let (h, w, t, a) = (
            self.h as usize,
            self.w as usize,
            self.t as usize,
            self.a as usize,
        );
        let frame = 3 * h * w + 4 * h * w + h * w;
        HEADER_LEN + t * frame + (t - 1) * (4 * a + 4 + 1)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ShardError::Truncated { needed: self.pos + n, have: self.buf.len() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn quantize_rgb(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Parses just the header, enough to size-validate a file.
pub fn read_header(bytes: &[u8]) -> Result<ShardHeader> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if magic != SHARD_MAGIC {
        return Err(ShardError::BadMagic { found: magic, expected: SHARD_MAGIC });
    }
    let version = c.u32()?;
    if version != SHARD_VERSION {
        return Err(ShardError::VersionMismatch { found: version, expected: SHARD_VERSION });
    }
    let h = c.u32()?;
    let w = c.u32()?;
    let t = c.u32()?;
    let a = c.u32()?;
    let depth_scale = c.f32()?;
    let imagined = c.u8()? != 0;
    let seed = c.u64()?;
    if h == 0 || w == 0 || t == 0 || a == 0 {
        return Err(ShardError::InvalidHeader(format!("zero dimension in h={h} w={w} t={t} a={a}")));
    }
    if h > 4096 || w > 4096 || t > 1_000_000 || a > 1024 {
        return Err(ShardError::InvalidHeader(format!("implausible h={h} w={w} t={t} a={a}")));
    }
    Ok(ShardHeader { version, h, w, t, a, depth_scale, imagined, seed })
}

pub fn write_shard(path: &Path, traj: &Trajectory) -> Result<()> {
    traj.validate().map_err(ShardError::InvalidTrajectory)?;
    let (h, w) = (traj.meta.h, traj.meta.w);
    let t = traj.observations.len();
    let a = traj.meta.action_dim;
    for act in &traj.actions {
        if act.len() != a {
            return Err(ShardError::InvalidTrajectory(format!(
                "action dim {} differs from meta {a}",
                act.len()
            )));
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + t * 8 * h * w);
    buf.extend_from_slice(&SHARD_MAGIC);
    buf.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    for v in [h as u32, w as u32, t as u32, a as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&traj.meta.depth_scale.to_le_bytes());
    buf.push(traj.meta.imagined as u8);
    buf.extend_from_slice(&traj.meta.seed.to_le_bytes());
    for obs in &traj.observations {
        for p in 0..h * w {
            for ch in 0..3 {
                buf.push(quantize_rgb(obs.rgb[ch * h * w + p]));
            }
        }
        for &d in &obs.depth {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &m in &obs.mask {
            buf.push((m >= 0.5) as u8);
        }
    }
    for act in &traj.actions {
        for &v in act {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &r in &traj.rewards {
        buf.extend_from_slice(&r.to_le_bytes());
    }
    for &d in &traj.done {
        buf.push(d as u8);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<Trajectory> {
    let bytes = std::fs::read(path)?;
    let header = read_header(&bytes)?;
    let expected = header.expected_file_len();
    if bytes.len() < expected {
        return Err(ShardError::Truncated { needed: expected, have: bytes.len() });
    }
    let (h, w, t, a) = (
        header.h as usize,
        header.w as usize,
        header.t as usize,
        header.a as usize,
    );
    let mut c = Cursor { buf: &bytes, pos: HEADER_LEN };
    let mut observations = Vec::with_capacity(t);
    for _ in 0..t {
        let raw_rgb = c.take(3 * h * w)?;
        let mut rgb = vec![0.0f32; 3 * h * w];
        for p in 0..h * w {
            for ch in 0..3 {
                rgb[ch * h * w + p] = raw_rgb[p * 3 + ch] as f32 / 255.0;
            }
        }
        let depth = c.f32_vec(h * w)?;
        let raw_mask = c.take(h * w)?;
        let mask = raw_mask.iter().map(|&m| m as f32).collect();
        observations.push(Observation { h, w, rgb, depth, mask });
    }
    let mut actions = Vec::with_capacity(t - 1);
    for _ in 0..t - 1 {
        actions.push(c.f32_vec(a)?);
    }
    let rewards = c.f32_vec(t - 1)?;
    let mut done = Vec::with_capacity(t - 1);
    for _ in 0..t - 1 {
        done.push(c.u8()? != 0);
    }
    Ok(Trajectory {
        observations,
        actions,
        rewards,
        done,
        meta: TrajectoryMeta {
            h,
            w,
            action_dim: a,
            depth_scale: header.depth_scale,
            imagined: header.imagined,
            seed: header.seed,
        },
    })
}

/// Directory-level dataset index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub h: usize,
    pub w: usize,
    pub action_dim: usize,
    pub depth_scale: f32,
    pub n_trajectories: usize,
    pub total_frames: usize,
    pub n_imagined: usize,
    pub shards: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.toml";

/// Writes one shard per trajectory plus a manifest into `dir`.
pub fn write_dataset(dir: &Path, trajectories: &[Trajectory]) -> Result<Manifest> {
    if trajectories.is_empty() {
        return Err(ShardError::Manifest("dataset has no trajectories".into()));
    }
    std::fs::create_dir_all(dir)?;
    let meta = &trajectories[0].meta;
    let mut shards = Vec::new();
    let mut total_frames = 0;
    let mut n_imagined = 0;
    for (i, traj) in trajectories.iter().enumerate() {
        if traj.meta.h != meta.h || traj.meta.w != meta.w || traj.meta.action_dim != meta.action_dim
        {
            return Err(ShardError::Manifest(format!("trajectory {i} has inconsistent shape")));
        }
        let name = format!("traj_{i:05}.mowm");
        write_shard(&dir.join(&name), traj)?;
        total_frames += traj.observations.len();
        n_imagined += traj.meta.imagined as usize;
        shards.push(name);
    }
    let manifest = Manifest {
        version: SHARD_VERSION,
        h: meta.h,
        w: meta.w,
        action_dim: meta.action_dim,
        depth_scale: meta.depth_scale,
        n_trajectories: trajectories.len(),
        total_frames,
        n_imagined,
        shards,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| ShardError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    toml::from_str(&text).map_err(|e| ShardError::Manifest(e.to_string()))
}

/// Reads every shard listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Trajectory>> {
    let manifest = read_manifest(dir)?;
    let mut out = Vec::with_capacity(manifest.shards.len());
    for name in &manifest.shards {
        let traj = read_shard(&dir.join(name))?;
        if traj.meta.h != manifest.h || traj.meta.w != manifest.w {
            return Err(ShardError::Manifest(format!("shard {name} disagrees with manifest")));
        }
        out.push(traj);
    }
    Ok(out)
}

pub fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = read_manifest(dir)?;
    Ok(manifest.shards.iter().map(|n| dir.join(n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_dataset, EnvConfig, PushWorld, ScriptedExpert};

    fn sample_traj(seed: u64) -> Trajectory {
        let env = PushWorld::new(EnvConfig::default());
        collect_dataset(&env, &mut ScriptedExpert(&env), 1, 7, seed).pop().unwrap()
    }

    #[test]
    fn roundtrip_exact_except_rgb_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        let traj = sample_traj(1);
        write_shard(&path, &traj).unwrap();
        let back = read_shard(&path).unwrap();
        assert_eq!(back.meta, traj.meta);
        assert_eq!(back.actions, traj.actions);
        assert_eq!(back.rewards, traj.rewards);
        assert_eq!(back.done, traj.done);
        for (a, b) in back.observations.iter().zip(&traj.observations) {
            assert_eq!(a.depth, b.depth, "depth must be exact");
            assert_eq!(a.mask, b.mask, "mask must be exact");
            for (x, y) in a.rgb.iter().zip(&b.rgb) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6, "rgb beyond u8 quantization");
            }
        }
    }

    #[test]
    fn double_roundtrip_is_bitwise_stable() {
        // After one quantization pass the file becomes a fixed point.
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mowm");
        let p2 = dir.path().join("b.mowm");
        write_shard(&p1, &sample_traj(2)).unwrap();
        let once = read_shard(&p1).unwrap();
        write_shard(&p2, &once).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn imagined_flag_survives() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        let mut traj = sample_traj(3);
        traj.meta.imagined = true;
        write_shard(&path, &traj).unwrap();
        assert!(read_shard(&path).unwrap().meta.imagined);
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        write_shard(&path, &sample_traj(4)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(ShardError::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_is_distinct_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        write_shard(&path, &sample_traj(5)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_shard(&path), Err(ShardError::VersionMismatch { found: 7, .. })));
    }

    #[test]
    fn truncation_is_distinct_error_at_any_cut() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        write_shard(&path, &sample_traj(6)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [10usize, HEADER_LEN, HEADER_LEN + 100, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..cut]).unwrap();
            let err = read_shard(&path).unwrap_err();
            assert!(matches!(err, ShardError::Truncated { .. }), "cut {cut}: got {err:?}");
        }
    }

    #[test]
    fn header_alone_sizes_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mowm");
        write_shard(&path, &sample_traj(7)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = read_header(&bytes[..HEADER_LEN]).unwrap();
        assert_eq!(header.expected_file_len(), bytes.len());
    }

    #[test]
    fn dataset_roundtrip_with_manifest() {
        let env = PushWorld::new(EnvConfig::default());
        let trajs = collect_dataset(&env, &mut ScriptedExpert(&env), 3, 7, 9);
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &trajs).unwrap();
        assert_eq!(manifest.n_trajectories, 3);
        assert_eq!(manifest.shards.len(), 3);
        assert_eq!(manifest.total_frames, trajs.iter().map(|t| t.observations.len()).sum::<usize>());
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in back.iter().zip(&trajs) {
            assert_eq!(a.meta.seed, b.meta.seed);
            assert_eq!(a.actions, b.actions);
        }
        assert_eq!(read_manifest(dir.path()).unwrap(), manifest);
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_dataset(dir.path(), &[]), Err(ShardError::Manifest(_))));
    }
}
