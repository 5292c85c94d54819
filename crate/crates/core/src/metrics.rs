//! Image/depth quality metrics: PSNR, SSIM (11×11 Gaussian window), mean
//! absolute relative depth error, binary mask IoU, and token-count
//! accounting between unified and per-modality sequence layouts.

use crate::env::Observation;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("image {h}x{w} smaller than {window}x{window} window")]
    ImageTooSmall { h: usize, w: usize, window: usize },
    #[error("{count} nonpositive target depth pixels")]
    NonPositiveTarget { count: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

const PSNR_CAP_DB: f32 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f32 = 1.5;
const SSIM_C1: f32 = 0.01 * 0.01;
const SSIM_C2: f32 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for values in [0,1]; identical inputs
/// are capped at 99 dB.
pub fn psnr(pred: &[f32], target: &[f32]) -> Result<f32> {
    if pred.len() != target.len() {
        return Err(MetricError::ShapeMismatch { expected: target.len(), got: pred.len() });
    }
    let mut se = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        let d = (*p - *t) as f64;
        se += d * d;
    }
    let mse = se / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(((10.0 * (1.0 / mse).log10()) as f32).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f32> {
    let half = (SSIM_WINDOW / 2) as f32;
    let mut g: Vec<f32> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f32 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f32 = g.iter().sum();
    for v in &mut g {
        *v /= s;
    }
    let mut w = vec![0.0f32; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g[i] * g[j];
        }
    }
    w
}

fn ssim_plane(pred: &[f32], target: &[f32], h: usize, w: usize, win: &[f32]) -> f32 {
    let k = SSIM_WINDOW;
    let mut total = 0.0f64;
    let mut n = 0usize;
    for i in 0..=(h - k) {
        for j in 0..=(w - k) {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0f32, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let g = win[a * k + b];
                    let x = pred[(i + a) * w + j + b];
                    let y = target[(i + a) * w + j + b];
                    mx += g * x;
                    my += g * y;
                    mxx += g * x * x;
                    myy += g * y * y;
                    mxy += g * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
            total += (num / den) as f64;
            n += 1;
        }
    }
    (total / n as f64) as f32
}

/// Mean local SSIM over valid (unpadded) 11×11 Gaussian windows, averaged
/// over `channels` equal-size planes.
pub fn ssim(pred: &[f32], target: &[f32], h: usize, w: usize, channels: usize) -> Result<f32> {
    let expected = h * w * channels;
    if pred.len() != expected || target.len() != expected {
        return Err(MetricError::ShapeMismatch { expected, got: pred.len().max(target.len()) });
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall { h, w, window: SSIM_WINDOW });
    }
    let win = gaussian_window();
    let mut acc = 0.0f32;
    for c in 0..channels {
        let s = c * h * w;
        acc += ssim_plane(&pred[s..s + h * w], &target[s..s + h * w], h, w, &win);
    }
    Ok(acc / channels as f32)
}

/// Mean absolute relative depth error |d̂−d|/d over pixels, in metric units.
pub fn absrel(pred: &[f32], target: &[f32]) -> Result<f32> {
    if pred.len() != target.len() {
        return Err(MetricError::ShapeMismatch { expected: target.len(), got: pred.len() });
    }
    let bad = target.iter().filter(|&&d| d <= 0.0).count();
    if bad > 0 {
        return Err(MetricError::NonPositiveTarget { count: bad });
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        acc += ((p - t).abs() / t) as f64;
    }
    Ok((acc / pred.len() as f64) as f32)
}

/// Pixel IoU of binarized (≥0.5) masks; two empty masks count as 1.0.
pub fn mask_iou(pred: &[f32], target: &[f32]) -> Result<f32> {
    if pred.len() != target.len() {
        return Err(MetricError::ShapeMismatch { expected: target.len(), got: pred.len() });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.iter().zip(target) {
        let a = *p >= 0.5;
        let b = *t >= 0.5;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f32 / union as f32)
}

/// Frame-token accounting for one tokenization scheme over a frame set.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTally {
    pub n_frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Frame tokens only — slot/padding tokens excluded.
    pub frame_tokens: usize,
}

/// (Σ per-modality frame tokens) / (unified frame tokens); all tallies must
/// describe the same frame set at the same grid resolution.
pub fn token_count_ratio(unified: &TokenTally, per_modality: &[TokenTally]) -> Result<f32> {
    if per_modality.is_empty() {
        return Err(MetricError::LayoutMismatch("no per-modality layouts".into()));
    }
    for t in per_modality {
        if t.n_frames != unified.n_frames {
            return Err(MetricError::LayoutMismatch(format!(
                "frame count {} vs unified {}",
                t.n_frames, unified.n_frames
            )));
        }
        if t.grid_h != unified.grid_h || t.grid_w != unified.grid_w {
            return Err(MetricError::LayoutMismatch(format!(
                "grid {}x{} vs unified {}x{}",
                t.grid_h, t.grid_w, unified.grid_h, unified.grid_w
            )));
        }
    }
    let total: usize = per_modality.iter().map(|t| t.frame_tokens).sum();
    Ok(total as f32 / unified.frame_tokens as f32)
}

/// Per-frame metric table with arithmetic means.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub psnr: Vec<f32>,
    pub ssim: Vec<f32>,
    pub absrel: Vec<f32>,
    pub mask_iou: Vec<f32>,
}

fn mean(v: &[f32]) -> f32 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64) as f32
}

impl MetricReport {
    /// Scores `pred` against `target` and appends one row.
    pub fn push_frame(&mut self, pred: &Observation, target: &Observation) -> Result<()> {
        let (h, w) = (target.h, target.w);
        self.psnr.push(psnr(&pred.rgb, &target.rgb)?);
        self.ssim.push(ssim(&pred.rgb, &target.rgb, h, w, 3)?);
        self.absrel.push(absrel(&pred.depth, &target.depth)?);
        self.mask_iou.push(mask_iou(&pred.mask, &target.mask)?);
        Ok(())
    }

    pub fn psnr_mean(&self) -> f32 {
        mean(&self.psnr)
    }

    pub fn ssim_mean(&self) -> f32 {
        mean(&self.ssim)
    }

    pub fn absrel_mean(&self) -> f32 {
        mean(&self.absrel)
    }

    pub fn mask_iou_mean(&self) -> f32 {
        mean(&self.mask_iou)
    }

    /// Machine-readable key-value summary followed by a per-frame table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("psnr_mean={:.6}\n", self.psnr_mean()));
        s.push_str(&format!("ssim_mean={:.6}\n", self.ssim_mean()));
        s.push_str(&format!("absrel_mean={:.6}\n", self.absrel_mean()));
        s.push_str(&format!("mask_iou_mean={:.6}\n", self.mask_iou_mean()));
        s.push_str("frame\tpsnr\tssim\tabsrel\tmask_iou\n");
        let at = |v: &Vec<f32>, i: usize| v.get(i).copied().unwrap_or(f32::NAN);
        for i in 0..self.psnr.len() {
            s.push_str(&format!(
                "{i}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                self.psnr[i],
                at(&self.ssim, i),
                at(&self.absrel, i),
                at(&self.mask_iou, i)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mowm_autograd::Rng;

    #[test]
    fn psnr_identity_hits_cap() {
        let img = vec![0.3f32; 48];
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
    }

    #[test]
    fn psnr_uniform_error_is_twenty_db() {
        let target = vec![0.2f32; 100];
        let pred = vec![0.3f32; 100];
        let v = psnr(&pred, &target).unwrap();
        assert!((v - 20.0).abs() < 1e-4, "got {v}");
    }

    #[test]
    fn psnr_is_symmetric() {
        let mut rng = Rng::seed_from_u64(1);
        let a: Vec<f32> = (0..64).map(|_| rng.uniform()).collect();
        let b: Vec<f32> = (0..64).map(|_| rng.uniform()).collect();
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = Rng::seed_from_u64(2);
        let base: Vec<f32> = (0..256).map(|_| rng.uniform()).collect();
        let noise: Vec<f32> = (0..256).map(|_| rng.uniform() - 0.5).collect();
        let mut prev = f32::INFINITY;
        for amp in [0.01f32, 0.05, 0.2] {
            let noisy: Vec<f32> = base.iter().zip(&noise).map(|(b, n)| b + amp * n).collect();
            let v = psnr(&noisy, &base).unwrap();
            assert!(v < prev, "psnr must strictly fall as noise grows");
            prev = v;
        }
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert_eq!(
            psnr(&[0.0; 3], &[0.0; 4]).unwrap_err(),
            MetricError::ShapeMismatch { expected: 4, got: 3 }
        );
    }

    #[test]
    fn ssim_identity_is_one() {
        let mut rng = Rng::seed_from_u64(3);
        let img: Vec<f32> = (0..32 * 32).map(|_| rng.uniform()).collect();
        let v = ssim(&img, &img, 32, 32, 1).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn ssim_constant_vs_same_constant_is_one() {
        let img = vec![0.4f32; 32 * 32];
        let v = ssim(&img, &img.clone(), 32, 32, 1).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn ssim_negative_for_inverted_high_variance_pattern() {
        // Checkerboard: variance 0.25 per window, far above the stabilizers.
        let mut img = vec![0.0f32; 32 * 32];
        for i in 0..32 {
            for j in 0..32 {
                img[i * 32 + j] = ((i + j) % 2) as f32;
            }
        }
        let neg: Vec<f32> = img.iter().map(|&x| 1.0 - x).collect();
        let v = ssim(&neg, &img, 32, 32, 1).unwrap();
        assert!(v < 0.0, "got {v}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let img = vec![0.0f32; 10 * 10];
        assert_eq!(
            ssim(&img, &img, 10, 10, 1).unwrap_err(),
            MetricError::ImageTooSmall { h: 10, w: 10, window: 11 }
        );
    }

    #[test]
    fn absrel_identity_and_closed_form() {
        let t = vec![1.0f32; 50];
        assert_eq!(absrel(&t, &t).unwrap(), 0.0);
        let p = vec![1.1f32; 50];
        let v = absrel(&p, &t).unwrap();
        assert!((v - 0.1).abs() < 1e-6, "got {v}");
    }

    #[test]
    fn absrel_scale_covariant() {
        let mut rng = Rng::seed_from_u64(4);
        let t: Vec<f32> = (0..64).map(|_| 0.4 + rng.uniform() * 0.1).collect();
        let p: Vec<f32> = t.iter().map(|&d| d + (rng.uniform() - 0.5) * 0.05).collect();
        let base = absrel(&p, &t).unwrap();
        for alpha in [2.5f32, 0.3] {
            let pa: Vec<f32> = p.iter().map(|&x| alpha * x).collect();
            let ta: Vec<f32> = t.iter().map(|&x| alpha * x).collect();
            let v = absrel(&pa, &ta).unwrap();
            assert!((v - base).abs() / base.max(1e-9) < 1e-5, "{v} vs {base}");
        }
    }

    #[test]
    fn absrel_normalize_roundtrip_matches_raw() {
        let mut rng = Rng::seed_from_u64(5);
        let scale = 0.5f32;
        let t: Vec<f32> = (0..64).map(|_| 0.4 + rng.uniform() * 0.1).collect();
        let p: Vec<f32> = t.iter().map(|&d| d + (rng.uniform() - 0.5) * 0.03).collect();
        let raw = absrel(&p, &t).unwrap();
        // Normalize to [0,1] by the camera height, then denormalize.
        let pd: Vec<f32> = p.iter().map(|&x| (x / scale) * scale).collect();
        let td: Vec<f32> = t.iter().map(|&x| (x / scale) * scale).collect();
        let rt = absrel(&pd, &td).unwrap();
        assert!((rt - raw).abs() / raw.max(1e-9) < 1e-6);
    }

    #[test]
    fn absrel_rejects_nonpositive_targets_with_count() {
        let t = vec![1.0, 0.0, -0.5, 2.0];
        let p = vec![1.0; 4];
        assert_eq!(absrel(&p, &t).unwrap_err(), MetricError::NonPositiveTarget { count: 2 });
    }

    #[test]
    fn mask_iou_cases() {
        let a = vec![1.0, 1.0, 0.0, 0.0];
        let b = vec![1.0, 0.0, 1.0, 0.0];
        assert_eq!(mask_iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let empty = vec![0.0; 4];
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn token_ratio_defaults_exactly_three() {
        let unified = TokenTally { n_frames: 8, grid_h: 4, grid_w: 4, frame_tokens: 8 * 16 };
        let per: Vec<TokenTally> = (0..3).map(|_| unified.clone()).collect();
        assert_eq!(token_count_ratio(&unified, &per).unwrap(), 3.0);
        assert_eq!(token_count_ratio(&unified, &per[..1]).unwrap(), 1.0);
        assert_eq!(token_count_ratio(&unified, &per[..2]).unwrap(), 2.0);
    }

    #[test]
    fn token_ratio_rejects_resolution_mismatch() {
        let unified = TokenTally { n_frames: 8, grid_h: 4, grid_w: 4, frame_tokens: 128 };
        let other = TokenTally { n_frames: 8, grid_h: 8, grid_w: 8, frame_tokens: 512 };
        assert!(matches!(
            token_count_ratio(&unified, &[other]),
            Err(MetricError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn report_means_are_arithmetic_means() {
        let mut r = MetricReport::default();
        r.psnr = vec![10.0, 20.0, 30.0];
        r.ssim = vec![0.5, 1.0];
        r.absrel = vec![0.1];
        assert!((r.psnr_mean() - 20.0).abs() < 1e-6);
        assert!((r.ssim_mean() - 0.75).abs() < 1e-6);
        assert!((r.absrel_mean() - 0.1).abs() < 1e-6);
        assert_eq!(r.mask_iou_mean(), 0.0);
        let text = r.to_text();
        assert!(text.contains("psnr_mean=20.000000"));
        assert!(text.lines().count() >= 5);
    }

    #[test]
    fn metrics_are_bitwise_repeatable() {
        let mut rng = Rng::seed_from_u64(6);
        let a: Vec<f32> = (0..32 * 32).map(|_| rng.uniform()).collect();
        let b: Vec<f32> = (0..32 * 32).map(|_| rng.uniform()).collect();
        assert_eq!(psnr(&a, &b).unwrap().to_bits(), psnr(&a, &b).unwrap().to_bits());
        assert_eq!(
            ssim(&a, &b, 32, 32, 1).unwrap().to_bits(),
            ssim(&a, &b, 32, 32, 1).unwrap().to_bits()
        );
        let d: Vec<f32> = a.iter().map(|x| 0.4 + 0.1 * x).collect();
        let e: Vec<f32> = b.iter().map(|x| 0.4 + 0.1 * x).collect();
        assert_eq!(absrel(&d, &e).unwrap().to_bits(), absrel(&d, &e).unwrap().to_bits());
    }
}
