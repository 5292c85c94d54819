//! Single-threaded numeric kernels.
//!
//! Every kernel here is deterministic (fixed accumulation order) and
//! row-independent: the result for one output row never depends on how many
//! other rows are processed in the same call.  The autodiff ops and the
//! incremental decoder both call these functions, so a full-sequence forward
//! pass and a token-by-token replay of the same sequence produce identical
//! activations.

/// Dot product with eight independent accumulator lanes (fixed combine order).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l] * bc[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for i in chunks * 8..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// C[m,n] += A[m,k] * B[k,n].  `c` must be zero-initialized by the caller if
/// plain assignment is wanted.
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// C[m,n] += A[m,k] * B^T where B is stored [n,k].
pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C[m,n] += A^T * B where A is stored [k,m].
pub fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aki * brow[j];
            }
        }
    }
}

/// Lowers conv patches of `x` [c, h, w] into columns [c*kh*kw, oh*ow].
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    cols: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let span = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &mut cols[((ci * kh + dy) * kw + dx) * span..][..span];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let orow = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        orow.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        orow[ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f32],
    x: &mut [f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let span = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for dy in 0..kh {
            for dx in 0..kw {
                let row = &cols[((ci * kh + dy) * kw + dx) * span..][..span];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over one row, in place.
pub fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// RMS normalization of one row: out[i] = x[i] / rms(x) * gamma[i].
pub fn rmsnorm_row(x: &[f32], gamma: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for i in 0..x.len() {
        out[i] = x[i] * inv * gamma[i];
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Rotary position encoding applied in place to one head slice of length
/// `head_dim` (adjacent even/odd pairs).  `dir` is +1.0 to rotate, -1.0 to
/// apply the inverse rotation.
pub fn rope_rotate(head: &mut [f32], pos: usize, theta: f32, dir: f32) {
    let d = head.len();
    for p in 0..d / 2 {
        let freq = 1.0 / theta.powf(2.0 * p as f32 / d as f32);
        let angle = pos as f32 * freq;
        let (sin, cos) = (dir * angle.sin(), angle.cos());
        let (a, b) = (head[2 * p], head[2 * p + 1]);
        head[2 * p] = a * cos - b * sin;
        head[2 * p + 1] = a * sin + b * cos;
    }
}

/// Attention scores for one query head against `count` cached keys stored at
/// `stride` floats apart: out[j] = scale * <q, k_j>.
pub fn attn_score_row(
    q: &[f32],
    keys: &[f32],
    stride: usize,
    count: usize,
    scale: f32,
    out: &mut [f32],
) {
    let d = q.len();
    for j in 0..count {
        out[j] = scale * dot(q, &keys[j * stride..j * stride + d]);
    }
}

/// Probability-weighted sum of cached values: out[d] = sum_j p[j] * v_j[d].
pub fn attn_weighted_sum(p: &[f32], values: &[f32], stride: usize, d: usize, out: &mut [f32]) {
    out[..d].fill(0.0);
    for (j, &pj) in p.iter().enumerate() {
        let vrow = &values[j * stride..j * stride + d];
        for i in 0..d {
            out[i] += pj * vrow[i];
        }
    }
}

/// Nearest-neighbour 2x upsample of an [c, h, w] image into [c, 2h, 2w].
pub fn upsample2x(x: &[f32], out: &mut [f32], c: usize, h: usize, w: usize) {
    debug_assert_eq!(out.len(), c * 4 * h * w);
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
            for sy in 0..2 {
                let drow = &mut out[((ci * 2 * h) + 2 * y + sy) * 2 * w..][..2 * w];
                for xx in 0..w {
                    drow[2 * xx] = src[xx];
                    drow[2 * xx + 1] = src[xx];
                }
            }
        }
    }
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block of `grad` into `out`.
pub fn upsample2x_backward(grad: &[f32], out: &mut [f32], c: usize, h: usize, w: usize) {
    for ci in 0..c {
        for y in 0..h {
            let drow = &mut out[(ci * h + y) * w..(ci * h + y + 1) * w];
            let g0 = &grad[((ci * 2 * h) + 2 * y) * 2 * w..][..2 * w];
            let g1 = &grad[((ci * 2 * h) + 2 * y + 1) * 2 * w..][..2 * w];
            for xx in 0..w {
                drow[xx] += (g0[2 * xx] + g0[2 * xx + 1]) + (g1[2 * xx] + g1[2 * xx + 1]);
            }
        }
    }
}

/// Index of the entry with minimal squared distance to `z` among `rows`
/// codebook rows of width `d`; ties resolve to the lowest index.
pub fn nearest_code(z: &[f32], codebook: &[f32], rows: usize, d: usize) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for r in 0..rows {
        let e = &codebook[r * d..(r + 1) * d];
        let mut acc = 0.0f32;
        for i in 0..d {
            let diff = z[i] - e[i];
            acc += diff * diff;
        }
        if acc < best_d {
            best_d = acc;
            best = r;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc += a[i * k + kk] as f64 * b[kk * n + j] as f64;
                }
                c[i * n + j] = acc as f32;
            }
        }
        c
    }

    fn seq(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 19) as f32 - 9.0) * scale).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 6);
        let a = seq(m * k, 0.1);
        let b = seq(k * n, 0.05);
        let reference = naive_matmul(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-5);
        }

        // B^T stored [n,k].
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-5);
        }

        // A^T stored [k,m].
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for kk in 0..k {
                at[kk * m + i] = a[i * k + kk];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_rows_are_independent() {
        let (m, k, n) = (4, 9, 5);
        let a = seq(m * k, 0.2);
        let b = seq(k * n, 0.3);
        let mut full = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut full, m, k, n);
        for i in 0..m {
            let mut row = vec![0.0; n];
            matmul_nn(&a[i * k..(i + 1) * k], &b, &mut row, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &row[..], "row {i}");
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> must equal <x, col2im(y)> for the pair to be a
        // valid linear map and its transpose.
        let (c, h, w, kh, kw) = (2, 5, 4, 3, 3);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            let x = seq(c * h * w, 0.13);
            let y = seq(c * kh * kw * oh * ow, 0.07);
            let mut cols = vec![0.0; y.len()];
            im2col(&x, &mut cols, c, h, w, kh, kw, stride, pad);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (a * b) as f64).sum();
            let mut back = vec![0.0; x.len()];
            col2im(&y, &mut back, c, h, w, kh, kw, stride, pad);
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-4, "stride {stride}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn softmax_row_basics() {
        let mut row = vec![1.0, 2.0, 3.0];
        softmax_row(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row[2] > row[1] && row[1] > row[0]);

        // A heavily masked entry underflows to exactly zero and the rest of
        // the row matches the unmasked computation bit for bit.
        let mut short = vec![0.3, -0.7];
        let mut long = vec![0.3, -0.7, -1e9, -1e9];
        softmax_row(&mut short);
        softmax_row(&mut long);
        assert_eq!(long[2], 0.0);
        assert_eq!(long[3], 0.0);
        assert_eq!(short[0].to_bits(), long[0].to_bits());
        assert_eq!(short[1].to_bits(), long[1].to_bits());
    }

    #[test]
    fn rope_round_trip() {
        let orig: Vec<f32> = seq(8, 0.4);
        let mut head = orig.clone();
        rope_rotate(&mut head, 11, 10_000.0, 1.0);
        assert!(head.iter().zip(&orig).any(|(a, b)| (a - b).abs() > 1e-4));
        rope_rotate(&mut head, 11, 10_000.0, -1.0);
        for (a, b) in head.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rope_preserves_norm() {
        let mut head = seq(16, 0.3);
        let before: f32 = head.iter().map(|v| v * v).sum();
        rope_rotate(&mut head, 5, 10_000.0, 1.0);
        let after: f32 = head.iter().map(|v| v * v).sum();
        assert!((before - after).abs() < 1e-4);
    }

    #[test]
    fn upsample_and_adjoint() {
        let x = seq(1 * 2 * 2, 1.0);
        let mut up = vec![0.0; 16];
        upsample2x(&x, &mut up, 1, 2, 2);
        assert_eq!(up[0], x[0]);
        assert_eq!(up[1], x[0]);
        assert_eq!(up[4], x[0]);
        assert_eq!(up[5], x[0]);
        assert_eq!(up[2], x[1]);

        let g = seq(16, 0.5);
        let mut back = vec![0.0; 4];
        upsample2x_backward(&g, &mut back, 1, 2, 2);
        let lhs: f32 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn nearest_code_picks_minimum_and_breaks_ties_low() {
        let codebook = vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(nearest_code(&[0.9, 0.9], &codebook, 3, 2), 1);
        // Entries 0 and 2 are identical: tie goes to index 0.
        assert_eq!(nearest_code(&[0.1, -0.1], &codebook, 3, 2), 0);
    }

    #[test]
    fn attn_rows_match_streamed_evaluation() {
        let d = 8;
        let stride = 16;
        let keys = seq(4 * stride, 0.2);
        let q = seq(d, 0.3);
        let mut full = vec![0.0; 4];
        attn_score_row(&q, &keys, stride, 4, 0.5, &mut full);
        let mut prefix = vec![0.0; 2];
        attn_score_row(&q, &keys, stride, 2, 0.5, &mut prefix);
        assert_eq!(full[0].to_bits(), prefix[0].to_bits());
        assert_eq!(full[1].to_bits(), prefix[1].to_bits());
    }
}
