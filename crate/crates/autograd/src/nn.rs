//! Neural-network ops: convolution, upsampling, normalization, rotary
//! position encoding and attention primitives.
//!
//! Attention forwards are computed one (head, query-row) at a time through
//! the shared row kernels, which keeps full-sequence evaluation bitwise
//! identical to incremental cached decoding of the same tokens.

use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{Result, Tensor, TensorError};

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        }),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        }),
    }
}

impl Graph {
    /// 2-D convolution over NCHW input with zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, ci, h, w) = dims4("conv2d", self.val(x))?;
        let (co, wci, kh, kw) = dims4("conv2d", self.val(weight))?;
        if wci != ci {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(weight).shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            if self.val(b).shape() != [co] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![co],
                    rhs: self.val(b).shape().to_vec(),
                });
            }
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w} input"),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let ck = ci * kh * kw;
        let span = oh * ow;

        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        {
            let xv = self.val(x).data();
            let wv = self.val(weight).data();
            let bv = bias.map(|b| self.val(b).data().to_vec());
            let mut cols = vec![0.0f32; ck * span];
            for bi in 0..n {
                kernels::im2col(
                    &xv[bi * ci * h * w..(bi + 1) * ci * h * w],
                    &mut cols,
                    ci,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                );
                let yb = &mut out.data_mut()[bi * co * span..(bi + 1) * co * span];
                kernels::matmul_nn(wv, &cols, yb, co, ck, span);
                if let Some(bv) = &bv {
                    for c in 0..co {
                        let row = &mut yb[c * span..(c + 1) * span];
                        for v in row {
                            *v += bv[c];
                        }
                    }
                }
            }
        }

        let mut parents = vec![x, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.op(
            out,
            parents,
            Box::new(move |go, parents, _, needs| {
                let xv = parents[0].data();
                let wv = parents[1].data();
                let mut dx = needs[0].then(|| Tensor::zeros(&[n, ci, h, w]));
                let mut dw = needs[1].then(|| Tensor::zeros(&[co, ci, kh, kw]));
                let mut db = (has_bias && needs[2]).then(|| Tensor::zeros(&[co]));
                let mut cols = vec![0.0f32; ck * span];
                let mut dcols = vec![0.0f32; ck * span];
                for bi in 0..n {
                    let dy = &go.data()[bi * co * span..(bi + 1) * co * span];
                    if dw.is_some() {
                        kernels::im2col(
                            &xv[bi * ci * h * w..(bi + 1) * ci * h * w],
                            &mut cols,
                            ci,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                        kernels::matmul_nt(
                            dy,
                            &cols,
                            dw.as_mut().unwrap().data_mut(),
                            co,
                            span,
                            ck,
                        );
                    }
                    if let Some(db) = db.as_mut() {
                        for c in 0..co {
                            let mut acc = 0.0;
                            for v in &dy[c * span..(c + 1) * span] {
                                acc += v;
                            }
                            db.data_mut()[c] += acc;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.fill(0.0);
                        kernels::matmul_tn(wv, dy, &mut dcols, ck, co, span);
                        kernels::col2im(
                            &dcols,
                            &mut dx.data_mut()[bi * ci * h * w..(bi + 1) * ci * h * w],
                            ci,
                            h,
                            w,
                            kh,
                            kw,
                            stride,
                            pad,
                        );
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Nearest-neighbour 2x spatial upsample of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample2x", self.val(x))?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        for bi in 0..n {
            kernels::upsample2x(
                &self.val(x).data()[bi * c * h * w..(bi + 1) * c * h * w],
                &mut out.data_mut()[bi * c * 4 * h * w..(bi + 1) * c * 4 * h * w],
                c,
                h,
                w,
            );
        }
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for bi in 0..n {
                    kernels::upsample2x_backward(
                        &go.data()[bi * c * 4 * h * w..(bi + 1) * c * 4 * h * w],
                        &mut dx.data_mut()[bi * c * h * w..(bi + 1) * c * h * w],
                        c,
                        h,
                        w,
                    );
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rmsnorm_rows(&mut self, x: Var, gamma: Var, eps: f32) -> Result<Var> {
        let (r, c) = dims2("rmsnorm_rows", self.val(x))?;
        if self.val(gamma).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm_rows",
                lhs: vec![c],
                rhs: self.val(gamma).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            kernels::rmsnorm_row(
                &self.val(x).data()[i * c..(i + 1) * c],
                self.val(gamma).data(),
                eps,
                &mut out.data_mut()[i * c..(i + 1) * c],
            );
        }
        Ok(self.op(
            out,
            vec![x, gamma],
            Box::new(move |go, parents, _, needs| {
                let xv = parents[0].data();
                let gv = parents[1].data();
                let mut dx = needs[0].then(|| Tensor::zeros(&[r, c]));
                let mut dg = needs[1].then(|| Tensor::zeros(&[c]));
                for i in 0..r {
                    let xr = &xv[i * c..(i + 1) * c];
                    let gr = &go.data()[i * c..(i + 1) * c];
                    let mut ss = 0.0f32;
                    for &v in xr {
                        ss += v * v;
                    }
                    let inv = 1.0 / (ss / c as f32 + eps).sqrt();
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..c {
                            dg.data_mut()[j] += gr[j] * xr[j] * inv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut s = 0.0f32;
                        for j in 0..c {
                            s += gr[j] * gv[j] * xr[j];
                        }
                        let k = s * inv * inv * inv / c as f32;
                        let dr = &mut dx.data_mut()[i * c..(i + 1) * c];
                        for j in 0..c {
                            dr[j] = gr[j] * gv[j] * inv - xr[j] * k;
                        }
                    }
                }
                vec![dx, dg]
            }),
        ))
    }

    /// RMS normalization across the channel axis of an NCHW tensor,
    /// applied independently at every spatial location.
    pub fn rmsnorm_channels(&mut self, x: Var, gamma: Var, eps: f32) -> Result<Var> {
        let (n, c, h, w) = dims4("rmsnorm_channels", self.val(x))?;
        if self.val(gamma).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "rmsnorm_channels",
                lhs: vec![c],
                rhs: self.val(gamma).shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.val(x).data();
            let gv = self.val(gamma).data();
            for bi in 0..n {
                for p in 0..hw {
                    let base = bi * c * hw + p;
                    let mut ss = 0.0f32;
                    for ch in 0..c {
                        let v = xv[base + ch * hw];
                        ss += v * v;
                    }
                    let inv = 1.0 / (ss / c as f32 + eps).sqrt();
                    for ch in 0..c {
                        out.data_mut()[base + ch * hw] = xv[base + ch * hw] * inv * gv[ch];
                    }
                }
            }
        }
        Ok(self.op(
            out,
            vec![x, gamma],
            Box::new(move |go, parents, _, needs| {
                let xv = parents[0].data();
                let gv = parents[1].data();
                let mut dx = needs[0].then(|| Tensor::zeros(&[n, c, h, w]));
                let mut dg = needs[1].then(|| Tensor::zeros(&[c]));
                for bi in 0..n {
                    for p in 0..hw {
                        let base = bi * c * hw + p;
                        let mut ss = 0.0f32;
                        for ch in 0..c {
                            let v = xv[base + ch * hw];
                            ss += v * v;
                        }
                        let inv = 1.0 / (ss / c as f32 + eps).sqrt();
                        if let Some(dg) = dg.as_mut() {
                            for ch in 0..c {
                                dg.data_mut()[ch] += go.data()[base + ch * hw] * xv[base + ch * hw] * inv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let mut s = 0.0f32;
                            for ch in 0..c {
                                s += go.data()[base + ch * hw] * gv[ch] * xv[base + ch * hw];
                            }
                            let k = s * inv * inv * inv / c as f32;
                            for ch in 0..c {
                                dx.data_mut()[base + ch * hw] =
                                    go.data()[base + ch * hw] * gv[ch] * inv - xv[base + ch * hw] * k;
                            }
                        }
                    }
                }
                vec![dx, dg]
            }),
        ))
    }

    /// Permutes [n, c, h, w] into [n*h*w, c] token rows.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("nchw_to_rows", self.val(x))?;
        let hw = h * w;
        let mut out = Tensor::zeros(&[n * hw, c]);
        {
            let xv = self.val(x).data();
            for bi in 0..n {
                for p in 0..hw {
                    let row = &mut out.data_mut()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                    for ch in 0..c {
                        row[ch] = xv[(bi * c + ch) * hw + p];
                    }
                }
            }
        }
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for bi in 0..n {
                    for p in 0..hw {
                        let row = &go.data()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                        for ch in 0..c {
                            dx.data_mut()[(bi * c + ch) * hw + p] = row[ch];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, n: usize, c: usize, h: usize, w: usize) -> Result<Var> {
        let (r, rc) = dims2("rows_to_nchw", self.val(x))?;
        if r != n * h * w || rc != c {
            return Err(TensorError::ShapeMismatch {
                op: "rows_to_nchw",
                lhs: vec![n * h * w, c],
                rhs: self.val(x).shape().to_vec(),
            });
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.val(x).data();
            for bi in 0..n {
                for p in 0..hw {
                    let row = &xv[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                    for ch in 0..c {
                        out.data_mut()[(bi * c + ch) * hw + p] = row[ch];
                    }
                }
            }
        }
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = Tensor::zeros(&[n * hw, c]);
                for bi in 0..n {
                    for p in 0..hw {
                        let row = &mut dx.data_mut()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                        for ch in 0..c {
                            row[ch] = go.data()[(bi * c + ch) * hw + p];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Rotary position encoding over rows of interleaved heads.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[usize],
        head_dim: usize,
        theta: f32,
    ) -> Result<Var> {
        let (r, hd) = dims2("rope", self.val(x))?;
        if positions.len() != r || head_dim == 0 || hd % head_dim != 0 || head_dim % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!(
                    "{r} rows, {} positions, width {hd}, head_dim {head_dim}",
                    positions.len()
                ),
            });
        }
        let heads = hd / head_dim;
        let mut out = self.val(x).clone();
        for i in 0..r {
            for hh in 0..heads {
                let s = i * hd + hh * head_dim;
                kernels::rope_rotate(&mut out.data_mut()[s..s + head_dim], positions[i], theta, 1.0);
            }
        }
        out.set_requires_grad(false);
        let pos = positions.to_vec();
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = go.clone();
                for i in 0..r {
                    for hh in 0..heads {
                        let s = i * hd + hh * head_dim;
                        kernels::rope_rotate(&mut dx.data_mut()[s..s + head_dim], pos[i], theta, -1.0);
                    }
                }
                dx.set_requires_grad(false);
                vec![Some(dx)]
            }),
        ))
    }

    /// Scaled dot-product scores between multi-head query and key rows.
    /// Output rows are ordered head-major: row h*ql + i holds the scores of
    /// query i under head h.  With `causal`, entries j > i are -1e9 so a
    /// following softmax zeroes them exactly.
    pub fn attn_scores(&mut self, q: Var, k: Var, n_heads: usize, causal: bool) -> Result<Var> {
        let (ql, hd) = dims2("attn_scores", self.val(q))?;
        let (kl, khd) = dims2("attn_scores", self.val(k))?;
        if hd != khd || n_heads == 0 || hd % n_heads != 0 {
            return Err(TensorError::Invalid {
                op: "attn_scores",
                msg: format!("widths {hd}/{khd} with {n_heads} heads"),
            });
        }
        if causal && ql != kl {
            return Err(TensorError::Invalid {
                op: "attn_scores",
                msg: format!("causal requires square attention, got {ql}x{kl}"),
            });
        }
        let d = hd / n_heads;
        let scale = 1.0 / (d as f32).sqrt();
        let mut out = Tensor::zeros(&[n_heads * ql, kl]);
        {
            let qv = self.val(q).data();
            let kv = self.val(k).data();
            for hh in 0..n_heads {
                for i in 0..ql {
                    let row = &mut out.data_mut()[(hh * ql + i) * kl..(hh * ql + i + 1) * kl];
                    let count = if causal { i + 1 } else { kl };
                    kernels::attn_score_row(
                        &qv[i * hd + hh * d..i * hd + hh * d + d],
                        &kv[hh * d..],
                        hd,
                        count,
                        scale,
                        &mut row[..count],
                    );
                    for v in &mut row[count..] {
                        *v = -1e9;
                    }
                }
            }
        }
        Ok(self.op(
            out,
            vec![q, k],
            Box::new(move |go, parents, _, needs| {
                let qv = parents[0].data();
                let kv = parents[1].data();
                let mut dq = needs[0].then(|| Tensor::zeros(&[ql, hd]));
                let mut dk = needs[1].then(|| Tensor::zeros(&[kl, hd]));
                let mut qh = vec![0.0f32; ql * d];
                let mut kh = vec![0.0f32; kl * d];
                let mut dsh = vec![0.0f32; ql * kl];
                for hh in 0..n_heads {
                    for i in 0..ql {
                        let src = &go.data()[(hh * ql + i) * kl..(hh * ql + i + 1) * kl];
                        let lim = if causal { i + 1 } else { kl };
                        let dst = &mut dsh[i * kl..(i + 1) * kl];
                        for j in 0..lim {
                            dst[j] = src[j] * scale;
                        }
                        dst[lim..].fill(0.0);
                    }
                    for i in 0..ql {
                        qh[i * d..(i + 1) * d]
                            .copy_from_slice(&qv[i * hd + hh * d..i * hd + hh * d + d]);
                    }
                    for j in 0..kl {
                        kh[j * d..(j + 1) * d]
                            .copy_from_slice(&kv[j * hd + hh * d..j * hd + hh * d + d]);
                    }
                    if let Some(dq) = dq.as_mut() {
                        let mut dqh = vec![0.0f32; ql * d];
                        kernels::matmul_nn(&dsh, &kh, &mut dqh, ql, kl, d);
                        for i in 0..ql {
                            let dst = &mut dq.data_mut()[i * hd + hh * d..i * hd + hh * d + d];
                            for (a, b) in dst.iter_mut().zip(&dqh[i * d..(i + 1) * d]) {
                                *a += b;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let mut dkh = vec![0.0f32; kl * d];
                        kernels::matmul_tn(&dsh, &qh, &mut dkh, kl, ql, d);
                        for j in 0..kl {
                            let dst = &mut dk.data_mut()[j * hd + hh * d..j * hd + hh * d + d];
                            for (a, b) in dst.iter_mut().zip(&dkh[j * d..(j + 1) * d]) {
                                *a += b;
                            }
                        }
                    }
                }
                vec![dq, dk]
            }),
        ))
    }

    /// Mixes value rows with attention probabilities (inverse layout of
    /// [`Graph::attn_scores`]): row h*ql + i of `p` weights the values of
    /// head h for query i.
    pub fn attn_mix(&mut self, p: Var, v: Var, n_heads: usize) -> Result<Var> {
        let (pr, kl) = dims2("attn_mix", self.val(p))?;
        let (vr, hd) = dims2("attn_mix", self.val(v))?;
        if vr != kl || n_heads == 0 || pr % n_heads != 0 || hd % n_heads != 0 {
            return Err(TensorError::Invalid {
                op: "attn_mix",
                msg: format!("probs {pr}x{kl}, values {vr}x{hd}, {n_heads} heads"),
            });
        }
        let ql = pr / n_heads;
        let d = hd / n_heads;
        let mut out = Tensor::zeros(&[ql, hd]);
        {
            let pv = self.val(p).data();
            let vv = self.val(v).data();
            for hh in 0..n_heads {
                for i in 0..ql {
                    kernels::attn_weighted_sum(
                        &pv[(hh * ql + i) * kl..(hh * ql + i + 1) * kl],
                        &vv[hh * d..],
                        hd,
                        d,
                        &mut out.data_mut()[i * hd + hh * d..i * hd + hh * d + d],
                    );
                }
            }
        }
        Ok(self.op(
            out,
            vec![p, v],
            Box::new(move |go, parents, _, needs| {
                let pv = parents[0].data();
                let vv = parents[1].data();
                let mut dp = needs[0].then(|| Tensor::zeros(&[n_heads * ql, kl]));
                let mut dv = needs[1].then(|| Tensor::zeros(&[kl, hd]));
                let mut douth = vec![0.0f32; ql * d];
                let mut vh = vec![0.0f32; kl * d];
                let mut ph = vec![0.0f32; ql * kl];
                for hh in 0..n_heads {
                    for i in 0..ql {
                        douth[i * d..(i + 1) * d]
                            .copy_from_slice(&go.data()[i * hd + hh * d..i * hd + hh * d + d]);
                    }
                    for j in 0..kl {
                        vh[j * d..(j + 1) * d]
                            .copy_from_slice(&vv[j * hd + hh * d..j * hd + hh * d + d]);
                    }
                    if let Some(dp) = dp.as_mut() {
                        let dst = &mut dp.data_mut()[hh * ql * kl..(hh + 1) * ql * kl];
                        kernels::matmul_nt(&douth, &vh, dst, ql, d, kl);
                    }
                    if let Some(dv) = dv.as_mut() {
                        ph.copy_from_slice(&pv[hh * ql * kl..(hh + 1) * ql * kl]);
                        let mut dvh = vec![0.0f32; kl * d];
                        kernels::matmul_tn(&ph, &douth, &mut dvh, kl, ql, d);
                        for j in 0..kl {
                            let dst = &mut dv.data_mut()[j * hd + hh * d..j * hd + hh * d + d];
                            for (a, b) in dst.iter_mut().zip(&dvh[j * d..(j + 1) * d]) {
                                *a += b;
                            }
                        }
                    }
                }
                vec![dp, dv]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng::Rng;

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3, 3], (0..9).map(|i| i as f32).collect()).unwrap());
        // 3x3 kernel with a single 1 at the center.
        let mut wdata = vec![0.0; 9];
        wdata[4] = 1.0;
        let w = g.constant(Tensor::new(vec![1, 1, 3, 3], wdata).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.val(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(g.val(y).data(), g.val(x).data());
    }

    #[test]
    fn conv2d_stride_two_halves_resolution() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(0);
        let x = g.constant(Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::randn(&[4, 3, 3, 3], 0.1, &mut rng));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.val(y).shape(), &[2, 4, 4, 4]);
    }

    #[test]
    fn nchw_rows_round_trip() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(1);
        let x = g.constant(Tensor::randn(&[2, 5, 3, 4], 1.0, &mut rng));
        let rows = g.nchw_to_rows(x).unwrap();
        assert_eq!(g.val(rows).shape(), &[2 * 3 * 4, 5]);
        let back = g.rows_to_nchw(rows, 2, 5, 3, 4).unwrap();
        assert_eq!(g.val(back).data(), g.val(x).data());
    }

    #[test]
    fn causal_scores_mask_future_positions() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(2);
        let q = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let s = g.attn_scores(q, k, 2, true).unwrap();
        assert_eq!(g.val(s).shape(), &[8, 4]);
        for hh in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let v = g.val(s).data()[(hh * 4 + i) * 4 + j];
                    if j > i {
                        assert_eq!(v, -1e9);
                    } else {
                        assert!(v.abs() < 1e4);
                    }
                }
            }
        }
    }

    #[test]
    fn attention_is_a_convex_mixture_of_values() {
        let mut g = Graph::new();
        let mut rng = Rng::seed_from_u64(3);
        let q = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let k = g.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        // Values constant across rows: the mixture must reproduce them.
        let mut vdata = Vec::new();
        for _ in 0..5 {
            vdata.extend_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        }
        let v = g.constant(Tensor::new(vec![5, 4], vdata).unwrap());
        let s = g.attn_scores(q, k, 2, false).unwrap();
        let p = g.softmax_rows(s).unwrap();
        let o = g.attn_mix(p, v, 2).unwrap();
        for i in 0..3 {
            let row = &g.val(o).data()[i * 4..(i + 1) * 4];
            for (a, b) in row.iter().zip(&[1.0, -2.0, 0.5, 3.0]) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rmsnorm_rows_unit_gain_normalizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4], vec![2.0, -2.0, 2.0, -2.0]).unwrap());
        let gamma = g.constant(Tensor::ones(&[4]));
        let y = g.rmsnorm_rows(x, gamma, 1e-6).unwrap();
        for v in g.val(y).data() {
            assert!((v.abs() - 1.0).abs() < 1e-4);
        }
    }
}
