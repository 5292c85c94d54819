//! Core differentiable ops: elementwise math, matmul, structural
//! rearrangements and scalar losses.

use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{Result, Tensor, TensorError};

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
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
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("add", self.val(a), self.val(b))?;
        let mut out = self.val(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(b).data()) {
            *o += x;
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(|go, _, _, needs| {
                let g = |n: bool| n.then(|| go.clone());
                vec![g(needs[0]), g(needs[1])]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("sub", self.val(a), self.val(b))?;
        let mut out = self.val(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(b).data()) {
            *o -= x;
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(|go, _, _, needs| {
                let da = needs[0].then(|| go.clone());
                let db = needs[1].then(|| {
                    let mut n = go.clone();
                    for v in n.data_mut() {
                        *v = -*v;
                    }
                    n
                });
                vec![da, db]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("mul", self.val(a), self.val(b))?;
        let mut out = self.val(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.val(b).data()) {
            *o *= x;
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(|go, parents, _, needs| {
                let scaled = |other: &Tensor| {
                    let mut t = go.clone();
                    for (v, o) in t.data_mut().iter_mut().zip(other.data()) {
                        *v *= o;
                    }
                    t
                };
                vec![
                    needs[0].then(|| scaled(parents[1])),
                    needs[1].then(|| scaled(parents[0])),
                ]
            }),
        ))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.val(a).clone();
        for v in out.data_mut() {
            *v *= s;
        }
        out.set_requires_grad(false);
        self.op(
            out,
            vec![a],
            Box::new(move |go, _, _, _| {
                let mut g = go.clone();
                for v in g.data_mut() {
                    *v *= s;
                }
                vec![Some(g)]
            }),
        )
    }

    /// Stops gradient flow: same value, treated as a constant downstream.
    pub fn detach(&mut self, a: Var) -> Var {
        let mut value = self.val(a).clone();
        value.set_requires_grad(false);
        self.push_node(value, Vec::new(), None, false, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).clone().reshaped(shape.to_vec())?;
        let back_shape = self.val(a).shape().to_vec();
        Ok(self.op(
            out,
            vec![a],
            Box::new(move |go, _, _, _| {
                let g = go.clone().reshaped(back_shape.clone()).expect("same numel");
                vec![Some(g)]
            }),
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut out = self.val(a).clone();
        for v in out.data_mut() {
            *v = kernels::sigmoid(*v);
        }
        out.set_requires_grad(false);
        self.op(
            out,
            vec![a],
            Box::new(|go, _, out, _| {
                let mut g = go.clone();
                for (v, y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v *= y * (1.0 - y);
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut out = self.val(a).clone();
        for v in out.data_mut() {
            *v = kernels::silu(*v);
        }
        out.set_requires_grad(false);
        self.op(
            out,
            vec![a],
            Box::new(|go, parents, _, _| {
                let mut g = go.clone();
                for (v, &x) in g.data_mut().iter_mut().zip(parents[0].data()) {
                    let s = kernels::sigmoid(x);
                    *v *= s * (1.0 + x * (1.0 - s));
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let mut out = self.val(a).clone();
        for v in out.data_mut() {
            *v = v.tanh();
        }
        out.set_requires_grad(false);
        self.op(
            out,
            vec![a],
            Box::new(|go, _, out, _| {
                let mut g = go.clone();
                for (v, y) in g.data_mut().iter_mut().zip(out.data()) {
                    *v *= 1.0 - y * y;
                }
                vec![Some(g)]
            }),
        )
    }

    /// C[m,n] = A[m,k] B[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = rows_cols("matmul", self.val(a))?;
        let (kb, n) = rows_cols("matmul", self.val(b))?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_nn(self.val(a).data(), self.val(b).data(), out.data_mut(), m, ka, n);
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(move |go, parents, _, needs| {
                let k = ka;
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros(&[m, k]);
                    kernels::matmul_nt(go.data(), parents[1].data(), da.data_mut(), m, n, k);
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[k, n]);
                    kernels::matmul_tn(parents[0].data(), go.data(), db.data_mut(), k, m, n);
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Adds a bias row vector to every row of a matrix.
    pub fn add_bias_rows(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols("add_bias_rows", self.val(x))?;
        if self.val(bias).shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias_rows",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(bias).shape().to_vec(),
            });
        }
        let mut out = self.val(x).clone();
        let b = self.val(bias).data().to_vec();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                row[j] += b[j];
            }
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![x, bias],
            Box::new(move |go, _, _, needs| {
                let dx = needs[0].then(|| go.clone());
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..r {
                        let row = &go.data()[i * c..(i + 1) * c];
                        for j in 0..c {
                            db.data_mut()[j] += row[j];
                        }
                    }
                    db
                });
                vec![dx, db]
            }),
        ))
    }

    /// x W (+ bias), the standard dense layer.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.add_bias_rows(y, b),
            None => Ok(y),
        }
    }

    /// Scales row i of `x` by `s[i]`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = rows_cols("row_scale", self.val(x))?;
        if self.val(s).shape() != [r] {
            return Err(TensorError::ShapeMismatch {
                op: "row_scale",
                lhs: self.val(x).shape().to_vec(),
                rhs: self.val(s).shape().to_vec(),
            });
        }
        let mut out = self.val(x).clone();
        let sv = self.val(s).data().to_vec();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            for v in row {
                *v *= sv[i];
            }
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![x, s],
            Box::new(move |go, parents, _, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = go.clone();
                    let sv = parents[1].data();
                    for i in 0..r {
                        for v in &mut dx.data_mut()[i * c..(i + 1) * c] {
                            *v *= sv[i];
                        }
                    }
                    dx
                });
                let ds = needs[1].then(|| {
                    let mut ds = Tensor::zeros(&[r]);
                    let xv = parents[0].data();
                    for i in 0..r {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += go.data()[i * c + j] * xv[i * c + j];
                        }
                        ds.data_mut()[i] = acc;
                    }
                    ds
                });
                vec![dx, ds]
            }),
        ))
    }

    /// Selects rows of `x` by index; also serves as embedding lookup.
    /// Unreferenced rows of `x` receive an exactly-zero gradient.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = rows_cols("gather_rows", self.val(x))?;
        for &i in indices {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: r,
                });
            }
        }
        let k = indices.len();
        let mut out = Tensor::zeros(&[k, c]);
        for (j, &i) in indices.iter().enumerate() {
            out.data_mut()[j * c..(j + 1) * c].copy_from_slice(&self.val(x).data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = Tensor::zeros(&[r, c]);
                for (j, &i) in idx.iter().enumerate() {
                    let src = &go.data()[j * c..(j + 1) * c];
                    let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Builds a [rows, c] matrix that is zero except at `indices`, which
    /// receive the rows of `src` in order.
    pub fn place_rows(&mut self, src: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let (k, c) = rows_cols("place_rows", self.val(src))?;
        if k != indices.len() {
            return Err(TensorError::Invalid {
                op: "place_rows",
                msg: format!("{k} source rows but {} indices", indices.len()),
            });
        }
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "place_rows",
                    index: i,
                    bound: rows,
                });
            }
        }
        let mut out = Tensor::zeros(&[rows, c]);
        for (j, &i) in indices.iter().enumerate() {
            out.data_mut()[i * c..(i + 1) * c].copy_from_slice(&self.val(src).data()[j * c..(j + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(self.op(
            out,
            vec![src],
            Box::new(move |go, _, _, _| {
                let mut ds = Tensor::zeros(&[idx.len(), c]);
                for (j, &i) in idx.iter().enumerate() {
                    ds.data_mut()[j * c..(j + 1) * c].copy_from_slice(&go.data()[i * c..(i + 1) * c]);
                }
                vec![Some(ds)]
            }),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rows_cols("slice_cols", self.val(x))?;
        if start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&self.val(x).data()[i * c + start..i * c + start + len]);
        }
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, _, _| {
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    dx.data_mut()[i * c + start..i * c + start + len]
                        .copy_from_slice(&go.data()[i * len..(i + 1) * len]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = rows_cols("concat_cols", self.val(a))?;
        let (rb, cb) = rows_cols("concat_cols", self.val(b))?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.val(a).shape().to_vec(),
                rhs: self.val(b).shape().to_vec(),
            });
        }
        let c = ca + cb;
        let mut out = Tensor::zeros(&[ra, c]);
        for i in 0..ra {
            out.data_mut()[i * c..i * c + ca].copy_from_slice(&self.val(a).data()[i * ca..(i + 1) * ca]);
            out.data_mut()[i * c + ca..(i + 1) * c]
                .copy_from_slice(&self.val(b).data()[i * cb..(i + 1) * cb]);
        }
        Ok(self.op(
            out,
            vec![a, b],
            Box::new(move |go, _, _, needs| {
                let da = needs[0].then(|| {
                    let mut da = Tensor::zeros(&[ra, ca]);
                    for i in 0..ra {
                        da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&go.data()[i * c..i * c + ca]);
                    }
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = Tensor::zeros(&[ra, cb]);
                    for i in 0..ra {
                        db.data_mut()[i * cb..(i + 1) * cb]
                            .copy_from_slice(&go.data()[i * c + ca..(i + 1) * c]);
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let sum: f32 = self.val(a).data().iter().sum();
        let shape = self.val(a).shape().to_vec();
        self.op(
            Tensor::scalar(sum),
            vec![a],
            Box::new(move |go, _, _, _| {
                let g = go.data()[0];
                vec![Some(Tensor::full(&shape, g))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.val(a).numel() as f32;
        let mean: f32 = self.val(a).data().iter().sum::<f32>() / n;
        let shape = self.val(a).shape().to_vec();
        self.op(
            Tensor::scalar(mean),
            vec![a],
            Box::new(move |go, _, _, _| {
                let g = go.data()[0] / n;
                vec![Some(Tensor::full(&shape, g))]
            }),
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("mse_loss", self.val(a), self.val(b))?;
        let n = self.val(a).numel() as f32;
        let mut acc = 0.0f32;
        for (x, y) in self.val(a).data().iter().zip(self.val(b).data()) {
            let d = x - y;
            acc += d * d;
        }
        Ok(self.op(
            Tensor::scalar(acc / n),
            vec![a, b],
            Box::new(move |go, parents, _, needs| {
                let scale = 2.0 * go.data()[0] / n;
                let make = |sign: f32| {
                    let mut g = parents[0].clone();
                    for (v, y) in g.data_mut().iter_mut().zip(parents[1].data()) {
                        *v = sign * scale * (*v - y);
                    }
                    g.set_requires_grad(false);
                    g
                };
                vec![needs[0].then(|| make(1.0)), needs[1].then(|| make(-1.0))]
            }),
        ))
    }

    /// Mean absolute difference over all elements (subgradient 0 at ties).
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        expect_same("l1_loss", self.val(a), self.val(b))?;
        let n = self.val(a).numel() as f32;
        let mut acc = 0.0f32;
        for (x, y) in self.val(a).data().iter().zip(self.val(b).data()) {
            acc += (x - y).abs();
        }
        Ok(self.op(
            Tensor::scalar(acc / n),
            vec![a, b],
            Box::new(move |go, parents, _, needs| {
                let scale = go.data()[0] / n;
                let make = |sign: f32| {
                    let mut g = parents[0].clone();
                    for (v, y) in g.data_mut().iter_mut().zip(parents[1].data()) {
                        let d = *v - y;
                        *v = if d > 0.0 {
                            sign * scale
                        } else if d < 0.0 {
                            -sign * scale
                        } else {
                            0.0
                        };
                    }
                    g.set_requires_grad(false);
                    g
                };
                vec![needs[0].then(|| make(1.0)), needs[1].then(|| make(-1.0))]
            }),
        ))
    }

    /// Mean binary cross-entropy of logits `x` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, x: Var, targets: Var) -> Result<Var> {
        expect_same("bce_with_logits", self.val(x), self.val(targets))?;
        let n = self.val(x).numel() as f32;
        let mut acc = 0.0f32;
        for (&v, &t) in self.val(x).data().iter().zip(self.val(targets).data()) {
            // softplus(v) - v*t, computed stably.
            acc += v.max(0.0) + (-v.abs()).exp().ln_1p() - v * t;
        }
        Ok(self.op(
            Tensor::scalar(acc / n),
            vec![x, targets],
            Box::new(move |go, parents, _, needs| {
                let scale = go.data()[0] / n;
                let dx = needs[0].then(|| {
                    let mut g = parents[0].clone();
                    for (v, &t) in g.data_mut().iter_mut().zip(parents[1].data()) {
                        *v = scale * (kernels::sigmoid(*v) - t);
                    }
                    g.set_requires_grad(false);
                    g
                });
                vec![dx, None]
            }),
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows_cols("softmax_rows", self.val(x))?;
        let mut out = self.val(x).clone();
        for i in 0..r {
            kernels::softmax_row(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        out.set_requires_grad(false);
        Ok(self.op(
            out,
            vec![x],
            Box::new(move |go, _, out, _| {
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let p = &out.data()[i * c..(i + 1) * c];
                    let g = &go.data()[i * c..(i + 1) * c];
                    let mut s = 0.0;
                    for j in 0..c {
                        s += p[j] * g[j];
                    }
                    let d = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        d[j] = p[j] * (g[j] - s);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Weighted mean cross-entropy of logit rows against integer targets:
    /// sum_i w_i * ce_i / sum_i w_i.  Rows with weight zero contribute an
    /// exactly-zero gradient.
    pub fn cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f32],
    ) -> Result<Var> {
        let (r, c) = rows_cols("cross_entropy_rows", self.val(logits))?;
        if targets.len() != r || weights.len() != r {
            return Err(TensorError::Invalid {
                op: "cross_entropy_rows",
                msg: format!(
                    "{r} rows but {} targets / {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        for &t in targets {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_rows",
                    index: t,
                    bound: c,
                });
            }
        }
        let wsum: f32 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy_rows",
                msg: "weights sum to zero".into(),
            });
        }
        let mut acc = 0.0f32;
        for i in 0..r {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &self.val(logits).data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            acc += weights[i] * (lse - row[targets[i]]);
        }
        let tgt = targets.to_vec();
        let wts = weights.to_vec();
        Ok(self.op(
            Tensor::scalar(acc / wsum),
            vec![logits],
            Box::new(move |go, parents, _, _| {
                let scale = go.data()[0] / wsum;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    if wts[i] == 0.0 {
                        continue;
                    }
                    let mut p = parents[0].data()[i * c..(i + 1) * c].to_vec();
                    kernels::softmax_row(&mut p);
                    let d = &mut dx.data_mut()[i * c..(i + 1) * c];
                    for j in 0..c {
                        d[j] = scale * wts[i] * p[j];
                    }
                    d[tgt[i]] -= scale * wts[i];
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn matmul_forward_matches_hand_computation() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.val(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[2, 8]));
        let loss = g
            .cross_entropy_rows(logits, &[3, 5], &[1.0, 1.0])
            .unwrap();
        let expected = (8.0f32).ln();
        assert!((g.val(loss).item().unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 9.0, -4.0, 2.0]).unwrap();
        let logits = g.leaf(t.with_requires_grad());
        let loss = g.cross_entropy_rows(logits, &[1, 0], &[1.0, 0.0]).unwrap();
        assert!((g.val(loss).item().unwrap() - (3.0f32).ln()).abs() < 1e-6);
        let grads = g.backward(loss).unwrap();
        let dl = grads.get(logits).unwrap();
        // Second row contributed nothing, so its gradient is exactly zero.
        assert_eq!(&dl.data()[3..6], &[0.0, 0.0, 0.0]);
        assert!(dl.data()[0] > 0.0);
    }

    #[test]
    fn gather_rows_scatter_gradient_is_exact() {
        let mut g = Graph::new();
        let table = g.leaf(Tensor::ones(&[4, 2]).with_requires_grad());
        let picked = g.gather_rows(table, &[1, 1, 3]).unwrap();
        let loss = g.sum_all(picked);
        let grads = g.backward(loss).unwrap();
        let dt = grads.get(table).unwrap();
        assert_eq!(dt.data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_requires_grad());
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let loss = g.mean_all(y);
        let grads = g.backward(loss).unwrap();
        // d(x * sg(x))/dx = sg(x) = 2, not 2x = 4.
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 4], (0..8).map(|i| i as f32).collect()).unwrap());
        let left = g.slice_cols(x, 0, 2).unwrap();
        let right = g.slice_cols(x, 2, 2).unwrap();
        let back = g.concat_cols(left, right).unwrap();
        assert_eq!(g.val(back).data(), g.val(x).data());
    }

    #[test]
    fn l1_subgradient_is_zero_at_ties() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 5.0]).unwrap().with_requires_grad());
        let b = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let loss = g.l1_loss(a, b).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.5]);
    }
}
