//! Every differentiable op is checked against central differences on a
//! small randomized instance.

use mowm_autograd::finite_diff::gradcheck;
use mowm_autograd::graph::{Graph, Var};
use mowm_autograd::tensor::Result;
use mowm_autograd::{ParamStore, Rng, Tensor};

const H: f32 = 1e-3;
const TOL_ABS: f32 = 5e-3;
const TOL_REL: f32 = 5e-3;

fn check<F>(store: &mut ParamStore, names: &[&str], build: F)
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let report = gradcheck(store, names, H, build).expect("gradcheck runs");
    assert!(
        report.max_abs_diff < TOL_ABS && report.max_rel_diff < TOL_REL,
        "gradcheck failed: {:?}",
        report.worst_param()
    );
}

fn store_with(entries: &[(&str, &[usize], f32)], seed: u64) -> ParamStore {
    let mut rng = Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, std) in entries {
        store
            .add(name, Tensor::randn(shape, *std, &mut rng))
            .unwrap();
    }
    store
}

#[test]
fn elementwise_chain() {
    let mut store = store_with(&[("a", &[2, 3], 0.8), ("b", &[2, 3], 0.8)], 1);
    check(&mut store, &["a", "b"], |s, g| {
        let a = g.param(s, s.id("a").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let sum = g.add(a, b)?;
        let diff = g.sub(a, b)?;
        let prod = g.mul(sum, diff)?;
        let scaled = g.mul_scalar(prod, 0.7);
        let sg = g.sigmoid(scaled);
        let si = g.silu(sg);
        let th = g.tanh(si);
        Ok(g.mean_all(th))
    });
}

#[test]
fn matmul_and_bias() {
    let mut store = store_with(&[("x", &[3, 4], 0.6), ("w", &[4, 5], 0.6), ("b", &[5], 0.6)], 2);
    check(&mut store, &["x", "w", "b"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let y = g.linear(x, w, Some(b))?;
        let sq = g.mul(y, y)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn row_scale_and_gather() {
    let mut store = store_with(&[("x", &[4, 3], 0.9), ("s", &[4], 0.9)], 3);
    check(&mut store, &["x", "s"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let sc = g.param(s, s.id("s").unwrap());
        let y = g.row_scale(x, sc)?;
        let picked = g.gather_rows(y, &[0, 2, 2, 3])?;
        let sq = g.mul(picked, picked)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn place_slice_concat() {
    let mut store = store_with(&[("src", &[2, 4], 0.7)], 4);
    check(&mut store, &["src"], |s, g| {
        let src = g.param(s, s.id("src").unwrap());
        let placed = g.place_rows(src, &[1, 3], 5)?;
        let left = g.slice_cols(placed, 0, 2)?;
        let right = g.slice_cols(placed, 2, 2)?;
        let joined = g.concat_cols(right, left)?;
        let sq = g.mul(joined, joined)?;
        Ok(g.sum_all(sq))
    });
}

#[test]
fn losses() {
    let mut store = store_with(&[("a", &[2, 3], 0.8), ("b", &[2, 3], 0.8)], 5);
    check(&mut store, &["a", "b"], |s, g| {
        let a = g.param(s, s.id("a").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let mse = g.mse_loss(a, b)?;
        let l1 = g.l1_loss(a, b)?;
        Ok(g.add(mse, l1)?)
    });
}

#[test]
fn bce_logits() {
    let mut store = store_with(&[("x", &[3, 2], 1.0)], 6);
    check(&mut store, &["x"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let t = g.constant(Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.3, 0.9, 1.0, 0.0]).unwrap());
        g.bce_with_logits(x, t)
    });
}

#[test]
fn cross_entropy_weighted() {
    let mut store = store_with(&[("x", &[4, 6], 1.2)], 7);
    check(&mut store, &["x"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        g.cross_entropy_rows(x, &[2, 0, 5, 1], &[1.0, 0.0, 1.0, 1.0])
    });
}

#[test]
fn softmax_weighted_sum() {
    let mut store = store_with(&[("x", &[3, 4], 1.0)], 8);
    check(&mut store, &["x"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let p = g.softmax_rows(x)?;
        let w = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i % 5) as f32).collect()).unwrap());
        let weighted = g.mul(p, w)?;
        Ok(g.sum_all(weighted))
    });
}

#[test]
fn conv_stride_one() {
    let mut store = store_with(
        &[("x", &[2, 2, 5, 5], 0.5), ("w", &[3, 2, 3, 3], 0.4), ("b", &[3], 0.4)],
        9,
    );
    check(&mut store, &["x", "w", "b"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let b = g.param(s, s.id("b").unwrap());
        let y = g.conv2d(x, w, Some(b), 1, 1)?;
        let a = g.silu(y);
        let sq = g.mul(a, a)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn conv_stride_two_and_upsample() {
    let mut store = store_with(&[("x", &[1, 2, 6, 6], 0.5), ("w", &[2, 2, 3, 3], 0.4)], 10);
    check(&mut store, &["x", "w"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let w = g.param(s, s.id("w").unwrap());
        let down = g.conv2d(x, w, None, 2, 1)?;
        let up = g.upsample2x(down)?;
        let sq = g.mul(up, up)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn rmsnorm_rows_grad() {
    let mut store = store_with(&[("x", &[3, 6], 0.9), ("gamma", &[6], 0.5)], 11);
    check(&mut store, &["x", "gamma"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let gamma = g.param(s, s.id("gamma").unwrap());
        let y = g.rmsnorm_rows(x, gamma, 1e-5)?;
        let w = g.constant(Tensor::new(vec![3, 6], (0..18).map(|i| ((i * 7) % 5) as f32 * 0.3).collect()).unwrap());
        let weighted = g.mul(y, w)?;
        Ok(g.sum_all(weighted))
    });
}

#[test]
fn rmsnorm_channels_grad() {
    let mut store = store_with(&[("x", &[2, 3, 2, 2], 0.8), ("gamma", &[3], 0.6)], 12);
    check(&mut store, &["x", "gamma"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let gamma = g.param(s, s.id("gamma").unwrap());
        let y = g.rmsnorm_channels(x, gamma, 1e-5)?;
        let sq = g.mul(y, y)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn permute_round_trip_grad() {
    let mut store = store_with(&[("x", &[2, 3, 2, 2], 0.7)], 13);
    check(&mut store, &["x"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let rows = g.nchw_to_rows(x)?;
        let sq = g.mul(rows, rows)?;
        let back = g.rows_to_nchw(sq, 2, 3, 2, 2)?;
        Ok(g.mean_all(back))
    });
}

#[test]
fn rope_grad() {
    let mut store = store_with(&[("x", &[3, 8], 0.8)], 14);
    check(&mut store, &["x"], |s, g| {
        let x = g.param(s, s.id("x").unwrap());
        let r = g.rope(x, &[0, 3, 7], 4, 10_000.0)?;
        let w = g.constant(Tensor::new(vec![3, 8], (0..24).map(|i| ((i % 3) as f32) - 1.0).collect()).unwrap());
        let weighted = g.mul(r, w)?;
        Ok(g.sum_all(weighted))
    });
}

#[test]
fn full_attention_grad() {
    let mut store = store_with(&[("q", &[3, 8], 0.6), ("k", &[5, 8], 0.6), ("v", &[5, 8], 0.6)], 15);
    check(&mut store, &["q", "k", "v"], |s, g| {
        let q = g.param(s, s.id("q").unwrap());
        let k = g.param(s, s.id("k").unwrap());
        let v = g.param(s, s.id("v").unwrap());
        let sc = g.attn_scores(q, k, 2, false)?;
        let p = g.softmax_rows(sc)?;
        let o = g.attn_mix(p, v, 2)?;
        let sq = g.mul(o, o)?;
        Ok(g.mean_all(sq))
    });
}

#[test]
fn causal_attention_grad() {
    let mut store = store_with(&[("q", &[4, 8], 0.6), ("k", &[4, 8], 0.6), ("v", &[4, 8], 0.6)], 16);
    check(&mut store, &["q", "k", "v"], |s, g| {
        let q = g.param(s, s.id("q").unwrap());
        let k = g.param(s, s.id("k").unwrap());
        let v = g.param(s, s.id("v").unwrap());
        let rq = g.rope(q, &[0, 1, 2, 3], 4, 10_000.0)?;
        let rk = g.rope(k, &[0, 1, 2, 3], 4, 10_000.0)?;
        let sc = g.attn_scores(rq, rk, 2, true)?;
        let p = g.softmax_rows(sc)?;
        let o = g.attn_mix(p, v, 2)?;
        let sq = g.mul(o, o)?;
        Ok(g.mean_all(sq))
    });
}

/// Small conv -> norm -> attention -> cross-entropy network touching most
/// ops at once.
#[test]
fn composite_network_grad() {
    let mut store = store_with(
        &[
            ("conv.w", &[4, 2, 3, 3], 0.4),
            ("conv.b", &[4], 0.2),
            ("norm.g", &[4], 0.5),
            ("proj.w", &[4, 8], 0.5),
            ("out.w", &[8, 5], 0.5),
        ],
        17,
    );
    let mut rng = Rng::seed_from_u64(99);
    let input = Tensor::randn(&[1, 2, 4, 4], 0.8, &mut rng);
    check(
        &mut store,
        &["conv.w", "conv.b", "norm.g", "proj.w", "out.w"],
        move |s, g| {
            let x = g.constant(input.clone());
            let w = g.param(s, s.id("conv.w").unwrap());
            let b = g.param(s, s.id("conv.b").unwrap());
            let y = g.conv2d(x, w, Some(b), 2, 1)?;
            let a = g.silu(y);
            let rows = g.nchw_to_rows(a)?;
            let gamma = g.param(s, s.id("norm.g").unwrap());
            let n = g.rmsnorm_rows(rows, gamma, 1e-5)?;
            let pw = g.param(s, s.id("proj.w").unwrap());
            let h = g.linear(n, pw, None)?;
            let hs = g.silu(h);
            let ow = g.param(s, s.id("out.w").unwrap());
            let logits = g.linear(hs, ow, None)?;
            g.cross_entropy_rows(logits, &[1, 4, 0, 2], &[1.0, 1.0, 0.0, 1.0])
        },
    );
}
