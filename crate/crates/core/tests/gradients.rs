//! Finite-difference verification of every differentiable op, in f64.
//!
//! Each check builds the op twice: once recording gradients, once inside a
//! closure re-evaluated by central differences. The loss is a fixed random
//! weighting of the output so no gradient component can hide by symmetry.

use doctr_core::numerics::gradcheck::{central_diff, max_rel_err};
use doctr_core::numerics::{
    feed_forward, multi_head_attention, AttnVars, FfnVars, Graph, Rng, Tensor, Var,
};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Checks d(loss)/d(x) for `build`, where x takes `data` with shape `shape`
/// and loss = sum(build(x) * w) for fixed random w.
fn grad_check(
    shape: &[usize],
    data: &[f64],
    seed: u64,
    tol: f64,
    build: impl Fn(&mut Graph<f64>, Var) -> Var,
) {
    let wrng = Rng::new(seed ^ 0xF00D);
    let run = |values: &[f64], with_grad: bool| -> (f64, Option<Vec<f64>>) {
        let mut g = Graph::<f64>::new();
        let x = if with_grad {
            g.param(Tensor::new(shape.to_vec(), values.to_vec()).unwrap())
        } else {
            g.input(Tensor::new(shape.to_vec(), values.to_vec()).unwrap())
        };
        let y = build(&mut g, x);
        let mut w = Tensor::<f64>::zeros(g.shape(y).to_vec());
        let mut lrng = wrng.clone();
        lrng.fill_uniform(w.data_mut(), -1.0, 1.0);
        let w = g.input(w);
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum_all(prod);
        let value = g.value(loss).item().unwrap();
        if with_grad {
            g.backward(loss).unwrap();
            let grad = g.grad(x).expect("gradient reaches the parameter");
            (value, Some(grad.into_data()))
        } else {
            (value, None)
        }
    };
    let (_, analytic) = run(data, true);
    let analytic = analytic.unwrap();
    let mut f = |xs: &[f64]| run(xs, false).0;
    let numeric = central_diff(&mut f, data, EPS);
    let err = max_rel_err(&analytic, &numeric);
    assert!(err < tol, "gradient mismatch: max rel err {err}");
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    (0..n).map(|_| rng.uniform(lo, hi)).collect()
}

/// Random values kept away from zero (for kinked ops like relu/abs).
fn random_off_zero(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            let v: f64 = rng.uniform(0.2, 1.0);
            if rng.next_u64() % 2 == 0 {
                v
            } else {
                -v
            }
        })
        .collect()
}

#[test]
fn grad_relu() {
    let shape = [3, 4];
    grad_check(&shape, &random_off_zero(&shape, 1), 1, TOL, |g, x| g.relu(x));
}

#[test]
fn grad_sigmoid() {
    let shape = [2, 5];
    grad_check(&shape, &random(&shape, -2.0, 2.0, 2), 2, TOL, |g, x| {
        g.sigmoid(x)
    });
}

#[test]
fn grad_abs() {
    let shape = [7];
    grad_check(&shape, &random_off_zero(&shape, 3), 3, TOL, |g, x| g.abs(x));
}

#[test]
fn grad_softclamp01() {
    // spread over all three regimes of the clamp (knees avoided by sampling)
    let shape = [9];
    grad_check(&shape, &random(&shape, -0.4, 1.4, 27), 27, TOL, |g, x| {
        g.softclamp01(x, 0.1).unwrap()
    });
}

#[test]
fn grad_scale_add_sub_mul() {
    let shape = [2, 3];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 4), 4, TOL, |g, x| {
        let other = g.input(Tensor::new(vec![2, 3], random(&shape, -1.0, 1.0, 40)).unwrap());
        let a = g.add(x, other).unwrap();
        let b = g.sub(a, x).unwrap();
        let c = g.mul(b, x).unwrap();
        g.scale(c, 0.7)
    });
}

#[test]
fn grad_matmul_lhs() {
    let shape = [3, 4];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 5), 5, TOL, |g, x| {
        let b = g.input(Tensor::new(vec![4, 2], random(&[4, 2], -1.0, 1.0, 50)).unwrap());
        g.matmul(x, b).unwrap()
    });
}

#[test]
fn grad_matmul_rhs() {
    let shape = [4, 2];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 6), 6, TOL, |g, x| {
        let a = g.input(Tensor::new(vec![3, 4], random(&[3, 4], -1.0, 1.0, 60)).unwrap());
        g.matmul(a, x).unwrap()
    });
}

#[test]
fn grad_add_channels_bias() {
    let shape = [4];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 7), 7, TOL, |g, x| {
        let a = g.input(Tensor::new(vec![3, 4], random(&[3, 4], -1.0, 1.0, 70)).unwrap());
        g.add_channels(a, x).unwrap()
    });
}

#[test]
fn grad_softmax_last_axis() {
    let shape = [3, 4];
    grad_check(&shape, &random(&shape, -2.0, 2.0, 8), 8, TOL, |g, x| {
        g.softmax(x, &[1]).unwrap()
    });
}

#[test]
fn grad_softmax_axis_set() {
    let shape = [2, 3, 2];
    grad_check(&shape, &random(&shape, -2.0, 2.0, 9), 9, TOL, |g, x| {
        g.softmax(x, &[0, 2]).unwrap()
    });
}

#[test]
fn grad_layer_norm_input() {
    let shape = [4, 6];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 10), 10, TOL, |g, x| {
        let gain = g.input(Tensor::new(vec![6], random(&[6], 0.5, 1.5, 100)).unwrap());
        let bias = g.input(Tensor::new(vec![6], random(&[6], -0.5, 0.5, 101)).unwrap());
        g.layer_norm(x, gain, bias).unwrap()
    });
}

#[test]
fn grad_layer_norm_gain_bias() {
    let shape = [6];
    grad_check(&shape, &random(&shape, 0.5, 1.5, 11), 11, TOL, |g, gain| {
        let x = g.input(Tensor::new(vec![4, 6], random(&[4, 6], -1.0, 1.0, 110)).unwrap());
        let bias = g.input(Tensor::new(vec![6], random(&[6], -0.5, 0.5, 111)).unwrap());
        g.layer_norm(x, gain, bias).unwrap()
    });
    grad_check(&shape, &random(&shape, -0.5, 0.5, 12), 12, TOL, |g, bias| {
        let x = g.input(Tensor::new(vec![4, 6], random(&[4, 6], -1.0, 1.0, 120)).unwrap());
        let gain = g.input(Tensor::new(vec![6], random(&[6], 0.5, 1.5, 121)).unwrap());
        g.layer_norm(x, gain, bias).unwrap()
    });
}

#[test]
fn grad_instance_norm() {
    let shape = [4, 3, 2];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 13), 13, TOL, |g, x| {
        let gain = g.input(Tensor::new(vec![2], random(&[2], 0.5, 1.5, 130)).unwrap());
        let bias = g.input(Tensor::new(vec![2], random(&[2], -0.5, 0.5, 131)).unwrap());
        g.instance_norm(x, gain, bias).unwrap()
    });
}

#[test]
fn grad_conv2d_input() {
    let shape = [5, 5, 2];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 14), 14, TOL, |g, x| {
        let kern = g.input(
            Tensor::new(vec![3, 3, 2, 3], random(&[3, 3, 2, 3], -0.5, 0.5, 140)).unwrap(),
        );
        g.conv2d(x, kern, 2, 1).unwrap()
    });
}

#[test]
fn grad_conv2d_kernel() {
    let shape = [3, 3, 2, 3];
    grad_check(&shape, &random(&shape, -0.5, 0.5, 15), 15, TOL, |g, kern| {
        let x = g.input(Tensor::new(vec![5, 5, 2], random(&[5, 5, 2], -1.0, 1.0, 150)).unwrap());
        g.conv2d(x, kern, 1, 1).unwrap()
    });
}

fn attn_vars(g: &mut Graph<f64>, c: usize, seed: u64) -> AttnVars {
    let mat = |g: &mut Graph<f64>, s: u64| {
        g.input(Tensor::new(vec![c, c], random(&[c, c], -0.4, 0.4, s)).unwrap())
    };
    let vecb = |g: &mut Graph<f64>, s: u64| {
        g.input(Tensor::new(vec![c], random(&[c], -0.1, 0.1, s)).unwrap())
    };
    AttnVars {
        wq: mat(g, seed),
        bq: vecb(g, seed + 1),
        wk: mat(g, seed + 2),
        bk: vecb(g, seed + 3),
        wv: mat(g, seed + 4),
        bv: vecb(g, seed + 5),
        wo: mat(g, seed + 6),
        bo: vecb(g, seed + 7),
    }
}

#[test]
fn grad_multi_head_attention_query() {
    let shape = [3, 4];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 16), 16, TOL, |g, q| {
        let kv = g.input(Tensor::new(vec![5, 4], random(&[5, 4], -1.0, 1.0, 160)).unwrap());
        let w = attn_vars(g, 4, 1600);
        multi_head_attention(g, q, kv, kv, &w, 2).unwrap()
    });
}

#[test]
fn grad_multi_head_attention_projection() {
    let shape = [4, 4];
    grad_check(&shape, &random(&shape, -0.4, 0.4, 17), 17, TOL, |g, wq| {
        let q = g.input(Tensor::new(vec![3, 4], random(&[3, 4], -1.0, 1.0, 170)).unwrap());
        let kv = g.input(Tensor::new(vec![2, 4], random(&[2, 4], -1.0, 1.0, 171)).unwrap());
        let mut w = attn_vars(g, 4, 1700);
        w.wq = wq;
        multi_head_attention(g, q, kv, kv, &w, 2).unwrap()
    });
}

#[test]
fn grad_feed_forward() {
    let shape = [3, 4];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 18), 18, TOL, |g, x| {
        let w = FfnVars {
            w1: g.input(Tensor::new(vec![4, 8], random(&[4, 8], -0.5, 0.5, 180)).unwrap()),
            b1: g.input(Tensor::new(vec![8], random(&[8], 0.05, 0.3, 181)).unwrap()),
            w2: g.input(Tensor::new(vec![8, 4], random(&[8, 4], -0.5, 0.5, 182)).unwrap()),
            b2: g.input(Tensor::new(vec![4], random(&[4], -0.3, 0.3, 183)).unwrap()),
        };
        feed_forward(g, x, &w).unwrap()
    });
}

#[test]
fn grad_bce_sum_and_mean() {
    let shape = [6];
    let target = Tensor::new(
        vec![6],
        vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0],
    )
    .unwrap();
    for &mean in &[false, true] {
        let t = target.clone();
        grad_check(&shape, &random(&shape, 0.15, 0.85, 19), 19, TOL, move |g, p| {
            let y = g.input(t.clone());
            let loss = g.bce(p, y, mean).unwrap();
            // loss is already scalar; wrap in reshape so the weighting
            // multiplies a single element
            g.reshape(loss, vec![1]).unwrap()
        });
    }
}

#[test]
fn grad_permute_reshape_slice_concat() {
    let shape = [2, 3, 4];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 20), 20, TOL, |g, x| {
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        let r = g.reshape(p, vec![4, 6]).unwrap();
        let a = g.slice_last(r, 0, 2).unwrap();
        let b = g.slice_last(r, 2, 4).unwrap();
        g.concat_last(&[b, a]).unwrap()
    });
}

#[test]
fn grad_grid_sample_source() {
    let shape = [4, 4, 2];
    grad_check(&shape, &random(&shape, 0.0, 1.0, 21), 21, TOL, |g, src| {
        // fractional coordinates away from pixel-grid breakpoints
        let map = g.input(Tensor::new(vec![3, 3, 2], random(&[3, 3, 2], 0.15, 0.85, 210)).unwrap());
        g.grid_sample(src, map).unwrap()
    });
}

#[test]
fn grad_grid_sample_map() {
    let shape = [3, 3, 2];
    grad_check(&shape, &random(&shape, 0.15, 0.85, 22), 22, 1e-3, |g, map| {
        let src = g.input(Tensor::new(vec![4, 4, 2], random(&[4, 4, 2], 0.0, 1.0, 220)).unwrap());
        g.grid_sample(src, map).unwrap()
    });
}

fn normalized_mask(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let mut mask = vec![0.0f64; h * w * 576];
    for px in 0..h * w {
        for k in 0..64 {
            let ws: Vec<f64> = (0..9).map(|_| rng.uniform::<f64>(0.05, 1.0)).collect();
            let sum: f64 = ws.iter().sum();
            for (uv, &wv) in ws.iter().enumerate() {
                mask[px * 576 + uv * 64 + k] = wv / sum;
            }
        }
    }
    mask
}

#[test]
fn grad_convex_upsample_coarse() {
    let shape = [2, 2, 2];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 23), 23, TOL, |g, coarse| {
        let mask = g.input(Tensor::new(vec![2, 2, 576], normalized_mask(2, 2, 230)).unwrap());
        g.convex_upsample(coarse, mask).unwrap()
    });
}

#[test]
fn grad_convex_upsample_mask() {
    let shape = [2, 2, 576];
    grad_check(&shape, &normalized_mask(2, 2, 24), 24, TOL, |g, mask| {
        let coarse = g.input(Tensor::new(vec![2, 2, 2], random(&[2, 2, 2], -1.0, 1.0, 240)).unwrap());
        g.convex_upsample(coarse, mask).unwrap()
    });
}

#[test]
fn grad_resize_bilinear_and_upsample() {
    let shape = [3, 4, 2];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 25), 25, TOL, |g, x| {
        let r = g.resize_bilinear(x, 5, 7).unwrap();
        g.upsample_nearest2x(r).unwrap()
    });
}

#[test]
fn grad_mean_all() {
    let shape = [3, 3];
    grad_check(&shape, &random(&shape, -1.0, 1.0, 26), 26, TOL, |g, x| {
        let m = g.mean_all(x);
        g.reshape(m, vec![1]).unwrap()
    });
}

#[test]
fn forward_is_deterministic_for_fixed_seed() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let mut rng = Rng::new(99);
        let mut x = Tensor::<f32>::zeros(vec![6, 8]);
        rng.fill_uniform(x.data_mut(), -1.0, 1.0);
        let x = g.input(x);
        let mut w = Tensor::<f32>::zeros(vec![8, 8]);
        rng.fill_uniform(w.data_mut(), -0.5, 0.5);
        let w = g.input(w);
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y, &[1]).unwrap();
        g.value(s).data().to_vec()
    };
    assert_eq!(run(), run());
}
