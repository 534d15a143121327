//! Multi-head attention and the feed-forward block, composed from graph ops
//! so gradients come for free.

use crate::numerics::{Graph, Real, Var};
use crate::{Error, Result};

/// Projection variables for one attention module: four c x c matrices with
/// biases (query, key, value, output).
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Two affine layers with a ReLU between: c -> hidden -> c.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Scaled dot-product attention with `heads` heads of width c/heads each,
/// heads concatenated and output-projected back to c.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    w: &AttnVars,
    heads: usize,
) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::dim("attention inputs must be rank-2 (N x c)"));
    }
    let c = qs[1];
    if ks[1] != c || vs[1] != c || ks[0] != vs[0] {
        return Err(Error::dim(format!(
            "attention extents disagree: q {:?}, k {:?}, v {:?}",
            qs, ks, vs
        )));
    }
    if qs[0] == 0 || ks[0] == 0 {
        return Err(Error::arg("attention needs at least one query and one key"));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::config(format!(
            "channel extent {c} not divisible by {heads} heads"
        )));
    }
    let cw = c / heads;
    let qp = g.matmul(q, w.wq)?;
    let qp = g.add_channels(qp, w.bq)?;
    let kp = g.matmul(k, w.wk)?;
    let kp = g.add_channels(kp, w.bk)?;
    let vp = g.matmul(v, w.wv)?;
    let vp = g.add_channels(vp, w.bv)?;
    let scale = T::from_f64(1.0 / (cw as f64).sqrt());
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_last(qp, h * cw, cw)?;
        let kh = g.slice_last(kp, h * cw, cw)?;
        let vh = g.slice_last(vp, h * cw, cw)?;
        let kt = g.transpose2(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores, &[1])?;
        head_outs.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_last(&head_outs)?;
    let out = g.matmul(cat, w.wo)?;
    g.add_channels(out, w.bo)
}

pub fn feed_forward<T: Real>(g: &mut Graph<T>, x: Var, w: &FfnVars) -> Result<Var> {
    let c = *g
        .shape(x)
        .last()
        .ok_or_else(|| Error::dim("feed_forward: rank-0 input"))?;
    let w1s = g.shape(w.w1).to_vec();
    let w2s = g.shape(w.w2).to_vec();
    if w1s.len() != 2 || w2s.len() != 2 || w1s[0] != c || w2s[1] != c || w1s[1] != w2s[0] {
        return Err(Error::dim(format!(
            "feed_forward weights {:?}/{:?} do not map {c} -> hidden -> {c}",
            w1s, w2s
        )));
    }
    let h = g.matmul(x, w.w1)?;
    let h = g.add_channels(h, w.b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, w.w2)?;
    g.add_channels(out, w.b2)
}
