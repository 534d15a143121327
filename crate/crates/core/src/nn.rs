//! Shared model plumbing: parameter initialization, graph binding, and the
//! named-parameter conventions for attention/FFN/norm blocks.

use std::collections::HashMap;

use crate::checkpoint::{Checkpoint, ParamSet};
use crate::numerics::{AttnVars, FfnVars, Graph, Real, Rng, Tensor, Var};
use crate::{Error, Result};

/// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in). Uniform draws keep
/// initialization free of libm transcendentals.
pub fn conv_init<T: Real>(rng: &mut Rng, kh: usize, kw: usize, cin: usize, cout: usize) -> Tensor<T> {
    let fan_in = (kh * kw * cin).max(1);
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(vec![kh, kw, cin, cout]);
    rng.fill_uniform(t.data_mut(), -bound, bound);
    t
}

pub fn linear_init<T: Real>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut t = Tensor::zeros(vec![fan_in, fan_out]);
    rng.fill_uniform(t.data_mut(), -bound, bound);
    t
}

pub fn embedding_init<T: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<T> {
    embedding_init_scaled(rng, rows, cols, 1.0 / (cols as f64).sqrt())
}

/// Embedding init with an explicit bound; larger bounds give position
/// embeddings enough magnitude to break cross-attention symmetry early.
pub fn embedding_init_scaled<T: Real>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    bound: f64,
) -> Tensor<T> {
    let mut t = Tensor::zeros(vec![rows, cols]);
    rng.fill_uniform(t.data_mut(), -bound, bound);
    t
}

/// Registers a conv layer: `{prefix}.k` kernel and `{prefix}.b` bias.
pub fn add_conv<T: Real>(
    p: &mut ParamSet<T>,
    rng: &mut Rng,
    prefix: &str,
    kh: usize,
    kw: usize,
    cin: usize,
    cout: usize,
) -> Result<()> {
    p.add(format!("{prefix}.k"), conv_init(rng, kh, kw, cin, cout))?;
    p.add(format!("{prefix}.b"), Tensor::zeros(vec![cout]))
}

/// Registers an attention module under `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
pub fn add_attn<T: Real>(p: &mut ParamSet<T>, rng: &mut Rng, prefix: &str, c: usize) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        p.add(format!("{prefix}.{w}"), linear_init(rng, c, c))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        p.add(format!("{prefix}.{b}"), Tensor::zeros(vec![c]))?;
    }
    Ok(())
}

/// Registers an FFN under `{prefix}.{w1,b1,w2,b2}`.
pub fn add_ffn<T: Real>(
    p: &mut ParamSet<T>,
    rng: &mut Rng,
    prefix: &str,
    c: usize,
    hidden: usize,
) -> Result<()> {
    p.add(format!("{prefix}.w1"), linear_init(rng, c, hidden))?;
    p.add(format!("{prefix}.b1"), Tensor::zeros(vec![hidden]))?;
    p.add(format!("{prefix}.w2"), linear_init(rng, hidden, c))?;
    p.add(format!("{prefix}.b2"), Tensor::zeros(vec![c]))
}

/// Registers a norm affine: `{prefix}.g` (ones) and `{prefix}.b` (zeros).
pub fn add_norm<T: Real>(p: &mut ParamSet<T>, prefix: &str, c: usize) -> Result<()> {
    p.add(format!("{prefix}.g"), Tensor::full(vec![c], T::ONE))?;
    p.add(format!("{prefix}.b"), Tensor::zeros(vec![c]))
}

/// All parameters of a set bound into a graph, addressable by name.
pub struct Bound {
    map: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn v(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_v(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter {name:?} not bound")))
    }

    pub fn attn(&self, prefix: &str) -> AttnVars {
        AttnVars {
            wq: self.v(&format!("{prefix}.wq")),
            bq: self.v(&format!("{prefix}.bq")),
            wk: self.v(&format!("{prefix}.wk")),
            bk: self.v(&format!("{prefix}.bk")),
            wv: self.v(&format!("{prefix}.wv")),
            bv: self.v(&format!("{prefix}.bv")),
            wo: self.v(&format!("{prefix}.wo")),
            bo: self.v(&format!("{prefix}.bo")),
        }
    }

    pub fn ffn(&self, prefix: &str) -> FfnVars {
        FfnVars {
            w1: self.v(&format!("{prefix}.w1")),
            b1: self.v(&format!("{prefix}.b1")),
            w2: self.v(&format!("{prefix}.w2")),
            b2: self.v(&format!("{prefix}.b2")),
        }
    }

    /// conv + bias in one call.
    pub fn conv<T: Real>(
        &self,
        g: &mut Graph<T>,
        prefix: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = g.conv2d(x, self.v(&format!("{prefix}.k")), stride, pad)?;
        g.add_channels(y, self.v(&format!("{prefix}.b")))
    }

    /// layer norm with this prefix's affine.
    pub fn ln<T: Real>(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        g.layer_norm(x, self.v(&format!("{prefix}.g")), self.v(&format!("{prefix}.b")))
    }

    /// instance norm with this prefix's affine.
    pub fn inorm<T: Real>(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        g.instance_norm(x, self.v(&format!("{prefix}.g")), self.v(&format!("{prefix}.b")))
    }
}

/// Copies every parameter into the graph. `trainable` decides whether
/// backward tracks them.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Bound {
    let mut map = HashMap::with_capacity(params.len());
    let mut order = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        let v = if trainable {
            g.param(tensor.clone())
        } else {
            g.input(tensor.clone())
        };
        map.insert(name.to_string(), v);
        order.push(v);
    }
    Bound { map, order }
}

/// Gradients in parameter-set order, ready for the optimizer.
pub fn collect_grads<T: Real>(g: &Graph<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
    bound.order.iter().map(|&v| g.grad(v)).collect()
}

/// Copies `{prefix}.{name}` tensors from a checkpoint into an existing
/// parameter set, verifying shapes; errors name the offending tensor.
pub fn load_params<T: Real>(ckpt: &Checkpoint, prefix: &str, into: &mut ParamSet<T>) -> Result<()> {
    for i in 0..into.len() {
        let name = into.name_at(i).to_string();
        let full = format!("{prefix}.{name}");
        let src = ckpt
            .tensors
            .get(&full)
            .map_err(|_| Error::config(format!("checkpoint missing tensor {full:?}")))?;
        if src.shape() != into.tensor_at(i).shape() {
            return Err(Error::config(format!(
                "tensor {full}: checkpoint shape {:?} does not match expected {:?}",
                src.shape(),
                into.tensor_at(i).shape()
            )));
        }
        *into.tensor_at_mut(i) = src.cast();
    }
    Ok(())
}
