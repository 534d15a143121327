//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every forward operation eagerly as a node holding the
//! result value; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients into every node that (transitively) depends on a parameter.
//! Values are immutable once recorded; gradients live in `RefCell`s so the
//! backward pass can scatter into several parents without cloning values.

use std::cell::RefCell;

use crate::fields;
use crate::numerics::kernels as k;
use crate::numerics::tensor::strides_of;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddChannels(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftClamp01 { x: Var, delta: T },
    Abs(Var),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatLast(Vec<Var>),
    Softmax {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stash: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stash: Vec<T>,
    },
    Conv2d {
        x: Var,
        kern: Var,
        stride: usize,
        pad: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Bce {
        pred: Var,
        target: Var,
        mean: bool,
    },
    GridSample {
        src: Var,
        map: Var,
    },
    ConvexUpsample {
        coarse: Var,
        mask: Var,
    },
    ResizeBilinear(Var),
    UpsampleNearest2x(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: RefCell<Option<Tensor<T>>>,
    op: Op<T>,
    requires: bool,
}

/// Epsilon inside the layer/instance norm variance.
const NORM_EPS: f64 = 1e-6;
/// Confidence clamp for binary cross-entropy.
const BCE_EPS: f64 = 1e-7;

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
        self.nodes.push(Node {
            value,
            grad: RefCell::new(None),
            op,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    /// Records a constant input (no gradient tracked).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf: backward will accumulate its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Clone of the accumulated gradient, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.borrow().clone()
    }

    pub fn zero_grads(&self) {
        for n in &self.nodes {
            *n.grad.borrow_mut() = None;
        }
    }

    // -- elementwise ------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.binary(a, b, |x, y| x + y);
        Ok(self.push(data, Op::Add(a, b), self.requires(a) || self.requires(b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.binary(a, b, |x, y| x - y);
        Ok(self.push(data, Op::Sub(a, b), self.requires(a) || self.requires(b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.binary(a, b, |x, y| x * y);
        Ok(self.push(data, Op::Mul(a, b), self.requires(a) || self.requires(b)))
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("shape checked")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e * factor).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, factor), self.requires(x))
    }

    /// x[..., C] + bias[C], bias broadcast over all leading axes.
    pub fn add_channels(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        let c = *xs.last().ok_or_else(|| Error::dim("add_channels: rank-0 input"))?;
        if bs != [c] {
            return Err(Error::dim(format!(
                "add_channels: bias {:?} does not match channel extent {c}",
                bs
            )));
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xs, data).expect("same shape");
        Ok(self.push(
            t,
            Op::AddChannels(x, bias),
            self.requires(x) || self.requires(bias),
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e.maxv(T::ZERO)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x), self.requires(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v
            .data()
            .iter()
            .map(|&e| {
                if e >= T::ZERO {
                    T::ONE / (T::ONE + (-e).exp())
                } else {
                    let z = e.exp();
                    z / (T::ONE + z)
                }
            })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Sigmoid(x), self.requires(x))
    }

    /// Smooth squash onto (0, 1): identity on [delta, 1-delta] and
    /// exponential approach to the bounds outside. C1 and strictly monotone,
    /// so gradients never vanish exactly.
    pub fn softclamp01(&mut self, x: Var, delta: f64) -> Result<Var> {
        if !(0.0 < delta && delta < 0.5) {
            return Err(Error::arg(format!("softclamp01: delta {delta} outside (0, 0.5)")));
        }
        let d = T::from_f64(delta);
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| soft_clamp(e, d)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        Ok(self.push(t, Op::SoftClamp01 { x, delta: d }, self.requires(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| e.abs()).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Abs(x), self.requires(x))
    }

    // -- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 {
            return Err(Error::dim(format!(
                "matmul expects rank-2 operands, got {:?} and {:?}",
                ash, bsh
            )));
        }
        if ash[1] != bsh[0] {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, kk, n) = (ash[0], ash[1], bsh[1]);
        let mut out = Tensor::zeros(vec![m, n]);
        k::matmul_nn(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            out.data_mut(),
            m,
            kk,
            n,
        );
        Ok(self.push(out, Op::Matmul(a, b), self.requires(a) || self.requires(b)))
    }

    // -- shape manipulation -------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), self.requires(x)))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if order.len() != shape.len() || order.iter().any(|&d| d >= shape.len() || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::arg(format!(
                "permute order {:?} is not a permutation of axes of {:?}",
                order, shape
            )));
        }
        let out_shape: Vec<usize> = order.iter().map(|&d| shape[d]).collect();
        let mut out = Tensor::zeros(out_shape);
        k::permute(self.nodes[x.0].value.data(), &shape, order, out.data_mut());
        Ok(self.push(out, Op::Permute(x, order.to_vec()), self.requires(x)))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Columns [start, start+len) of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("slice_last: rank-0"))?;
        if start + len > c {
            return Err(Error::dim(format!(
                "slice_last [{start}, {}) out of extent {c}",
                start + len
            )));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let xv = self.nodes[x.0].value.data();
        let mut data = Vec::with_capacity(xv.len() / c * len);
        for row in xv.chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(out_shape, data).expect("computed shape");
        Ok(self.push(t, Op::SliceLast { x, start, len }, self.requires(x)))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat_last: empty part list"));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_last: leading extents differ"));
            }
            total += *s.last().unwrap();
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        let widths: Vec<usize> = parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                let pv = self.nodes[p.0].value.data();
                data.extend_from_slice(&pv[r * wd..(r + 1) * wd]);
            }
        }
        let mut out_shape = lead;
        out_shape.push(total);
        let t = Tensor::new(out_shape, data).expect("computed shape");
        let requires = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), requires))
    }

    // -- nonlinear blocks ---------------------------------------------------

    /// Softmax over the given axis set; sums to one per remaining index.
    pub fn softmax(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::arg("softmax: empty axis set"));
        }
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || std::mem::replace(&mut seen[a], true) {
                return Err(Error::arg(format!(
                    "softmax: invalid axis set {:?} for shape {:?}",
                    axes, shape
                )));
            }
        }
        let mut out = Tensor::zeros(shape.clone());
        k::softmax_fwd(self.nodes[x.0].value.data(), &shape, axes, out.data_mut());
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                axes: axes.to_vec(),
            },
            self.requires(x),
        ))
    }

    /// Per-position normalization over the last axis, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::dim("layer_norm: rank-0"))?;
        if c == 0 {
            return Err(Error::arg("layer_norm: zero channel extent"));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match channels {c}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let rows = shape.iter().product::<usize>() / c;
        let mut out = Tensor::zeros(shape.clone());
        let mut stash = Vec::new();
        k::norm_groups_fwd(
            self.nodes[x.0].value.data(),
            rows,
            c,
            1,
            |g| g * c,
            T::from_f64(NORM_EPS),
            out.data_mut(),
            &mut stash,
        );
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        for row in out.data_mut().chunks_mut(c) {
            for ((o, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let requires = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stash }, requires))
    }

    /// Per-channel normalization over the spatial extent of an HWC tensor.
    pub fn instance_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!("instance_norm expects HWC, got {:?}", shape)));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if c == 0 || h * w == 0 {
            return Err(Error::arg("instance_norm: empty input"));
        }
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::dim("instance_norm: gain/bias do not match channels"));
        }
        let mut out = Tensor::zeros(shape.clone());
        let mut stash = Vec::new();
        k::norm_groups_fwd(
            self.nodes[x.0].value.data(),
            c,
            h * w,
            c,
            |g| g,
            T::from_f64(NORM_EPS),
            out.data_mut(),
            &mut stash,
        );
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        for px in out.data_mut().chunks_mut(c) {
            for ((o, &g), &b) in px.iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let requires = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(out, Op::InstanceNorm { x, gain, bias, stash }, requires))
    }

    /// Cross-correlation of an HWC input with a [kh, kw, cin, cout] kernel,
    /// zero padding, square stride.
    pub fn conv2d(&mut self, x: Var, kern: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kern).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects HWC input and [kh,kw,cin,cout] kernel, got {:?} and {:?}",
                xs, ks
            )));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, kci, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::arg(format!("conv2d: even kernel extents {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: zero stride"));
        }
        if kci != cin {
            return Err(Error::dim(format!(
                "conv2d: kernel cin {kci} does not match input channels {cin}"
            )));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let oh = k::conv_out_extent(h, kh, stride, pad);
        let ow = k::conv_out_extent(w, kw, stride, pad);
        let mut out = Tensor::zeros(vec![oh, ow, cout]);
        k::conv2d_fwd(
            self.nodes[x.0].value.data(),
            h,
            w,
            cin,
            self.nodes[kern.0].value.data(),
            kh,
            kw,
            cout,
            stride,
            pad,
            out.data_mut(),
        );
        let requires = self.requires(x) || self.requires(kern);
        Ok(self.push(out, Op::Conv2d { x, kern, stride, pad }, requires))
    }

    // -- reductions and losses ----------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.nodes[x.0].value.data() {
            s += v;
        }
        self.push(Tensor::scalar(s), Op::SumAll(x), self.requires(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.numel();
        let mut s = T::ZERO;
        for &v in self.nodes[x.0].value.data() {
            s += v;
        }
        let m = s / T::from_f64(n as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x), self.requires(x))
    }

    /// Mean absolute difference (L1).
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    /// Binary cross-entropy of predicted confidences against {0,1} targets.
    /// Predictions are clamped to [eps, 1-eps]. `mean` selects the reduction.
    pub fn bce(&mut self, pred: Var, target: Var, mean: bool) -> Result<Var> {
        self.same_shape(pred, target, "bce")?;
        if self.requires(target) {
            return Err(Error::arg("bce: target must not require gradients"));
        }
        let eps = T::from_f64(BCE_EPS);
        let one = T::ONE;
        let pv = self.nodes[pred.0].value.data();
        let tv = self.nodes[target.0].value.data();
        let mut loss = T::ZERO;
        for (&p, &y) in pv.iter().zip(tv) {
            let pc = p.maxv(eps).minv(one - eps);
            loss += -(y * pc.ln() + (one - y) * (one - pc).ln());
        }
        if mean {
            loss = loss / T::from_f64(pv.len() as f64);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce { pred, target, mean },
            self.requires(pred),
        ))
    }

    // -- geometry ------------------------------------------------------------

    /// Differentiable bilinear warp: samples `src` (HWC) at the normalized
    /// coordinates of `map` (H'xW'x2, channel 0 horizontal).
    pub fn grid_sample(&mut self, src: Var, map: Var) -> Result<Var> {
        let ss = self.shape(src).to_vec();
        let ms = self.shape(map).to_vec();
        if ss.len() != 3 || ss[0] == 0 || ss[1] == 0 {
            return Err(Error::arg(format!("grid_sample: empty or non-HWC source {:?}", ss)));
        }
        if ms.len() != 3 || ms[2] != 2 {
            return Err(Error::dim(format!("grid_sample: map must be HxWx2, got {:?}", ms)));
        }
        let mut out = Tensor::zeros(vec![ms[0], ms[1], ss[2]]);
        fields::warp_kernel_fwd(
            self.nodes[src.0].value.data(),
            ss[0],
            ss[1],
            ss[2],
            self.nodes[map.0].value.data(),
            ms[0],
            ms[1],
            out.data_mut(),
        );
        let requires = self.requires(src) || self.requires(map);
        Ok(self.push(out, Op::GridSample { src, map }, requires))
    }

    /// Convex upsampling of a coarse field by 8x using per-pixel 3x3 weight
    /// masks (mask layout [h, w, 9*64], normalized over the 9 neighbors).
    pub fn convex_upsample(&mut self, coarse: Var, mask: Var) -> Result<Var> {
        let cs = self.shape(coarse).to_vec();
        let ms = self.shape(mask).to_vec();
        if cs.len() != 3 {
            return Err(Error::dim(format!("convex_upsample: coarse must be HWC, got {:?}", cs)));
        }
        if ms.len() != 3 || ms[0] != cs[0] || ms[1] != cs[1] || ms[2] != 9 * 64 {
            return Err(Error::dim(format!(
                "convex_upsample: mask must be {}x{}x576, got {:?}",
                cs[0], cs[1], ms
            )));
        }
        fields::check_mask_normalized(self.nodes[mask.0].value.data(), cs[0], cs[1])?;
        let mut out = Tensor::zeros(vec![8 * cs[0], 8 * cs[1], cs[2]]);
        fields::convex_upsample_kernel_fwd(
            self.nodes[coarse.0].value.data(),
            cs[0],
            cs[1],
            cs[2],
            self.nodes[mask.0].value.data(),
            out.data_mut(),
        );
        let requires = self.requires(coarse) || self.requires(mask);
        Ok(self.push(out, Op::ConvexUpsample { coarse, mask }, requires))
    }

    /// Bilinear resize of an HWC tensor (align-corners).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("resize_bilinear expects HWC, got {:?}", xs)));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::arg("resize_bilinear: zero output extent"));
        }
        let mut out = Tensor::zeros(vec![oh, ow, xs[2]]);
        k::resize_bilinear_fwd(
            self.nodes[x.0].value.data(),
            xs[0],
            xs[1],
            xs[2],
            oh,
            ow,
            out.data_mut(),
        );
        Ok(self.push(out, Op::ResizeBilinear(x), self.requires(x)))
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("upsample_nearest2x expects HWC, got {:?}", xs)));
        }
        let mut out = Tensor::zeros(vec![2 * xs[0], 2 * xs[1], xs[2]]);
        k::upsample_nearest2x_fwd(
            self.nodes[x.0].value.data(),
            xs[0],
            xs[1],
            xs[2],
            out.data_mut(),
        );
        Ok(self.push(out, Op::UpsampleNearest2x(x), self.requires(x)))
    }

    // -- backward -------------------------------------------------------------

    /// Gradient scratch slot for one backward pass; allocated on demand.
    fn scr<'a>(&self, scratch: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut [T] {
        let slot = &mut scratch[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        slot.as_mut().unwrap().data_mut()
    }

    fn scr_add(&self, scratch: &mut [Option<Tensor<T>>], v: Var, src: &[T], factor: T) {
        let g = self.scr(scratch, v);
        for (o, &s) in g.iter_mut().zip(src) {
            *o += s * factor;
        }
    }

    /// Accumulates dLoss/dLeaf into every parameter leaf reachable from
    /// `loss`. Intermediate gradients are per-call scratch; leaf gradients
    /// accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(Tensor::new(
            self.shape(loss).to_vec(),
            vec![T::ONE],
        )?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires {
                scratch[i] = None;
                continue;
            }
            let Some(gout) = scratch[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                let mut slot = node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => {
                        for (o, &g) in acc.data_mut().iter_mut().zip(gout.data()) {
                            *o += g;
                        }
                    }
                    None => *slot = Some(gout),
                }
                continue;
            }
            self.backprop_node(node, gout.data(), &mut scratch)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        gout: &[T],
        scratch: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(*a) {
                    self.scr_add(scratch, *a, gout, T::ONE);
                }
                if self.requires(*b) {
                    self.scr_add(scratch, *b, gout, T::ONE);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    self.scr_add(scratch, *a, gout, T::ONE);
                }
                if self.requires(*b) {
                    self.scr_add(scratch, *b, gout, -T::ONE);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let bv = val(*b);
                    {
                        let g = self.scr(scratch, *a);
                        for ((o, &gg), &b) in g.iter_mut().zip(gout).zip(bv) {
                            *o += gg * b;
                        }
                    }
                }
                if self.requires(*b) {
                    let av = val(*a);
                    {
                        let g = self.scr(scratch, *b);
                        for ((o, &gg), &a) in g.iter_mut().zip(gout).zip(av) {
                            *o += gg * a;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.requires(*x) {
                    self.scr_add(scratch, *x, gout, *f);
                }
            }
            Op::AddChannels(x, bias) => {
                if self.requires(*x) {
                    self.scr_add(scratch, *x, gout, T::ONE);
                }
                if self.requires(*bias) {
                    let c = self.nodes[bias.0].value.numel();
                    {
                        let g = self.scr(scratch, *bias);
                        for row in gout.chunks(c) {
                            for (o, &v) in g.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let xv = val(*x);
                    {
                        let g = self.scr(scratch, *x);
                        for ((o, &gg), &xi) in g.iter_mut().zip(gout).zip(xv) {
                            if xi > T::ZERO {
                                *o += gg;
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let s = node.value.data();
                    {
                        let g = self.scr(scratch, *x);
                        for ((o, &gg), &si) in g.iter_mut().zip(gout).zip(s) {
                            *o += gg * si * (T::ONE - si);
                        }
                    }
                }
            }
            Op::SoftClamp01 { x, delta } => {
                if self.requires(*x) {
                    let xv = val(*x);
                    let d = *delta;
                    {
                        let g = self.scr(scratch, *x);
                        for ((o, &gg), &xi) in g.iter_mut().zip(gout).zip(xv) {
                            *o += gg * soft_clamp_deriv(xi, d);
                        }
                    }
                }
            }
            Op::Abs(x) => {
                if self.requires(*x) {
                    let xv = val(*x);
                    {
                        let g = self.scr(scratch, *x);
                        for ((o, &gg), &xi) in g.iter_mut().zip(gout).zip(xv) {
                            if xi > T::ZERO {
                                *o += gg;
                            } else if xi < T::ZERO {
                                *o -= gg;
                            }
                        }
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, kk) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    // dA[m,k] = G[m,n] * B[k,n]^T
                    let bv = val(*b);
                    let mut tmp = vec![T::ZERO; m * kk];
                    k::matmul_nt(gout, bv, &mut tmp, m, n, kk);
                    self.scr_add(scratch, *a, &tmp, T::ONE);
                }
                if self.requires(*b) {
                    // dB += A^T * G
                    let av = val(*a);
                    {
                        let g = self.scr(scratch, *b);
                        k::matmul_tn_acc(av, gout, g, m, kk, n);
                    }
                }
            }
            Op::Permute(x, order) => {
                if self.requires(*x) {
                    let out_shape = node.value.shape().to_vec();
                    let inv = k::inverse_order(order);
                    let mut tmp = vec![T::ZERO; gout.len()];
                    k::permute(gout, &out_shape, &inv, &mut tmp);
                    self.scr_add(scratch, *x, &tmp, T::ONE);
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    self.scr_add(scratch, *x, gout, T::ONE);
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.requires(*x) {
                    let c = *self.shape(*x).last().unwrap();
                    {
                        let g = self.scr(scratch, *x);
                        for (row, grow) in g.chunks_mut(c).zip(gout.chunks(*len)) {
                            for (o, &v) in row[*start..start + len].iter_mut().zip(grow) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let mut offset = 0usize;
                for &p in parts {
                    let wd = *self.shape(p).last().unwrap();
                    if self.requires(p) {
                        {
                            let g = self.scr(scratch, p);
                            for (row, grow) in g.chunks_mut(wd).zip(gout.chunks(total)) {
                                for (o, &v) in row.iter_mut().zip(&grow[offset..offset + wd]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                    offset += wd;
                }
            }
            Op::Softmax { x, axes } => {
                if self.requires(*x) {
                    let shape = node.value.shape().to_vec();
                    {
                        let g = self.scr(scratch, *x);
                        k::softmax_bwd(node.value.data(), &shape, axes, gout, g);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stash } => {
                let shape = self.shape(*x).to_vec();
                let c = *shape.last().unwrap();
                let rows = shape.iter().product::<usize>() / c;
                let xv = val(*x);
                let gv = val(*gain);
                if self.requires(*gain) || self.requires(*bias) {
                    let mut dg = vec![T::ZERO; c];
                    let mut db = vec![T::ZERO; c];
                    for r in 0..rows {
                        let mean = stash[2 * r];
                        let inv = stash[2 * r + 1];
                        for j in 0..c {
                            let idx = r * c + j;
                            let xhat = (xv[idx] - mean) * inv;
                            dg[j] += gout[idx] * xhat;
                            db[j] += gout[idx];
                        }
                    }
                    if self.requires(*gain) {
                        self.scr_add(scratch, *gain, &dg, T::ONE);
                    }
                    if self.requires(*bias) {
                        self.scr_add(scratch, *bias, &db, T::ONE);
                    }
                }
                if self.requires(*x) {
                    let mut dxhat = vec![T::ZERO; gout.len()];
                    for r in 0..rows {
                        for j in 0..c {
                            dxhat[r * c + j] = gout[r * c + j] * gv[j];
                        }
                    }
                    {
                        let g = self.scr(scratch, *x);
                        k::norm_groups_bwd(xv, rows, c, 1, |r| r * c, stash, &dxhat, g);
                    }
                }
            }
            Op::InstanceNorm { x, gain, bias, stash } => {
                let shape = self.shape(*x).to_vec();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let xv = val(*x);
                let gv = val(*gain);
                if self.requires(*gain) || self.requires(*bias) {
                    let mut dg = vec![T::ZERO; c];
                    let mut db = vec![T::ZERO; c];
                    for i in 0..h * w {
                        for ch in 0..c {
                            let idx = i * c + ch;
                            let xhat = (xv[idx] - stash[2 * ch]) * stash[2 * ch + 1];
                            dg[ch] += gout[idx] * xhat;
                            db[ch] += gout[idx];
                        }
                    }
                    if self.requires(*gain) {
                        self.scr_add(scratch, *gain, &dg, T::ONE);
                    }
                    if self.requires(*bias) {
                        self.scr_add(scratch, *bias, &db, T::ONE);
                    }
                }
                if self.requires(*x) {
                    let mut dxhat = vec![T::ZERO; gout.len()];
                    for i in 0..h * w {
                        for ch in 0..c {
                            dxhat[i * c + ch] = gout[i * c + ch] * gv[ch];
                        }
                    }
                    {
                        let g = self.scr(scratch, *x);
                        k::norm_groups_bwd(xv, c, h * w, c, |ch| ch, stash, &dxhat, g);
                    }
                }
            }
            Op::Conv2d { x, kern, stride, pad } => {
                let xs = self.shape(*x).to_vec();
                let ks = self.shape(*kern).to_vec();
                let xv = val(*x);
                let kv = val(*kern);
                let need_dx = self.requires(*x);
                let need_dk = self.requires(*kern);
                let mut dx = if need_dx { Some(vec![T::ZERO; xv.len()]) } else { None };
                let mut dk = if need_dk { Some(vec![T::ZERO; kv.len()]) } else { None };
                k::conv2d_bwd(
                    xv,
                    xs[0],
                    xs[1],
                    xs[2],
                    kv,
                    ks[0],
                    ks[1],
                    ks[3],
                    *stride,
                    *pad,
                    gout,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.scr_add(scratch, *x, &dx, T::ONE);
                }
                if let Some(dk) = dk {
                    self.scr_add(scratch, *kern, &dk, T::ONE);
                }
            }
            Op::SumAll(x) => {
                if self.requires(*x) {
                    let g = gout[0];
                    {
                        let gr = self.scr(scratch, *x);
                        for o in gr.iter_mut() {
                            *o += g;
                        }
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.requires(*x) {
                    let n = self.nodes[x.0].value.numel();
                    let g = gout[0] / T::from_f64(n as f64);
                    {
                        let gr = self.scr(scratch, *x);
                        for o in gr.iter_mut() {
                            *o += g;
                        }
                    }
                }
            }
            Op::Bce { pred, target, mean } => {
                if self.requires(*pred) {
                    let eps = T::from_f64(BCE_EPS);
                    let one = T::ONE;
                    let pv = val(*pred);
                    let tv = val(*target);
                    let scale = if *mean {
                        gout[0] / T::from_f64(pv.len() as f64)
                    } else {
                        gout[0]
                    };
                    {
                        let g = self.scr(scratch, *pred);
                        for ((o, &p), &y) in g.iter_mut().zip(pv).zip(tv) {
                            // zero gradient where the clamp is active
                            if p >= eps && p <= one - eps {
                                *o += scale * (p - y) / (p * (one - p));
                            }
                        }
                    }
                }
            }
            Op::GridSample { src, map } => {
                let ss = self.shape(*src).to_vec();
                let ms = self.shape(*map).to_vec();
                let sv = val(*src);
                let mv = val(*map);
                let need_src = self.requires(*src);
                let need_map = self.requires(*map);
                let mut dsrc = if need_src { Some(vec![T::ZERO; sv.len()]) } else { None };
                let mut dmap = if need_map { Some(vec![T::ZERO; mv.len()]) } else { None };
                fields::warp_kernel_bwd(
                    sv,
                    ss[0],
                    ss[1],
                    ss[2],
                    mv,
                    ms[0],
                    ms[1],
                    gout,
                    dsrc.as_deref_mut(),
                    dmap.as_deref_mut(),
                );
                if let Some(d) = dsrc {
                    self.scr_add(scratch, *src, &d, T::ONE);
                }
                if let Some(d) = dmap {
                    self.scr_add(scratch, *map, &d, T::ONE);
                }
            }
            Op::ConvexUpsample { coarse, mask } => {
                let cs = self.shape(*coarse).to_vec();
                let cv = val(*coarse);
                let mv = val(*mask);
                let need_dc = self.requires(*coarse);
                let need_dm = self.requires(*mask);
                let mut dc = if need_dc { Some(vec![T::ZERO; cv.len()]) } else { None };
                let mut dm = if need_dm { Some(vec![T::ZERO; mv.len()]) } else { None };
                fields::convex_upsample_kernel_bwd(
                    cv,
                    cs[0],
                    cs[1],
                    cs[2],
                    mv,
                    gout,
                    dc.as_deref_mut(),
                    dm.as_deref_mut(),
                );
                if let Some(d) = dc {
                    self.scr_add(scratch, *coarse, &d, T::ONE);
                }
                if let Some(d) = dm {
                    self.scr_add(scratch, *mask, &d, T::ONE);
                }
            }
            Op::ResizeBilinear(x) => {
                if self.requires(*x) {
                    let xs = self.shape(*x).to_vec();
                    let os = node.value.shape().to_vec();
                    {
                        let g = self.scr(scratch, *x);
                        k::resize_bilinear_bwd(gout, xs[0], xs[1], xs[2], os[0], os[1], g);
                    }
                }
            }
            Op::UpsampleNearest2x(x) => {
                if self.requires(*x) {
                    let xs = self.shape(*x).to_vec();
                    {
                        let g = self.scr(scratch, *x);
                        k::upsample_nearest2x_bwd(gout, xs[0], xs[1], xs[2], g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Identity on [delta, 1-delta], exponential approach to 0 and 1 outside.
#[inline]
fn soft_clamp<T: Real>(x: T, delta: T) -> T {
    if x < delta {
        delta * ((x - delta) / delta).exp()
    } else if x > T::ONE - delta {
        T::ONE - delta * (-(x - (T::ONE - delta)) / delta).exp()
    } else {
        x
    }
}

#[inline]
fn soft_clamp_deriv<T: Real>(x: T, delta: T) -> T {
    if x < delta {
        ((x - delta) / delta).exp()
    } else if x > T::ONE - delta {
        (-(x - (T::ONE - delta)) / delta).exp()
    } else {
        T::ONE
    }
}

/// Row-major strides of a var's shape; convenience for tests.
pub fn shape_strides(shape: &[usize]) -> Vec<usize> {
    strides_of(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn t<T: Real>(shape: &[usize], data: &[f64]) -> Tensor<T> {
        Tensor::new(shape.to_vec(), data.iter().map(|&v| T::from_f64(v)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::<f64>::new();
        let eye = g.input(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let x = g.input(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn matmul_one_by_one() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1, 1], &[2.0]));
        let b = g.input(t(&[1, 1], &[3.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let (m, kk, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * kk).map(|_| rng.uniform::<f64>(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..kk * n).map(|_| rng.uniform::<f64>(-1.0, 1.0)).collect();
        let mut expect = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..kk {
                    expect[i * n + j] += a[i * kk + p] * b[p * n + j];
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let av = g.input(Tensor::new(vec![m, kk], a).unwrap());
        let bv = g.input(Tensor::new(vec![kk, n], b).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![4, 2]));
        assert!(matches!(g.matmul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn softmax_constant_input_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![9], 3.7));
        let s = g.softmax(x, &[0]).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logit_is_one_hot() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[4], &[1000.0, 0.0, 0.0, 0.0]));
        let s = g.softmax(x, &[0]).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1..].iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = Rng::new(3);
        let data: Vec<f64> = (0..9).map(|_| rng.uniform::<f64>(-2.0, 2.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![3, 3], data.clone()).unwrap());
        let s = g.softmax(x, &[1]).unwrap();
        for r in 0..3 {
            let row = &data[r * 3..(r + 1) * 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for c in 0..3 {
                let want = row[c].exp() / z;
                let got = g.value(s).data()[r * 3 + c];
                assert!((got - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_over_axes() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.uniform::<f64>(-5.0, 5.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![2, 3, 4], data).unwrap());
        let s = g.softmax(x, &[0, 2]).unwrap();
        let sv = g.value(s).data();
        for mid in 0..3 {
            let mut sum = 0.0;
            for a in 0..2 {
                for b in 0..4 {
                    sum += sv[a * 12 + mid * 4 + b];
                }
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_empty_axis_set_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![3]));
        assert!(matches!(g.softmax(x, &[]), Err(Error::Arg(_))));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1, 5], 4.2));
        let gain = g.input(Tensor::full(vec![5], 1.0));
        let bias = g.input(Tensor::zeros(vec![5]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_points() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], &[1.0, 3.0]));
        let gain = g.input(Tensor::full(vec![2], 1.0));
        let bias = g.input(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5);
        assert!((d[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_zero_channels_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2, 0]));
        let gain = g.input(Tensor::zeros(vec![0]));
        let bias = g.input(Tensor::zeros(vec![0]));
        assert!(matches!(g.layer_norm(x, gain, bias), Err(Error::Arg(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Arg(_))));
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn conv2d_one_by_one_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let kern = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, kern, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv2d_averaging_kernel_on_constant_image() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![4, 4, 1], 6.0));
        let kern = g.input(Tensor::full(vec![3, 3, 1, 1], 1.0 / 9.0));
        let y = g.conv2d(x, kern, 1, 1).unwrap();
        let d = g.value(y).data();
        // interior keeps the constant
        assert!((d[5] - 6.0).abs() < 1e-12);
        // corner sees 4 of 9 taps
        assert!((d[0] - 6.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut rng = Rng::new(21);
        let (h, w, cin, cout, kh, kw, stride, pad) = (5, 5, 2, 3, 3, 3, 2, 1);
        let x: Vec<f64> = (0..h * w * cin).map(|_| rng.uniform::<f64>(-1.0, 1.0)).collect();
        let kern: Vec<f64> = (0..kh * kw * cin * cout)
            .map(|_| rng.uniform::<f64>(-1.0, 1.0))
            .collect();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut expect = vec![0.0f64; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x[(y as usize * w + xx as usize) * cin + ci]
                                    * kern[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    expect[(oy * ow + ox) * cout + co] = s;
                }
            }
        }
        let mut g = Graph::<f64>::new();
        let xv = g.input(Tensor::new(vec![h, w, cin], x).unwrap());
        let kv = g.input(Tensor::new(vec![kh, kw, cin, cout], kern).unwrap());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        for (got, want) in g.value(y).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_kernel_larger_than_padded_input_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2, 2, 1]));
        let kern = g.input(Tensor::zeros(vec![5, 5, 1, 1]));
        assert!(matches!(g.conv2d(x, kern, 1, 0), Err(Error::Dim(_))));
    }

    #[test]
    fn slice_concat_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = g.slice_last(x, 0, 2).unwrap();
        let b = g.slice_last(x, 2, 2).unwrap();
        let y = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }
}
