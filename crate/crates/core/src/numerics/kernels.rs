//! Raw compute kernels shared by the graph forward and backward passes.
//!
//! All kernels are deterministic: parallel variants split work into
//! independent output rows whose inner accumulation order is fixed, so
//! results are bit-identical for any thread count.

use crate::numerics::tensor::strides_of;
use crate::numerics::Real;
use rayon::prelude::*;

/// Below this many multiply-adds the parallel dispatch overhead dominates.
const PAR_WORK: usize = 1 << 18;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        orow.fill(T::ZERO);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T  (rows of b are dotted against rows of a)
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, orow: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s += av * bv;
            }
            *o = s;
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]  (accumulates into out)
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d (HWC layout, kernel [kh, kw, cin, cout], zero padding)
// ---------------------------------------------------------------------------

pub fn conv_out_extent(inp: usize, k: usize, stride: usize, pad: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kern: &[T],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(out.len(), oh * ow * cout);
    let row = |oy: usize, orow: &mut [T]| {
        orow.fill(T::ZERO);
        for ox in 0..ow {
            let opx = &mut orow[ox * cout..(ox + 1) * cout];
            for ky in 0..kh {
                let y = (oy * stride + ky) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = (ox * stride + kx) as isize - pad as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xpx = &x[((y as usize * w + xx as usize) * cin)..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &xv) in xpx.iter().enumerate() {
                        let krow = &kern[kbase + ci * cout..][..cout];
                        for (o, &kv) in opx.iter_mut().zip(krow.iter()) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    };
    if oh * ow * cout * kh * kw * cin >= PAR_WORK && oh > 1 {
        out.par_chunks_mut(ow * cout)
            .enumerate()
            .for_each(|(oy, r)| row(oy, r));
    } else {
        for (oy, r) in out.chunks_mut(ow * cout).enumerate() {
            row(oy, r);
        }
    }
}

/// Accumulates input and kernel gradients. Serial: the input scatter can
/// collide across output rows.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    cin: usize,
    kern: &[T],
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    dout: &[T],
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let mut dx = dx;
    let mut dk = dk;
    for oy in 0..oh {
        for ox in 0..ow {
            let dpx = &dout[(oy * ow + ox) * cout..][..cout];
            for ky in 0..kh {
                let y = (oy * stride + ky) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let xx = (ox * stride + kx) as isize - pad as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let pix = (y as usize * w + xx as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    if let Some(dk) = dk.as_deref_mut() {
                        let xpx = &x[pix..pix + cin];
                        for (ci, &xv) in xpx.iter().enumerate() {
                            let dkrow = &mut dk[kbase + ci * cout..][..cout];
                            for (d, &g) in dkrow.iter_mut().zip(dpx.iter()) {
                                *d += xv * g;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for ci in 0..cin {
                            let krow = &kern[kbase + ci * cout..][..cout];
                            let mut s = T::ZERO;
                            for (&kv, &g) in krow.iter().zip(dpx.iter()) {
                                s += kv * g;
                            }
                            dx[pix + ci] += s;
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// softmax over an arbitrary axis set
// ---------------------------------------------------------------------------

/// Offsets of the subspace spanned by `axes` and of its complement, such that
/// every element index decomposes uniquely as `comp + axis`.
pub fn subspace_offsets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let strides = strides_of(shape);
    let expand = |dims: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        let mut offsets = vec![0usize];
        for d in dims {
            let mut next = Vec::with_capacity(offsets.len() * shape[d]);
            for &o in &offsets {
                for i in 0..shape[d] {
                    next.push(o + i * strides[d]);
                }
            }
            offsets = next;
        }
        offsets
    };
    let axis = expand(&mut axes.iter().copied());
    let comp = expand(&mut (0..shape.len()).filter(|d| !axes.contains(d)));
    (comp, axis)
}

pub fn softmax_fwd<T: Real>(x: &[T], shape: &[usize], axes: &[usize], out: &mut [T]) {
    let (comp, axis) = subspace_offsets(shape, axes);
    for &base in &comp {
        let mut mx = x[base + axis[0]];
        for &a in &axis[1..] {
            mx = mx.maxv(x[base + a]);
        }
        let mut sum = T::ZERO;
        for &a in &axis {
            let e = (x[base + a] - mx).exp();
            out[base + a] = e;
            sum += e;
        }
        let inv = T::ONE / sum;
        for &a in &axis {
            out[base + a] *= inv;
        }
    }
}

/// dx += s * (dy - sum(dy * s)) per group, where s is the forward output.
pub fn softmax_bwd<T: Real>(s: &[T], shape: &[usize], axes: &[usize], dy: &[T], dx: &mut [T]) {
    let (comp, axis) = subspace_offsets(shape, axes);
    for &base in &comp {
        let mut dot = T::ZERO;
        for &a in &axis {
            dot += dy[base + a] * s[base + a];
        }
        for &a in &axis {
            dx[base + a] += s[base + a] * (dy[base + a] - dot);
        }
    }
}

// ---------------------------------------------------------------------------
// normalization (population variance, epsilon inside the square root)
// ---------------------------------------------------------------------------

/// Normalizes each length-`c` row to zero mean, unit variance, then applies
/// the per-channel affine. Stashes (mean, inv_std) per row for backward.
pub fn norm_groups_fwd<T: Real>(
    x: &[T],
    groups: usize,
    len: usize,
    stride: usize,
    group_base: impl Fn(usize) -> usize,
    eps: T,
    out: &mut [T],
    stash: &mut Vec<T>,
) {
    stash.clear();
    stash.reserve(2 * groups);
    let inv_len = T::ONE / T::from_f64(len as f64);
    for g in 0..groups {
        let base = group_base(g);
        let mut mean = T::ZERO;
        for i in 0..len {
            mean += x[base + i * stride];
        }
        mean *= inv_len;
        let mut var = T::ZERO;
        for i in 0..len {
            let d = x[base + i * stride] - mean;
            var += d * d;
        }
        var *= inv_len;
        let inv = T::ONE / (var + eps).sqrt();
        stash.push(mean);
        stash.push(inv);
        for i in 0..len {
            out[base + i * stride] = (x[base + i * stride] - mean) * inv;
        }
    }
}

/// Backward of the normalization itself (before affine):
/// dx += inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
#[allow(clippy::too_many_arguments)]
pub fn norm_groups_bwd<T: Real>(
    x: &[T],
    groups: usize,
    len: usize,
    stride: usize,
    group_base: impl Fn(usize) -> usize,
    stash: &[T],
    dxhat: &[T],
    dx: &mut [T],
) {
    let inv_len = T::ONE / T::from_f64(len as f64);
    for g in 0..groups {
        let base = group_base(g);
        let mean = stash[2 * g];
        let inv = stash[2 * g + 1];
        let mut mh = T::ZERO;
        let mut mxh = T::ZERO;
        for i in 0..len {
            let idx = base + i * stride;
            let xhat = (x[idx] - mean) * inv;
            mh += dxhat[idx];
            mxh += dxhat[idx] * xhat;
        }
        mh *= inv_len;
        mxh *= inv_len;
        for i in 0..len {
            let idx = base + i * stride;
            let xhat = (x[idx] - mean) * inv;
            dx[idx] += inv * (dxhat[idx] - mh - xhat * mxh);
        }
    }
}

// ---------------------------------------------------------------------------
// axis permutation (gather)
// ---------------------------------------------------------------------------

/// out = x with axes reordered so that out axis d is input axis order[d].
pub fn permute<T: Real>(x: &[T], shape: &[usize], order: &[usize], out: &mut [T]) {
    debug_assert_eq!(out.len(), x.len());
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = order.iter().map(|&d| shape[d]).collect();
    let rank = order.len();
    if rank == 0 {
        out[0] = x[0];
        return;
    }
    let gather_strides: Vec<usize> = order.iter().map(|&d| in_strides[d]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += gather_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_shape[d] * gather_strides[d];
            idx[d] = 0;
        }
    }
}

/// Inverse of a permutation.
pub fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; order.len()];
    for (d, &o) in order.iter().enumerate() {
        inv[o] = d;
    }
    inv
}

// ---------------------------------------------------------------------------
// bilinear resize (HWC, align-corners: linear fields resize exactly)
// ---------------------------------------------------------------------------

fn resize_axis_coord(out_i: usize, out_n: usize, in_n: usize) -> (usize, usize, f64) {
    if out_n <= 1 || in_n <= 1 {
        return (0, 0, 0.0);
    }
    let pos = out_i as f64 * (in_n - 1) as f64 / (out_n - 1) as f64;
    let i0 = pos.floor() as usize;
    let i0 = i0.min(in_n - 1);
    let i1 = (i0 + 1).min(in_n - 1);
    (i0, i1, pos - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn resize_bilinear_fwd<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    for oy in 0..oh {
        let (y0, y1, fy) = resize_axis_coord(oy, oh, h);
        let fy = T::from_f64(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_axis_coord(ox, ow, w);
            let fx = T::from_f64(fx);
            let p00 = (y0 * w + x0) * c;
            let p01 = (y0 * w + x1) * c;
            let p10 = (y1 * w + x0) * c;
            let p11 = (y1 * w + x1) * c;
            let o = (oy * ow + ox) * c;
            for ch in 0..c {
                let top = x[p00 + ch] + (x[p01 + ch] - x[p00 + ch]) * fx;
                let bot = x[p10 + ch] + (x[p11 + ch] - x[p10 + ch]) * fx;
                out[o + ch] = top + (bot - top) * fy;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn resize_bilinear_bwd<T: Real>(
    dy: &[T],
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    for oy in 0..oh {
        let (y0, y1, fy) = resize_axis_coord(oy, oh, h);
        let fy = T::from_f64(fy);
        for ox in 0..ow {
            let (x0, x1, fx) = resize_axis_coord(ox, ow, w);
            let fx = T::from_f64(fx);
            let o = (oy * ow + ox) * c;
            let w00 = (T::ONE - fy) * (T::ONE - fx);
            let w01 = (T::ONE - fy) * fx;
            let w10 = fy * (T::ONE - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let g = dy[o + ch];
                dx[(y0 * w + x0) * c + ch] += w00 * g;
                dx[(y0 * w + x1) * c + ch] += w01 * g;
                dx[(y1 * w + x0) * c + ch] += w10 * g;
                dx[(y1 * w + x1) * c + ch] += w11 * g;
            }
        }
    }
}

pub fn upsample_nearest2x_fwd<T: Real>(x: &[T], h: usize, w: usize, c: usize, out: &mut [T]) {
    for y in 0..2 * h {
        for x_ in 0..2 * w {
            let src = ((y / 2) * w + x_ / 2) * c;
            let dst = (y * 2 * w + x_) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
}

pub fn upsample_nearest2x_bwd<T: Real>(dy: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    for y in 0..2 * h {
        for x_ in 0..2 * w {
            let src = ((y / 2) * w + x_ / 2) * c;
            let dst = (y * 2 * w + x_) * c;
            for ch in 0..c {
                dx[src + ch] += dy[dst + ch];
            }
        }
    }
}
