//! Backward mapping fields and the geometric resampling kernels.
//!
//! A backward map assigns every output pixel a source coordinate to sample
//! from. Coordinates are **normalized**: u, v in [0, 1] span the full source
//! extent, so a map is resolution independent and resizing it never rescales
//! values. Out-of-range coordinates clamp to the source rectangle at warp
//! time.

use std::fs;
use std::path::Path;

use crate::image::Image;
use crate::numerics::kernels::resize_bilinear_fwd;
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

/// Sampling coordinates within this many pixels of the grid snap onto it, so
/// maps that went through f32 rounding still reproduce exact-pixel warps.
const COORD_SNAP: f64 = 1e-3;

/// Per-pixel source-coordinate field. Stored as interleaved (u, v) pairs,
/// row-major; u is horizontal, v vertical, both normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl BackwardMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::dim(format!(
                "backward map {height}x{width} needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("backward map contains non-finite values"));
        }
        Ok(BackwardMap {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    /// Interleaved (u, v) pairs, row-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn u(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 2]
    }
    #[inline]
    pub fn v(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 2 + 1]
    }
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, u: f32, v: f32) {
        let i = (y * self.width + x) * 2;
        self.data[i] = u;
        self.data[i + 1] = v;
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.height, self.width, 2],
            self.data.iter().map(|&v| T::from_f32(v)).collect(),
        )
        .expect("consistent extents")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 2 {
            return Err(Error::dim(format!("map tensor must be HxWx2, got {:?}", s)));
        }
        BackwardMap::new(s[0], s[1], t.data().iter().map(|v| v.to_f32()).collect())
    }
}

/// The map that reproduces its input: u(x, y) = x/(W-1), v(x, y) = y/(H-1).
/// A single row or column maps to coordinate 0.
pub fn identity_map(height: usize, width: usize) -> BackwardMap {
    let mut data = Vec::with_capacity(height * width * 2);
    for y in 0..height {
        let v = if height > 1 {
            (y as f64 / (height - 1) as f64) as f32
        } else {
            0.0
        };
        for x in 0..width {
            let u = if width > 1 {
                (x as f64 / (width - 1) as f64) as f32
            } else {
                0.0
            };
            data.push(u);
            data.push(v);
        }
    }
    BackwardMap::new(height, width, data).expect("consistent extents")
}

/// Bilinear resize of the coordinate fields. Normalized values are
/// resolution independent, so no value rescaling happens.
pub fn resize_map(map: &BackwardMap, height: usize, width: usize) -> Result<BackwardMap> {
    if height == 0 || width == 0 {
        return Err(Error::arg("resize_map: zero output extent"));
    }
    if height == map.height && width == map.width {
        return Ok(map.clone());
    }
    let mut out = vec![0.0f32; height * width * 2];
    resize_bilinear_fwd(&map.data, map.height, map.width, 2, height, width, &mut out);
    BackwardMap::new(height, width, out)
}

// ---------------------------------------------------------------------------
// bilinear sampling and warping
// ---------------------------------------------------------------------------

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < COORD_SNAP {
        r
    } else {
        x
    }
}

/// Clamped 4-neighbor bilinear sample at pixel coordinates (x, y).
/// Exact at integer coordinates.
pub fn bilinear_sample(src: &Image, x: f64, y: f64) -> Vec<f32> {
    let c = src.channels();
    let mut out = vec![0.0f32; c];
    sample_into(
        src.data(),
        src.height(),
        src.width(),
        c,
        x,
        y,
        |ch, v: f32| out[ch] = v,
    );
    out
}

#[inline]
fn sample_prep(h: usize, w: usize, x: f64, y: f64) -> (usize, usize, usize, usize, f64, f64) {
    let x = snap(x).clamp(0.0, (w - 1) as f64);
    let y = snap(y).clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x0 = x0.min(w - 1);
    let y0 = y0.min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    (x0, x1, y0, y1, x - x0 as f64, y - y0 as f64)
}

#[inline]
fn sample_into<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    x: f64,
    y: f64,
    mut put: impl FnMut(usize, T),
) {
    let (x0, x1, y0, y1, fx, fy) = sample_prep(h, w, x, y);
    let fx = T::from_f64(fx);
    let fy = T::from_f64(fy);
    let p00 = (y0 * w + x0) * c;
    let p01 = (y0 * w + x1) * c;
    let p10 = (y1 * w + x0) * c;
    let p11 = (y1 * w + x1) * c;
    for ch in 0..c {
        let top = src[p00 + ch] + (src[p01 + ch] - src[p00 + ch]) * fx;
        let bot = src[p10 + ch] + (src[p11 + ch] - src[p10 + ch]) * fx;
        put(ch, top + (bot - top) * fy);
    }
}

/// Warps `src` through a backward map: out(y, x) samples src at the map's
/// normalized coordinates scaled onto the source pixel grid.
pub fn warp_image(src: &Image, map: &BackwardMap) -> Result<Image> {
    if src.height() == 0 || src.width() == 0 {
        return Err(Error::arg("warp_image: empty source"));
    }
    let mut out = Image::zeros(map.height, map.width, src.channels());
    warp_kernel_fwd(
        src.data(),
        src.height(),
        src.width(),
        src.channels(),
        &map.data,
        map.height,
        map.width,
        out.data_mut(),
    );
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_kernel_fwd<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    map: &[T],
    mh: usize,
    mw: usize,
    out: &mut [T],
) {
    for i in 0..mh * mw {
        let x = map[2 * i].to_f64() * (w - 1) as f64;
        let y = map[2 * i + 1].to_f64() * (h - 1) as f64;
        let base = i * c;
        sample_into(src, h, w, c, x, y, |ch, v| out[base + ch] = v);
    }
}

/// Gradients of the warp w.r.t. source values and map coordinates. At clamped
/// coordinates the map gradient is zero (the output is locally constant).
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_kernel_bwd<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    c: usize,
    map: &[T],
    mh: usize,
    mw: usize,
    gout: &[T],
    mut dsrc: Option<&mut [T]>,
    mut dmap: Option<&mut [T]>,
) {
    for i in 0..mh * mw {
        let xr = map[2 * i].to_f64() * (w - 1) as f64;
        let yr = map[2 * i + 1].to_f64() * (h - 1) as f64;
        let (x0, x1, y0, y1, fx, fy) = sample_prep(h, w, xr, yr);
        let fxt = T::from_f64(fx);
        let fyt = T::from_f64(fy);
        let p00 = (y0 * w + x0) * c;
        let p01 = (y0 * w + x1) * c;
        let p10 = (y1 * w + x0) * c;
        let p11 = (y1 * w + x1) * c;
        let base = i * c;
        if let Some(d) = dsrc.as_deref_mut() {
            for ch in 0..c {
                let g = gout[base + ch];
                d[p00 + ch] += (T::ONE - fyt) * (T::ONE - fxt) * g;
                d[p01 + ch] += (T::ONE - fyt) * fxt * g;
                d[p10 + ch] += fyt * (T::ONE - fxt) * g;
                d[p11 + ch] += fyt * fxt * g;
            }
        }
        if let Some(d) = dmap.as_deref_mut() {
            let x_interior = xr > 0.0 && xr < (w - 1) as f64;
            let y_interior = yr > 0.0 && yr < (h - 1) as f64;
            let mut du = T::ZERO;
            let mut dv = T::ZERO;
            for ch in 0..c {
                let g = gout[base + ch];
                if x_interior {
                    let ddx = (T::ONE - fyt) * (src[p01 + ch] - src[p00 + ch])
                        + fyt * (src[p11 + ch] - src[p10 + ch]);
                    du += g * ddx;
                }
                if y_interior {
                    let ddy = (T::ONE - fxt) * (src[p10 + ch] - src[p00 + ch])
                        + fxt * (src[p11 + ch] - src[p01 + ch]);
                    dv += g * ddy;
                }
            }
            d[2 * i] += du * T::from_f64((w - 1) as f64);
            d[2 * i + 1] += dv * T::from_f64((h - 1) as f64);
        }
    }
}

// ---------------------------------------------------------------------------
// convex upsampling (8x, 3x3 neighborhoods, 64 sub-pixels per coarse pixel)
// ---------------------------------------------------------------------------

/// Verifies the partition-of-unity contract of an upsampling mask: for every
/// coarse pixel and sub-pixel index the 9 neighborhood weights sum to 1.
pub(crate) fn check_mask_normalized<T: Real>(mask: &[T], h: usize, w: usize) -> Result<()> {
    let tol = 1e-4;
    for i in 0..h * w {
        let px = &mask[i * 576..(i + 1) * 576];
        for k in 0..64 {
            let mut sum = 0.0f64;
            for uv in 0..9 {
                let wgt = px[uv * 64 + k].to_f64();
                if wgt < -1e-6 {
                    return Err(Error::contract(format!(
                        "upsample mask weight {wgt} negative at pixel {i}"
                    )));
                }
                sum += wgt;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::contract(format!(
                    "upsample mask rows not normalized: sum {sum} at pixel {i}, sub-pixel {k}"
                )));
            }
        }
    }
    Ok(())
}

/// out(8i + k/8, 8j + k%8) = sum_{u,v in -1..1} coarse(i-u, j-v) * mask(i, j, u+1, v+1, k)
/// with zero-padded coarse neighborhoods at the border.
pub(crate) fn convex_upsample_kernel_fwd<T: Real>(
    coarse: &[T],
    h: usize,
    w: usize,
    c: usize,
    mask: &[T],
    out: &mut [T],
) {
    let ow = 8 * w;
    for i in 0..h {
        for j in 0..w {
            let mpx = &mask[(i * w + j) * 576..(i * w + j + 1) * 576];
            for (uv, m_uv) in mpx.chunks(64).enumerate() {
                let u = (uv / 3) as isize - 1;
                let v = (uv % 3) as isize - 1;
                let ci = i as isize - u;
                let cj = j as isize - v;
                if ci < 0 || ci >= h as isize || cj < 0 || cj >= w as isize {
                    continue;
                }
                let cpx = &coarse[(ci as usize * w + cj as usize) * c..][..c];
                for (k, &wgt) in m_uv.iter().enumerate() {
                    let fy = i * 8 + k / 8;
                    let fx = j * 8 + k % 8;
                    let opx = &mut out[(fy * ow + fx) * c..][..c];
                    for (o, &cv) in opx.iter_mut().zip(cpx) {
                        *o += cv * wgt;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn convex_upsample_kernel_bwd<T: Real>(
    coarse: &[T],
    h: usize,
    w: usize,
    c: usize,
    mask: &[T],
    gout: &[T],
    mut dcoarse: Option<&mut [T]>,
    mut dmask: Option<&mut [T]>,
) {
    let ow = 8 * w;
    for i in 0..h {
        for j in 0..w {
            let mbase = (i * w + j) * 576;
            for uv in 0..9 {
                let u = (uv / 3) as isize - 1;
                let v = (uv % 3) as isize - 1;
                let ci = i as isize - u;
                let cj = j as isize - v;
                if ci < 0 || ci >= h as isize || cj < 0 || cj >= w as isize {
                    continue;
                }
                let cidx = (ci as usize * w + cj as usize) * c;
                for k in 0..64 {
                    let fy = i * 8 + k / 8;
                    let fx = j * 8 + k % 8;
                    let gpx = &gout[(fy * ow + fx) * c..][..c];
                    let wgt = mask[mbase + uv * 64 + k];
                    if let Some(d) = dcoarse.as_deref_mut() {
                        for (ch, &g) in gpx.iter().enumerate() {
                            d[cidx + ch] += wgt * g;
                        }
                    }
                    if let Some(d) = dmask.as_deref_mut() {
                        let mut s = T::ZERO;
                        for (ch, &g) in gpx.iter().enumerate() {
                            s += coarse[cidx + ch] * g;
                        }
                        d[mbase + uv * 64 + k] += s;
                    }
                }
            }
        }
    }
}

/// Non-graph convenience: upsamples a coarse field [h, w, c] by 8x with the
/// given normalized mask [h, w, 576].
pub fn convex_upsample<T: Real>(coarse: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let cs = coarse.shape();
    let ms = mask.shape();
    if cs.len() != 3 {
        return Err(Error::dim(format!("coarse field must be HWC, got {:?}", cs)));
    }
    if ms != [cs[0], cs[1], 576] {
        return Err(Error::dim(format!(
            "mask must be {}x{}x576, got {:?}",
            cs[0], cs[1], ms
        )));
    }
    check_mask_normalized(mask.data(), cs[0], cs[1])?;
    let mut out = Tensor::zeros(vec![8 * cs[0], 8 * cs[1], cs[2]]);
    convex_upsample_kernel_fwd(coarse.data(), cs[0], cs[1], cs[2], mask.data(), out.data_mut());
    Ok(out)
}

// ---------------------------------------------------------------------------
// BMAP file format
// ---------------------------------------------------------------------------

const BMAP_MAGIC: &[u8; 4] = b"BMAP";

/// BMAP: magic `BMAP`, u32 LE height, u32 LE width, u8 flag (1 = normalized
/// coordinates), then row-major f32 LE (u, v) pairs per pixel.
pub fn save_bmap(map: &BackwardMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(13 + map.data.len() * 4);
    bytes.extend_from_slice(BMAP_MAGIC);
    bytes.extend_from_slice(&(map.height as u32).to_le_bytes());
    bytes.extend_from_slice(&(map.width as u32).to_le_bytes());
    bytes.push(1u8);
    for v in &map.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_bmap(path: impl AsRef<Path>) -> Result<BackwardMap> {
    let bytes = fs::read(path.as_ref())
        .map_err(|e| Error::data(format!("{}: {e}", path.as_ref().display())))?;
    if bytes.len() < 13 || &bytes[0..4] != BMAP_MAGIC {
        return Err(Error::data("not a BMAP file"));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let flag = bytes[12];
    if flag != 1 {
        return Err(Error::data(format!(
            "unsupported BMAP coordinate flag {flag} (expected 1 = normalized)"
        )));
    }
    let need = height * width * 2;
    if bytes.len() != 13 + need * 4 {
        return Err(Error::data(format!(
            "BMAP payload size mismatch: expected {} bytes",
            13 + need * 4
        )));
    }
    let mut data = Vec::with_capacity(need);
    for chunk in bytes[13..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    BackwardMap::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn ramp_image(h: usize, w: usize) -> Image {
        let mut img = Image::zeros(h, w, 1);
        for y in 0..h {
            for x in 0..w {
                img.set(y, x, 0, x as f32);
            }
        }
        img
    }

    fn random_image(rng: &mut Rng, h: usize, w: usize, c: usize) -> Image {
        let data = (0..h * w * c).map(|_| rng.uniform::<f32>(0.0, 1.0)).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn identity_map_two_by_two() {
        let m = identity_map(2, 2);
        assert_eq!(m.u(0, 0), 0.0);
        assert_eq!(m.u(0, 1), 1.0);
        assert_eq!(m.u(1, 0), 0.0);
        assert_eq!(m.v(0, 1), 0.0);
        assert_eq!(m.v(1, 0), 1.0);
        assert_eq!(m.v(1, 1), 1.0);
    }

    #[test]
    fn warp_with_identity_is_bit_exact() {
        let mut rng = Rng::new(17);
        for &(h, w) in &[(5usize, 7usize), (16, 16), (9, 3), (1, 4)] {
            let img = random_image(&mut rng, h, w, 3);
            let out = warp_image(&img, &identity_map(h, w)).unwrap();
            assert_eq!(img.data(), out.data(), "identity warp must be exact at {h}x{w}");
        }
    }

    #[test]
    fn warp_shift_by_one_pixel_on_ramp() {
        let img = ramp_image(4, 8);
        let mut map = identity_map(4, 8);
        // shift sampling one source pixel to the right, clamped at the border
        for y in 0..4 {
            for x in 0..8 {
                let u = ((x + 1).min(7) as f64 / 7.0) as f32;
                let v = map.v(y, x);
                map.set(y, x, u, v);
            }
        }
        let out = warp_image(&img, &map).unwrap();
        for y in 0..4 {
            for x in 0..8 {
                let want = (x + 1).min(7) as f32;
                assert!((out.at(y, x, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_constant_image_is_constant_for_any_map() {
        let img = Image::full(6, 6, 3, 0.42);
        let mut rng = Rng::new(5);
        let mut map = identity_map(4, 4);
        for v in map.data_mut() {
            *v = rng.uniform::<f32>(-0.5, 1.5);
        }
        let out = warp_image(&img, &map).unwrap();
        for &v in out.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_empty_source_is_error() {
        let img = Image::zeros(0, 4, 1);
        assert!(warp_image(&img, &identity_map(2, 2)).is_err());
    }

    #[test]
    fn bilinear_sample_integer_coords_exact() {
        let img = ramp_image(3, 5);
        assert_eq!(bilinear_sample(&img, 2.0, 1.0)[0], 2.0);
        assert_eq!(bilinear_sample(&img, 4.0, 2.0)[0], 4.0);
    }

    #[test]
    fn bilinear_sample_midpoint() {
        let img = Image::new(1, 2, 1, vec![0.0, 10.0]).unwrap();
        let v = bilinear_sample(&img, 0.5, 0.0)[0];
        assert!((v - 5.0).abs() < 1e-6);
    }

    #[test]
    fn bilinear_sample_clamps_out_of_range() {
        let img = ramp_image(3, 5);
        assert_eq!(bilinear_sample(&img, -5.0, -5.0)[0], 0.0);
        assert_eq!(bilinear_sample(&img, 100.0, 100.0)[0], 4.0);
    }

    #[test]
    fn resize_map_same_extent_is_identity() {
        let m = identity_map(4, 6);
        let r = resize_map(&m, 4, 6).unwrap();
        assert_eq!(m, r);
    }

    #[test]
    fn resize_identity_map_stays_identity() {
        let m = identity_map(36, 36);
        let r = resize_map(&m, 288, 288).unwrap();
        let want = identity_map(288, 288);
        for (a, b) in r.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_small_identity_exact() {
        let r = resize_map(&identity_map(4, 4), 8, 8).unwrap();
        let want = identity_map(8, 8);
        for (a, b) in r.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_constant_map_stays_constant() {
        let m = BackwardMap::new(3, 3, vec![0.25; 18]).unwrap();
        let r = resize_map(&m, 11, 7).unwrap();
        for &v in r.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    fn one_hot_center_mask(h: usize, w: usize) -> Tensor<f32> {
        let mut mask = Tensor::<f32>::zeros(vec![h, w, 576]);
        // uv index 4 is (u=0, v=0): the center of the 3x3 neighborhood
        for px in 0..h * w {
            for k in 0..64 {
                mask.data_mut()[px * 576 + 4 * 64 + k] = 1.0;
            }
        }
        mask
    }

    fn random_normalized_mask(rng: &mut Rng, h: usize, w: usize) -> Tensor<f32> {
        let mut mask = Tensor::<f32>::zeros(vec![h, w, 576]);
        for px in 0..h * w {
            for k in 0..64 {
                let mut ws = [0.0f32; 9];
                let mut sum = 0.0;
                for wv in ws.iter_mut() {
                    *wv = rng.uniform::<f32>(0.01, 1.0);
                    sum += *wv;
                }
                for (uv, &wv) in ws.iter().enumerate() {
                    mask.data_mut()[px * 576 + uv * 64 + k] = wv / sum;
                }
            }
        }
        mask
    }

    #[test]
    fn convex_upsample_one_hot_center_is_nearest_neighbor() {
        let mut rng = Rng::new(2);
        let coarse = Tensor::new(vec![3, 3, 2], (0..18).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f32>>()).unwrap();
        let mask = one_hot_center_mask(3, 3);
        let out = convex_upsample(&coarse, &mask).unwrap();
        for fy in 0..24 {
            for fx in 0..24 {
                for ch in 0..2 {
                    let want = coarse.data()[((fy / 8) * 3 + fx / 8) * 2 + ch];
                    let got = out.data()[(fy * 24 + fx) * 2 + ch];
                    assert_eq!(want, got);
                }
            }
        }
    }

    #[test]
    fn convex_upsample_constant_field_interior() {
        let coarse = Tensor::<f32>::full(vec![4, 4, 2], 0.7);
        let mut rng = Rng::new(9);
        let mask = random_normalized_mask(&mut rng, 4, 4);
        let out = convex_upsample(&coarse, &mask).unwrap();
        // interior coarse pixels: full 3x3 neighborhood available
        for fy in 8..24 {
            for fx in 8..24 {
                for ch in 0..2 {
                    let got = out.data()[(fy * 32 + fx) * 2 + ch];
                    assert!((got - 0.7).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn convex_upsample_matches_direct_loop_oracle() {
        let mut rng = Rng::new(31);
        let (h, w) = (3, 3);
        let coarse = Tensor::new(
            vec![h, w, 2],
            (0..h * w * 2).map(|_| rng.uniform(-2.0, 2.0)).collect::<Vec<f32>>(),
        )
        .unwrap();
        let mask = random_normalized_mask(&mut rng, h, w);
        let out = convex_upsample(&coarse, &mask).unwrap();
        // direct evaluation of the weighted 3x3 combination
        for i in 0..h {
            for j in 0..w {
                for k in 0..64 {
                    for ch in 0..2 {
                        let mut want = 0.0f32;
                        for du in -1i32..=1 {
                            for dv in -1i32..=1 {
                                let ci = i as i32 - du;
                                let cj = j as i32 - dv;
                                if ci < 0 || ci >= h as i32 || cj < 0 || cj >= w as i32 {
                                    continue;
                                }
                                let wgt = mask.data()
                                    [(i * w + j) * 576 + (((du + 1) * 3 + dv + 1) as usize) * 64 + k];
                                want += coarse.data()[(ci as usize * w + cj as usize) * 2 + ch] * wgt;
                            }
                        }
                        let fy = i * 8 + k / 8;
                        let fx = j * 8 + k % 8;
                        let got = out.data()[(fy * 8 * w + fx) * 2 + ch];
                        assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn convex_upsample_rejects_unnormalized_mask() {
        let coarse = Tensor::<f32>::zeros(vec![2, 2, 2]);
        let mask = Tensor::<f32>::full(vec![2, 2, 576], 0.5);
        assert!(matches!(
            convex_upsample(&coarse, &mask),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn bmap_round_trip() {
        let dir = std::env::temp_dir().join("doctr_fields_test");
        std::fs::create_dir_all(&dir).unwrap();
        let mut rng = Rng::new(77);
        let mut map = identity_map(5, 9);
        for v in map.data_mut() {
            *v += rng.uniform::<f32>(-0.01, 0.01);
        }
        let path = dir.join("m.bmap");
        save_bmap(&map, &path).unwrap();
        let back = load_bmap(&path).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn bmap_rejects_garbage() {
        let dir = std::env::temp_dir().join("doctr_fields_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bmap");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_bmap(&path).is_err());
    }
}
