//! Evaluation metrics: local distortion over a dense correspondence,
//! SSIM / MS-SSIM, edit distance and character error rate.
//!
//! The dense correspondence is a coarse-to-fine block matcher with a
//! smoothness penalty, not a reimplementation of any published flow method:
//! local-distortion numbers are comparable within this artifact only.

use rayon::prelude::*;

use crate::image::Image;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// dense correspondence
// ---------------------------------------------------------------------------

/// Per-pixel displacement field (dx, dy) in pixels.
#[derive(Debug, Clone)]
pub struct DenseFlow {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f32>,
    pub dy: Vec<f32>,
}

/// Matching block extent.
const FLOW_PATCH: usize = 8;
/// Integer search radius around the current estimate, per level.
const FLOW_RADIUS: i64 = 4;
/// Weight of the squared deviation from the neighborhood mean flow.
const FLOW_LAMBDA: f64 = 0.5;
/// Refinement sweeps per pyramid level.
const FLOW_SWEEPS: usize = 2;

fn downsample2(img: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let s = img[2 * y * w + 2 * x]
                + img[2 * y * w + 2 * x + 1]
                + img[(2 * y + 1) * w + 2 * x]
                + img[(2 * y + 1) * w + 2 * x + 1];
            out[y * ow + x] = s * 0.25;
        }
    }
    (out, oh, ow)
}

#[inline]
fn clamp_i(v: i64, max: usize) -> usize {
    v.clamp(0, max as i64 - 1) as usize
}

/// Summed squared difference of the block around (y, x) in `a` against the
/// block around (y + dy, x + dx) in `b`, with clamped borders. The sum (not
/// the mean) keeps the data term strong against the smoothness penalty at
/// document-image contrast.
fn block_ssd(a: &[f32], b: &[f32], h: usize, w: usize, y: usize, x: usize, dy: i64, dx: i64) -> f64 {
    let half = (FLOW_PATCH / 2) as i64;
    let mut sum = 0.0f64;
    for qy in -half..half {
        for qx in -half..half {
            let ay = clamp_i(y as i64 + qy, h);
            let ax = clamp_i(x as i64 + qx, w);
            let by = clamp_i(y as i64 + qy + dy, h);
            let bx = clamp_i(x as i64 + qx + dx, w);
            let d = (a[ay * w + ax] - b[by * w + bx]) as f64;
            sum += d * d;
        }
    }
    sum
}

/// Dense displacement field from `reference` to `target` by coarse-to-fine
/// block matching with a smoothness penalty on neighbor disagreement.
pub fn dense_flow(reference: &Image, target: &Image, levels: usize) -> Result<DenseFlow> {
    if reference.height() != target.height() || reference.width() != target.width() {
        return Err(Error::dim(format!(
            "dense_flow extents differ: {}x{} vs {}x{}",
            reference.height(),
            reference.width(),
            target.height(),
            target.width()
        )));
    }
    if levels == 0 {
        return Err(Error::arg("dense_flow: need at least one level"));
    }
    if reference.height() < FLOW_PATCH || reference.width() < FLOW_PATCH {
        return Err(Error::arg(format!(
            "dense_flow: images smaller than one {FLOW_PATCH}px block"
        )));
    }
    let ref_gray = reference.to_gray();
    let tgt_gray = target.to_gray();
    // pyramids, finest first
    let mut pyr: Vec<(Vec<f32>, Vec<f32>, usize, usize)> = vec![(
        ref_gray.data().to_vec(),
        tgt_gray.data().to_vec(),
        reference.height(),
        reference.width(),
    )];
    while pyr.len() < levels {
        let (ra, ta, h, w) = pyr.last().unwrap();
        if h / 2 < FLOW_PATCH || w / 2 < FLOW_PATCH {
            break;
        }
        let (r2, nh, nw) = downsample2(ra, *h, *w);
        let (t2, _, _) = downsample2(ta, *h, *w);
        pyr.push((r2, t2, nh, nw));
    }
    let coarsest = pyr.len() - 1;
    let (mut fx, mut fy): (Vec<f32>, Vec<f32>) = {
        let (_, _, h, w) = &pyr[coarsest];
        (vec![0.0; h * w], vec![0.0; h * w])
    };
    for level in (0..=coarsest).rev() {
        let (ra, ta, h, w) = &pyr[level];
        let (h, w) = (*h, *w);
        if level != coarsest {
            // move flow down from the coarser level, doubling displacements
            let (_, _, ch, cw) = pyr[level + 1];
            let mut nfx = vec![0.0f32; h * w];
            let mut nfy = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let sy = (y / 2).min(ch - 1);
                    let sx = (x / 2).min(cw - 1);
                    nfx[y * w + x] = fx[sy * cw + sx] * 2.0;
                    nfy[y * w + x] = fy[sy * cw + sx] * 2.0;
                }
            }
            fx = nfx;
            fy = nfy;
        }
        for _ in 0..FLOW_SWEEPS {
            let prev_fx = fx.clone();
            let prev_fy = fy.clone();
            let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..h)
                .into_par_iter()
                .map(|y| {
                    let mut row_fx = vec![0.0f32; w];
                    let mut row_fy = vec![0.0f32; w];
                    for x in 0..w {
                        // neighborhood mean of the previous sweep's flow
                        let mut sx = 0.0f64;
                        let mut sy = 0.0f64;
                        let mut cnt = 0.0f64;
                        for ny in y.saturating_sub(1)..(y + 2).min(h) {
                            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                                sx += prev_fx[ny * w + nx] as f64;
                                sy += prev_fy[ny * w + nx] as f64;
                                cnt += 1.0;
                            }
                        }
                        let smooth_x = sx / cnt;
                        let smooth_y = sy / cnt;
                        let cx = prev_fx[y * w + x].round() as i64;
                        let cy = prev_fy[y * w + x].round() as i64;
                        let mut best = (f64::INFINITY, 0i64, 0i64);
                        for dy in cy - FLOW_RADIUS..=cy + FLOW_RADIUS {
                            for dx in cx - FLOW_RADIUS..=cx + FLOW_RADIUS {
                                let data = block_ssd(ra, ta, h, w, y, x, dy, dx);
                                let devx = dx as f64 - smooth_x;
                                let devy = dy as f64 - smooth_y;
                                let cost = data + FLOW_LAMBDA * (devx * devx + devy * devy);
                                if cost < best.0 {
                                    best = (cost, dy, dx);
                                }
                            }
                        }
                        row_fx[x] = best.2 as f32;
                        row_fy[x] = best.1 as f32;
                    }
                    (row_fx, row_fy)
                })
                .collect();
            for (y, (rfx, rfy)) in rows.into_iter().enumerate() {
                fx[y * w..(y + 1) * w].copy_from_slice(&rfx);
                fy[y * w..(y + 1) * w].copy_from_slice(&rfy);
            }
        }
    }
    Ok(DenseFlow {
        height: reference.height(),
        width: reference.width(),
        dx: fx,
        dy: fy,
    })
}

/// Mean L2 displacement of a flow field, in pixels.
pub fn local_distortion(flow: &DenseFlow) -> f64 {
    if flow.dx.is_empty() {
        return 0.0;
    }
    let sum: f64 = flow
        .dx
        .iter()
        .zip(&flow.dy)
        .map(|(&x, &y)| ((x as f64) * (x as f64) + (y as f64) * (y as f64)).sqrt())
        .sum();
    sum / flow.dx.len() as f64
}

// ---------------------------------------------------------------------------
// SSIM and MS-SSIM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct MsSsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub weights: [f64; 5],
}

impl Default for MsSsimParams {
    fn default() -> Self {
        MsSsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            weights: [0.0448, 0.2856, 0.3001, 0.2363, 0.1333],
        }
    }
}

impl MsSsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::config("SSIM window must be odd"));
        }
        let sum: f64 = self.weights.iter().sum();
        // the canonical published constants sum to 1.0001; weights are
        // renormalized by their actual sum wherever they are applied
        if (sum - 1.0).abs() > 2e-4 {
            return Err(Error::config(format!("level weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n / 2) as f64;
    let mut w: Vec<f64> = (0..n * n)
        .map(|i| {
            let y = (i / n) as f64 - c;
            let x = (i % n) as f64 - c;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean luminance and contrast-structure terms over all valid windows.
fn ssim_terms(a: &[f32], b: &[f32], h: usize, w: usize, p: &MsSsimParams) -> (f64, f64) {
    let win = p.window;
    let kern = gaussian_window(win, p.sigma);
    let c1 = (p.k1 * 1.0) * (p.k1 * 1.0);
    let c2 = (p.k2 * 1.0) * (p.k2 * 1.0);
    let oh = h - win + 1;
    let ow = w - win + 1;
    let sums: Vec<(f64, f64)> = (0..oh)
        .into_par_iter()
        .map(|y| {
            let mut lsum = 0.0;
            let mut cssum = 0.0;
            for x in 0..ow {
                let mut ma = 0.0f64;
                let mut mb = 0.0f64;
                let mut maa = 0.0f64;
                let mut mbb = 0.0f64;
                let mut mab = 0.0f64;
                for ky in 0..win {
                    for kx in 0..win {
                        let g = kern[ky * win + kx];
                        let av = a[(y + ky) * w + x + kx] as f64;
                        let bv = b[(y + ky) * w + x + kx] as f64;
                        ma += g * av;
                        mb += g * bv;
                        maa += g * av * av;
                        mbb += g * bv * bv;
                        mab += g * av * bv;
                    }
                }
                let va = maa - ma * ma;
                let vb = mbb - mb * mb;
                let vab = mab - ma * mb;
                lsum += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                cssum += (2.0 * vab + c2) / (va + vb + c2);
            }
            (lsum, cssum)
        })
        .collect();
    let n = (oh * ow) as f64;
    let (l, cs) = sums
        .into_iter()
        .fold((0.0, 0.0), |(al, ac), (l, c)| (al + l, ac + c));
    (l / n, cs / n)
}

fn require_gray_pair(a: &Image, b: &Image) -> Result<(Image, Image)> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::dim(format!(
            "image extents differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok((a.to_gray(), b.to_gray()))
}

/// Mean local structural similarity with a Gaussian window; in [-1, 1].
pub fn ssim(a: &Image, b: &Image, p: &MsSsimParams) -> Result<f64> {
    p.validate()?;
    let (ga, gb) = require_gray_pair(a, b)?;
    if ga.height() < p.window || ga.width() < p.window {
        return Err(Error::dim(format!(
            "image {}x{} smaller than SSIM window {}",
            ga.height(),
            ga.width(),
            p.window
        )));
    }
    let (l, cs) = ssim_terms(ga.data(), gb.data(), ga.height(), ga.width(), p);
    Ok(l * cs)
}

/// Multi-scale SSIM: weighted product of contrast-structure terms across a
/// pyramid with the luminance term at the coarsest level. Levels the image
/// cannot support are dropped and the weights renormalized.
pub fn ms_ssim(a: &Image, b: &Image, p: &MsSsimParams) -> Result<f64> {
    p.validate()?;
    let (ga, gb) = require_gray_pair(a, b)?;
    let mut levels = p.weights.len();
    let (mut th, mut tw) = (ga.height(), ga.width());
    let mut usable = 0usize;
    while usable < levels && th >= p.window && tw >= p.window {
        usable += 1;
        th /= 2;
        tw /= 2;
    }
    levels = usable;
    if levels == 0 {
        return Err(Error::arg(format!(
            "image {}x{} smaller than SSIM window {} at every level",
            ga.height(),
            ga.width(),
            p.window
        )));
    }
    let wsum: f64 = p.weights[..levels].iter().sum();
    let mut score = 1.0f64;
    let mut ca = ga.data().to_vec();
    let mut cb = gb.data().to_vec();
    let (mut h, mut w) = (ga.height(), ga.width());
    for level in 0..levels {
        let (l, cs) = ssim_terms(&ca, &cb, h, w, p);
        let weight = p.weights[level] / wsum;
        score *= cs.max(0.0).powf(weight);
        if level == levels - 1 {
            score *= l.max(0.0).powf(weight);
        } else {
            let (na, nh, nw) = downsample2(&ca, h, w);
            let (nb, _, _) = downsample2(&cb, h, w);
            ca = na;
            cb = nb;
            h = nh;
            w = nw;
        }
    }
    Ok(score)
}

// ---------------------------------------------------------------------------
// edit distance and character error rate
// ---------------------------------------------------------------------------

/// Levenshtein distance with unit costs for deletions, insertions, and
/// substitutions.
pub fn edit_distance(hyp: &str, reference: &str) -> usize {
    let a: Vec<char> = hyp.chars().collect();
    let b: Vec<char> = reference.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// (deletions + insertions + substitutions) / reference length. May exceed 1.
pub fn cer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::arg("cer: empty reference string"));
    }
    Ok(edit_distance(hyp, reference) as f64 / n as f64)
}
