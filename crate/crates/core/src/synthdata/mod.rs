//! Synthetic paired training data.
//!
//! Each sample starts from a procedurally rendered flat page with known text,
//! applies a smooth random warp expressed directly as the ground-truth
//! backward map, multiplies a shading field, and composites the result onto a
//! procedural background. The backward map is generated first and exactly;
//! the distorted image is produced by numerically inverting it, so the map a
//! model must regress is correct by construction.

pub mod glyphs;

use std::fs;
use std::path::Path;

use crate::fields::{warp_image, BackwardMap};
use crate::image::Image;
use crate::metrics::{ms_ssim, MsSsimParams};
use crate::numerics::Rng;
use crate::segmenter::DocMask;
use crate::{Error, Result};

use glyphs::{draw_glyph, GLYPH_H, GLYPH_W};

/// Rendered page extent (square).
pub const PAGE: usize = 288;
const MARGIN: usize = 15;
const SCALE: usize = 2;
const ADVANCE: usize = (GLYPH_W + 1) * SCALE;
const LINE_STEP: usize = (GLYPH_H + 4) * SCALE;
const TEXT_ROWS: usize = 8;
const COLS: usize = (PAGE - 2 * MARGIN) / ADVANCE;
const INK: f32 = 0.06;
const PAPER: f32 = 0.97;

// ---------------------------------------------------------------------------
// page rendering and glyph decoding
// ---------------------------------------------------------------------------

fn random_word(rng: &mut Rng) -> String {
    let len = 2 + rng.below(6);
    (0..len)
        .map(|_| {
            if rng.below(8) == 0 {
                char::from(b'0' + rng.below(10) as u8)
            } else {
                char::from(b'A' + rng.below(26) as u8)
            }
        })
        .collect()
}

/// Procedural page: ruled text lines from the built-in glyph set plus simple
/// figures; returns the page and the exact text it carries.
pub fn render_document(seed: u64) -> (Image, String) {
    let mut rng = Rng::new(seed);
    let mut page = Image::full(PAGE, PAGE, 3, PAPER);
    // faint rules under every text line
    for l in 0..TEXT_ROWS {
        let y = MARGIN + l * LINE_STEP + GLYPH_H * SCALE + 2;
        for x in MARGIN..PAGE - MARGIN {
            for c in 0..3 {
                page.set(y, x, c, 0.85);
            }
        }
    }
    let mut lines = Vec::with_capacity(TEXT_ROWS);
    for l in 0..TEXT_ROWS {
        let mut line = String::new();
        loop {
            let word = random_word(&mut rng);
            let needed = word.len() + usize::from(!line.is_empty());
            if line.chars().count() + needed > COLS {
                break;
            }
            if !line.is_empty() {
                line.push(' ');
            }
            line.push_str(&word);
        }
        let y0 = MARGIN + l * LINE_STEP;
        for (col, ch) in line.chars().enumerate() {
            if ch != ' ' {
                draw_glyph(&mut page, ch, y0, MARGIN + col * ADVANCE, SCALE, INK);
            }
        }
        lines.push(line);
    }
    // figure band below the text: an outlined box and a filled bar
    let band_top = MARGIN + TEXT_ROWS * LINE_STEP + 8;
    let oy = band_top + rng.below(12);
    let ox = MARGIN + rng.below(30);
    let oh = 24 + rng.below(20);
    let ow = 70 + rng.below(100);
    let oy1 = (oy + oh).min(PAGE - MARGIN - 1);
    let ox1 = (ox + ow).min(PAGE - MARGIN - 1);
    for x in ox..=ox1 {
        for t in 0..2 {
            for c in 0..3 {
                page.set(oy + t, x, c, 0.1);
                page.set(oy1 - t, x, c, 0.1);
            }
        }
    }
    for y in oy..=oy1 {
        for t in 0..2 {
            for c in 0..3 {
                page.set(y, ox + t, c, 0.1);
                page.set(y, ox1 - t, c, 0.1);
            }
        }
    }
    let by = oy1 + 6 + rng.below(6);
    let bh = 8 + rng.below(8);
    let bw = 50 + rng.below(80);
    let bx = MARGIN + rng.below(60);
    for y in by..(by + bh).min(PAGE - MARGIN) {
        for x in bx..(bx + bw).min(PAGE - MARGIN) {
            for c in 0..3 {
                page.set(y, x, c, 0.15);
            }
        }
    }
    (page, lines.join("\n"))
}

/// Per-cell bit-disagreement budget before a cell counts as unreadable.
const CELL_DIST_LIMIT: usize = 10;

fn decode_line(gray: &Image, y0: usize) -> Option<String> {
    let mut line = String::new();
    let mut failures = 0usize;
    for col in 0..COLS {
        let x0 = MARGIN + col * ADVANCE;
        match glyphs::decode_cell(gray, y0, x0, SCALE) {
            None => line.push(' '),
            Some((ch, dist)) if dist <= CELL_DIST_LIMIT => line.push(ch),
            Some(_) => {
                line.push('?');
                failures += 1;
            }
        }
    }
    if failures > COLS / 4 {
        return None;
    }
    Some(line.trim_end().to_string())
}

/// Exact-match glyph decoding of a rendered (or rectified) page: template
/// matching on the known line grid, stopping at the first unreadable line.
pub fn decode_text(img: &Image) -> String {
    let page = if img.height() == PAGE && img.width() == PAGE {
        img.clone()
    } else {
        img.resize_bilinear(PAGE, PAGE)
    };
    let gray = page.to_gray();
    let mut lines = Vec::new();
    for l in 0..TEXT_ROWS {
        let y0 = MARGIN + l * LINE_STEP;
        match decode_line(&gray, y0) {
            Some(s) if !s.is_empty() => lines.push(s),
            _ => break,
        }
    }
    lines.join("\n")
}

// ---------------------------------------------------------------------------
// warp generation
// ---------------------------------------------------------------------------

/// Parameters of a synthetic warp; all randomness derives from `seed`.
#[derive(Debug, Clone, Copy)]
pub struct WarpParams {
    pub seed: u64,
    /// Inward corner inset amplitude (fraction of the extent). 0 disables
    /// the perspective component entirely.
    pub perspective: f64,
    /// Number of sinusoidal folds per axis.
    pub folds: usize,
    pub fold_amp_u: f64,
    pub fold_amp_v: f64,
    /// Page-curl amplitude (quadratic horizontal displacement).
    pub curl: f64,
}

impl WarpParams {
    pub fn identity() -> Self {
        WarpParams {
            seed: 0,
            perspective: 0.0,
            folds: 0,
            fold_amp_u: 0.0,
            fold_amp_v: 0.0,
            curl: 0.0,
        }
    }

    /// Draws parameters within diffeomorphism-safe bounds.
    pub fn sample(rng: &mut Rng) -> Self {
        WarpParams {
            seed: rng.next_u64(),
            perspective: rng.uniform(0.09, 0.14),
            folds: 1 + rng.below(4),
            fold_amp_u: rng.uniform(0.012, 0.032),
            fold_amp_v: rng.uniform(0.006, 0.018),
            curl: rng.uniform(0.0, 0.05),
        }
    }

    fn damped(mut self, factor: f64) -> Self {
        self.fold_amp_u *= factor;
        self.fold_amp_v *= factor;
        self.curl *= factor;
        self
    }
}

/// Concrete warp function from rectified unit coordinates to distorted unit
/// coordinates: folds and curl followed by a bilinear blend onto an inset
/// corner quad.
struct WarpFn {
    corners: [(f64, f64); 4], // c00, c10, c01, c11
    folds: Vec<(f64, f64, f64, f64, f64, f64)>, // ku, phiu, ampu, kv, phiv, ampv
    curl: f64,
    curl_sign: f64,
}

impl WarpFn {
    fn build(p: &WarpParams) -> Self {
        let mut rng = Rng::new(p.seed ^ 0xC0FF_EE00);
        let inset = |rng: &mut Rng| -> f64 {
            if p.perspective == 0.0 {
                0.0
            } else {
                p.perspective * rng.uniform::<f64>(0.5, 1.0)
            }
        };
        let c00 = (inset(&mut rng), inset(&mut rng));
        let c10 = (1.0 - inset(&mut rng), inset(&mut rng));
        let c01 = (inset(&mut rng), 1.0 - inset(&mut rng));
        let c11 = (1.0 - inset(&mut rng), 1.0 - inset(&mut rng));
        let mut folds = Vec::with_capacity(p.folds);
        for _ in 0..p.folds {
            folds.push((
                (1 + rng.below(4)) as f64,
                rng.uniform(0.0, std::f64::consts::TAU),
                p.fold_amp_u * rng.uniform::<f64>(0.5, 1.0),
                (1 + rng.below(3)) as f64,
                rng.uniform(0.0, std::f64::consts::TAU),
                p.fold_amp_v * rng.uniform::<f64>(0.5, 1.0),
            ));
        }
        let curl_sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
        WarpFn {
            corners: [c00, c10, c01, c11],
            folds,
            curl: p.curl,
            curl_sign,
        }
    }

    fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        let mut u = x;
        let mut v = y;
        for &(ku, phiu, ampu, kv, phiv, ampv) in &self.folds {
            u += ampu * (std::f64::consts::TAU * (ku * y) + phiu).sin();
            v += ampv * (std::f64::consts::TAU * (kv * x) + phiv).sin();
        }
        u += self.curl_sign * self.curl * (y - 0.5) * (y - 0.5);
        let [c00, c10, c01, c11] = self.corners;
        let top = (c00.0 + (c10.0 - c00.0) * u, c00.1 + (c10.1 - c00.1) * u);
        let bot = (c01.0 + (c11.0 - c01.0) * u, c01.1 + (c11.1 - c01.1) * u);
        (top.0 + (bot.0 - top.0) * v, top.1 + (bot.1 - top.1) * v)
    }

    /// Minimum Jacobian determinant over a 32x32 grid (central differences).
    fn min_jacobian(&self) -> f64 {
        let n = 32usize;
        let h = 1e-4;
        let mut min_det = f64::INFINITY;
        for i in 0..n {
            for j in 0..n {
                let x = j as f64 / (n - 1) as f64;
                let y = i as f64 / (n - 1) as f64;
                let (up, _vp) = self.eval(x + h, y);
                let (um, _vm) = self.eval(x - h, y);
                let (u_yp, v_yp) = self.eval(x, y + h);
                let (u_ym, v_ym) = self.eval(x, y - h);
                let (_, vxp) = self.eval(x + h, y);
                let (_, vxm) = self.eval(x - h, y);
                let dudx = (up - um) / (2.0 * h);
                let dudy = (u_yp - u_ym) / (2.0 * h);
                let dvdx = (vxp - vxm) / (2.0 * h);
                let dvdy = (v_yp - v_ym) / (2.0 * h);
                min_det = min_det.min(dudx * dvdy - dudy * dvdx);
            }
        }
        min_det
    }

    /// Fixed-point inversion: find x with eval(x) = target.
    fn invert(&self, tx: f64, ty: f64) -> (f64, f64, bool) {
        let mut x = tx;
        let mut y = ty;
        for _ in 0..20 {
            let (fx, fy) = self.eval(x, y);
            x += tx - fx;
            y += ty - fy;
        }
        let (fx, fy) = self.eval(x, y);
        let err = ((fx - tx).powi(2) + (fy - ty).powi(2)).sqrt();
        (x, y, err < 1e-4)
    }
}

/// Generates the backward map of a random smooth warp. The Jacobian is
/// verified positive on a 32x32 grid; failing draws are retried with damped
/// amplitudes up to 5 times.
pub fn gen_warp(params: &WarpParams, height: usize, width: usize) -> Result<BackwardMap> {
    let f = checked_warp_fn(params)?;
    let mut data = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        let y = if height > 1 { i as f64 / (height - 1) as f64 } else { 0.0 };
        for j in 0..width {
            let x = if width > 1 { j as f64 / (width - 1) as f64 } else { 0.0 };
            let (u, v) = f.eval(x, y);
            data.push(u as f32);
            data.push(v as f32);
        }
    }
    BackwardMap::new(height, width, data)
}

fn checked_warp_fn(params: &WarpParams) -> Result<WarpFn> {
    let mut p = *params;
    for _ in 0..=5 {
        let f = WarpFn::build(&p);
        if f.min_jacobian() > 0.05 {
            return Ok(f);
        }
        p = p.damped(0.6);
    }
    Err(Error::numeric(format!(
        "warp Jacobian check failed after damped retries (seed {})",
        params.seed
    )))
}

// ---------------------------------------------------------------------------
// shading and backgrounds
// ---------------------------------------------------------------------------

/// Smooth multiplicative shading field in [0.4, 1.0]: a low-frequency base
/// plus up to two soft shadow bands.
pub fn gen_shading(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = Rng::new(seed);
    let amp: f64 = rng.uniform(0.03, 0.1);
    let f1: f64 = rng.uniform(0.4, 1.2);
    let f2: f64 = rng.uniform(0.4, 1.2);
    let phase: f64 = rng.uniform(0.0, std::f64::consts::TAU);
    let bands = rng.below(3);
    let mut band_params = Vec::with_capacity(bands);
    for _ in 0..bands {
        let theta: f64 = rng.uniform(0.0, std::f64::consts::PI);
        band_params.push((
            theta.cos(),
            theta.sin(),
            rng.uniform::<f64>(0.2, 0.8),   // center along the normal
            rng.uniform::<f64>(0.05, 0.12), // width
            rng.uniform::<f64>(0.1, 0.25),  // depth
        ));
    }
    let mut img = Image::zeros(height, width, 1);
    for y in 0..height {
        let vy = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
        for x in 0..width {
            let vx = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
            let mut s =
                1.0 - amp * (0.5 + 0.5 * (std::f64::consts::TAU * (f1 * vx + f2 * vy) + phase).sin());
            for &(cx, cy, center, width_b, depth) in &band_params {
                let t = vx * cx + vy * cy;
                let d = (t - center) / width_b;
                s *= 1.0 - depth * (-d * d).exp();
            }
            img.set(y, x, 0, s.clamp(0.4, 1.0) as f32);
        }
    }
    img
}

/// Procedural background texture: smoothed noise, a color gradient, or
/// stripes, selected by seed.
pub fn gen_background(seed: u64, height: usize, width: usize) -> Image {
    let mut rng = Rng::new(seed);
    let c0: [f32; 3] = [
        rng.uniform(0.08, 0.7),
        rng.uniform(0.08, 0.7),
        rng.uniform(0.08, 0.7),
    ];
    let c1: [f32; 3] = [
        rng.uniform(0.08, 0.7),
        rng.uniform(0.08, 0.7),
        rng.uniform(0.08, 0.7),
    ];
    let variant = rng.below(3);
    let mut img = Image::zeros(height, width, 3);
    match variant {
        0 => {
            // value noise on a coarse grid, bilinearly upsampled
            let gn = 8usize;
            let grid: Vec<f32> = (0..gn * gn).map(|_| rng.uniform(0.0, 1.0)).collect();
            let coarse = Image::new(gn, gn, 1, grid).expect("consistent extents");
            let fine = coarse.resize_bilinear(height, width);
            for y in 0..height {
                for x in 0..width {
                    let t = fine.at(y, x, 0);
                    for c in 0..3 {
                        img.set(y, x, c, c0[c] + (c1[c] - c0[c]) * t);
                    }
                }
            }
        }
        1 => {
            let theta: f64 = rng.uniform(0.0, std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..height {
                for x in 0..width {
                    let t = ((x as f64 / width as f64) * dx + (y as f64 / height as f64) * dy)
                        .clamp(0.0, 1.0) as f32;
                    for c in 0..3 {
                        img.set(y, x, c, c0[c] + (c1[c] - c0[c]) * t);
                    }
                }
            }
        }
        _ => {
            let k: f64 = rng.uniform(4.0, 12.0);
            let theta: f64 = rng.uniform(0.0, std::f64::consts::PI);
            let (dx, dy) = (theta.cos(), theta.sin());
            for y in 0..height {
                for x in 0..width {
                    let t = (std::f64::consts::TAU
                        * k
                        * ((x as f64 / width as f64) * dx + (y as f64 / height as f64) * dy))
                        .sin();
                    let t = (0.5 + 0.5 * t) as f32;
                    for c in 0..3 {
                        img.set(y, x, c, c0[c] + (c1[c] - c0[c]) * t);
                    }
                }
            }
        }
    }
    img
}

/// Swaps the background of a distorted sample for a fresh texture; used as
/// segmentation training augmentation.
pub fn replace_background(img: &Image, mask: &DocMask, bg_seed: u64) -> Result<Image> {
    if img.height() != mask.height || img.width() != mask.width {
        return Err(Error::dim("replace_background: extent mismatch"));
    }
    let bg = gen_background(bg_seed, img.height(), img.width());
    let mut out = img.clone();
    let c = img.channels();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            for ch in 0..c {
                out.data_mut()[i * c + ch] = bg.data()[i * c + ch];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// sample assembly
// ---------------------------------------------------------------------------

/// One synthetic training tuple.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub distorted: Image,
    pub map: BackwardMap,
    pub mask: DocMask,
    pub clean: Image,
    pub shading: Image,
    pub text: String,
}

/// Minimum MS-SSIM of the ground-truth round trip before a record is
/// accepted.
const RECORD_ROUNDTRIP_MIN: f64 = 0.9;

/// Renders, warps, shades, and composites one full sample. The record's
/// round-trip invariant is verified before returning.
pub fn gen_sample(seed: u64) -> Result<SampleRecord> {
    let mut rng = Rng::new(seed);
    let page_seed = rng.split().next_u64();
    let (clean, text) = render_document(page_seed);
    let params = WarpParams::sample(&mut rng);
    let f = checked_warp_fn(&params)?;
    let map = {
        let mut data = Vec::with_capacity(PAGE * PAGE * 2);
        for i in 0..PAGE {
            let y = i as f64 / (PAGE - 1) as f64;
            for j in 0..PAGE {
                let x = j as f64 / (PAGE - 1) as f64;
                let (u, v) = f.eval(x, y);
                data.push(u as f32);
                data.push(v as f32);
            }
        }
        BackwardMap::new(PAGE, PAGE, data)?
    };
    let shading = gen_shading(rng.split().next_u64(), PAGE, PAGE);
    let background = gen_background(rng.split().next_u64(), PAGE, PAGE);
    let mut distorted = background.clone();
    let mut mask_data = vec![0u8; PAGE * PAGE];
    for y in 0..PAGE {
        let ty = y as f64 / (PAGE - 1) as f64;
        for x in 0..PAGE {
            let tx = x as f64 / (PAGE - 1) as f64;
            let (sx, sy, ok) = f.invert(tx, ty);
            if ok && (0.0..=1.0).contains(&sx) && (0.0..=1.0).contains(&sy) {
                mask_data[y * PAGE + x] = 1;
                let px = crate::fields::bilinear_sample(
                    &clean,
                    sx * (PAGE - 1) as f64,
                    sy * (PAGE - 1) as f64,
                );
                let shade = shading.at(y, x, 0);
                for c in 0..3 {
                    distorted.set(y, x, c, (px[c] * shade).clamp(0.0, 1.0));
                }
            }
        }
    }
    let mask = DocMask {
        height: PAGE,
        width: PAGE,
        data: mask_data,
    };
    let area = mask.area_fraction();
    if !(0.2..=0.95).contains(&area) {
        return Err(Error::numeric(format!(
            "sample {seed}: document covers {:.1}% of the frame",
            area * 100.0
        )));
    }
    let reconstructed = warp_image(&distorted, &map)?;
    let quality = ms_ssim(&reconstructed, &clean, &MsSsimParams::default())?;
    if quality < RECORD_ROUNDTRIP_MIN {
        return Err(Error::numeric(format!(
            "sample {seed}: ground-truth round trip MS-SSIM {quality:.3} below {RECORD_ROUNDTRIP_MIN}"
        )));
    }
    Ok(SampleRecord {
        distorted,
        map,
        mask,
        clean,
        shading,
        text,
    })
}

// ---------------------------------------------------------------------------
// dataset directory layout
// ---------------------------------------------------------------------------

/// Sample loaded back from disk (the shading field is not persisted).
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub index: usize,
    pub seed: u64,
    pub distorted: Image,
    pub map: BackwardMap,
    pub mask: DocMask,
    pub clean: Image,
    pub text: String,
}

/// Writes `NNNNNN.img.ppm`, `NNNNNN.bmap`, `NNNNNN.mask.pgm`,
/// `NNNNNN.clean.ppm`, `NNNNNN.txt` per record plus `manifest.tsv`.
pub fn write_dataset(dir: impl AsRef<Path>, records: &[(u64, SampleRecord)]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, (seed, rec)) in records.iter().enumerate() {
        let stem = format!("{i:06}");
        crate::image::save_ppm(&rec.distorted, dir.join(format!("{stem}.img.ppm")))?;
        crate::fields::save_bmap(&rec.map, dir.join(format!("{stem}.bmap")))?;
        crate::image::save_ppm(&rec.mask.to_image(), dir.join(format!("{stem}.mask.pgm")))?;
        crate::image::save_ppm(&rec.clean, dir.join(format!("{stem}.clean.ppm")))?;
        fs::write(dir.join(format!("{stem}.txt")), &rec.text)?;
        manifest.push_str(&format!("{stem}\t{seed}\n"));
    }
    fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<LoadedSample>> {
    let dir = dir.as_ref();
    let manifest = fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| Error::data(format!("{}: {e}", dir.join("manifest.tsv").display())))?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        if line.is_empty() {
            continue;
        }
        let (stem, seed) = line
            .split_once('\t')
            .ok_or_else(|| Error::data(format!("malformed manifest line {line:?}")))?;
        let index: usize = stem
            .parse()
            .map_err(|_| Error::data(format!("bad sample stem {stem:?}")))?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::data(format!("bad seed in manifest line {line:?}")))?;
        let distorted = crate::image::load_ppm(dir.join(format!("{stem}.img.ppm")))?;
        let map = crate::fields::load_bmap(dir.join(format!("{stem}.bmap")))?;
        let mask = DocMask::from_image(&crate::image::load_ppm(
            dir.join(format!("{stem}.mask.pgm")),
        )?)?;
        let clean = crate::image::load_ppm(dir.join(format!("{stem}.clean.ppm")))?;
        let text = fs::read_to_string(dir.join(format!("{stem}.txt")))
            .map_err(|e| Error::data(format!("{stem}.txt: {e}")))?;
        out.push(LoadedSample {
            index,
            seed,
            distorted,
            map,
            mask,
            clean,
            text,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::identity_map;

    #[test]
    fn render_is_deterministic() {
        let (a, ta) = render_document(42);
        let (b, tb) = render_document(42);
        assert_eq!(a.data(), b.data());
        assert_eq!(ta, tb);
        let (_, tc) = render_document(43);
        assert_ne!(ta, tc);
    }

    #[test]
    fn rendered_text_decodes_exactly() {
        for seed in [1u64, 7, 99] {
            let (page, text) = render_document(seed);
            assert!(!text.is_empty());
            assert_eq!(decode_text(&page), text, "seed {seed}");
        }
    }

    #[test]
    fn page_margins_at_least_four_percent() {
        let (page, _) = render_document(5);
        let gray = page.to_gray();
        let limit = (0.04 * PAGE as f64) as usize;
        for y in 0..PAGE {
            for x in 0..PAGE {
                if gray.at(y, x, 0) < 0.5 {
                    assert!(y >= limit && y < PAGE - limit, "ink at row {y}");
                    assert!(x >= limit && x < PAGE - limit, "ink at col {x}");
                }
            }
        }
    }

    #[test]
    fn zero_amplitudes_give_identity_map() {
        let map = gen_warp(&WarpParams::identity(), 32, 32).unwrap();
        let id = identity_map(32, 32);
        for (a, b) in map.data().iter().zip(id.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn pure_horizontal_fold_keeps_v_identity() {
        let params = WarpParams {
            seed: 11,
            perspective: 0.0,
            folds: 2,
            fold_amp_u: 0.03,
            fold_amp_v: 0.0,
            curl: 0.0,
        };
        let map = gen_warp(&params, 24, 24).unwrap();
        let id = identity_map(24, 24);
        let mut u_moved = false;
        for y in 0..24 {
            for x in 0..24 {
                assert!((map.v(y, x) - id.v(y, x)).abs() < 1e-6);
                if (map.u(y, x) - id.u(y, x)).abs() > 1e-4 {
                    u_moved = true;
                }
            }
        }
        assert!(u_moved, "horizontal fold should displace u");
    }

    #[test]
    fn warp_inversion_round_trip() {
        let mut rng = Rng::new(3);
        let params = WarpParams::sample(&mut rng);
        let f = checked_warp_fn(&params).unwrap();
        let mut sq_sum = 0.0f64;
        let n = 64usize;
        for i in 0..n {
            for j in 0..n {
                let x = j as f64 / (n - 1) as f64;
                let y = i as f64 / (n - 1) as f64;
                let (tx, ty) = f.eval(x, y);
                let (bx, by, ok) = f.invert(tx, ty);
                assert!(ok);
                let dx = (bx - x) * (PAGE - 1) as f64;
                let dy = (by - y) * (PAGE - 1) as f64;
                sq_sum += dx * dx + dy * dy;
            }
        }
        let rms = (sq_sum / (n * n) as f64).sqrt();
        assert!(rms < 0.5, "inversion RMS {rms} px");
    }

    #[test]
    fn sampled_warps_have_positive_jacobian() {
        let mut rng = Rng::new(9);
        for _ in 0..5 {
            let params = WarpParams::sample(&mut rng);
            let f = checked_warp_fn(&params).unwrap();
            assert!(f.min_jacobian() > 0.05);
        }
    }

    #[test]
    fn shading_range_and_determinism() {
        let a = gen_shading(7, 64, 64);
        let b = gen_shading(7, 64, 64);
        assert_eq!(a.data(), b.data());
        for &v in a.data() {
            assert!((0.4..=1.0).contains(&v));
        }
    }

    #[test]
    fn shading_gradient_bounded() {
        let s = gen_shading(13, PAGE, PAGE);
        for y in 0..PAGE {
            for x in 1..PAGE {
                let d = (s.at(y, x, 0) - s.at(y, x - 1, 0)).abs();
                assert!(d < 0.05, "gradient {d} at ({y},{x})");
            }
        }
        for y in 1..PAGE {
            for x in 0..PAGE {
                let d = (s.at(y, x, 0) - s.at(y - 1, x, 0)).abs();
                assert!(d < 0.05, "gradient {d} at ({y},{x})");
            }
        }
    }

    #[test]
    fn sample_round_trip_and_mask_area() {
        let rec = gen_sample(21).unwrap();
        let area = rec.mask.area_fraction();
        assert!((0.2..=0.95).contains(&area), "area {area}");
        let reconstructed = warp_image(&rec.distorted, &rec.map).unwrap();
        let q = ms_ssim(&reconstructed, &rec.clean, &MsSsimParams::default()).unwrap();
        assert!(q > 0.9, "round trip MS-SSIM {q}");
    }

    #[test]
    fn sample_determinism_and_distinctness() {
        let a = gen_sample(5).unwrap();
        let b = gen_sample(5).unwrap();
        assert_eq!(a.distorted.data(), b.distorted.data());
        assert_eq!(a.text, b.text);
        let c = gen_sample(6).unwrap();
        assert_ne!(a.distorted.data(), c.distorted.data());
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn dataset_write_read_round_trip() {
        let dir = std::env::temp_dir().join("doctr_synth_test_ds");
        let _ = std::fs::remove_dir_all(&dir);
        let rec = gen_sample(31).unwrap();
        write_dataset(&dir, &[(31, rec.clone())]).unwrap();
        let loaded = read_dataset(&dir).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].seed, 31);
        assert_eq!(loaded[0].text, rec.text);
        assert_eq!(loaded[0].map, rec.map);
        assert_eq!(loaded[0].mask, rec.mask);
    }
}
