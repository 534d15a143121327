//! Illumination correction.
//!
//! The unwarped document is cut into overlapping patches; each patch runs
//! through a resolution-preserving conv head, mini-patch flattening, the same
//! encoder-decoder structure as the unwarper, and a single-conv tail squashed
//! to [0, 1]. Corrected patches are stitched back with feathered blending.

use crate::checkpoint::{Checkpoint, ParamSet};
use crate::geotr::{decode, encode};
use crate::image::Image;
use crate::nn::{self, Bound};
use crate::numerics::{Graph, Real, Rng, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct IllConfig {
    /// Square patch extent H_p = W_p.
    pub patch: usize,
    /// Mini-patch extent P; the transformer token width is ci * P^2.
    pub mini: usize,
    /// Head output channels c_i.
    pub ci: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Fraction of the patch shared with its neighbor, in [0, 0.5).
    pub overlap: f64,
    /// Weight of the perceptual term in the loss.
    pub alpha: f64,
    pub use_encoder: bool,
    pub use_decoder: bool,
}

impl Default for IllConfig {
    fn default() -> Self {
        IllConfig {
            patch: 128,
            mini: 4,
            ci: 16,
            depth: 6,
            heads: 8,
            ffn_width: 1024,
            overlap: 0.125,
            alpha: 1e-5,
            use_encoder: true,
            use_decoder: true,
        }
    }
}

impl IllConfig {
    pub fn tiny() -> Self {
        IllConfig {
            patch: 24,
            mini: 6,
            ci: 8,
            depth: 1,
            heads: 4,
            ffn_width: 256,
            ..IllConfig::default()
        }
    }

    pub fn micro() -> Self {
        IllConfig {
            patch: 8,
            mini: 2,
            ci: 4,
            depth: 1,
            heads: 2,
            ffn_width: 32,
            ..IllConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mini == 0 || self.patch == 0 || self.patch % self.mini != 0 {
            return Err(Error::config(format!(
                "patch {} must be a positive multiple of mini-patch {}",
                self.patch, self.mini
            )));
        }
        if !(0.0..0.5).contains(&self.overlap) {
            return Err(Error::config(format!(
                "overlap {} outside [0, 0.5)",
                self.overlap
            )));
        }
        let cw = self.token_width();
        if self.heads == 0 || cw % self.heads != 0 {
            return Err(Error::config(format!(
                "token width {cw} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }

    /// Transformer channel width c_i' = ci * P^2.
    pub fn token_width(&self) -> usize {
        self.ci * self.mini * self.mini
    }

    /// Tokens per patch: (H_p / P)^2.
    pub fn tokens(&self) -> usize {
        let m = self.patch / self.mini;
        m * m
    }

    /// Crop stride: patch minus the rounded overlap.
    pub fn stride(&self) -> usize {
        self.patch - (self.overlap * self.patch as f64).round() as usize
    }
}

/// Grid of crop rectangles over a source image, with the padded extent used
/// when the source is smaller than one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLayout {
    pub src_height: usize,
    pub src_width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub patch: usize,
    /// Patch origins (y, x), row-major.
    pub rects: Vec<(usize, usize)>,
}

fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    loop {
        if pos + patch >= extent {
            let last = extent - patch;
            if out.last() != Some(&last) {
                out.push(last);
            }
            break;
        }
        out.push(pos);
        pos += stride.max(1);
    }
    out
}

/// Replicates edge pixels so the image is at least `patch` in each extent.
fn pad_replicate(img: &Image, min_h: usize, min_w: usize) -> Image {
    let h = img.height().max(min_h);
    let w = img.width().max(min_w);
    if h == img.height() && w == img.width() {
        return img.clone();
    }
    let c = img.channels();
    let mut out = Image::zeros(h, w, c);
    for y in 0..h {
        let sy = y.min(img.height() - 1);
        for x in 0..w {
            let sx = x.min(img.width() - 1);
            for ch in 0..c {
                out.set(y, x, ch, img.at(sy, sx, ch));
            }
        }
    }
    out
}

/// Cuts an image into overlapping patches of the configured extent. Inputs
/// smaller than one patch are edge-padded by replication first.
pub fn crop_patches(img: &Image, cfg: &IllConfig) -> Result<(Vec<Image>, PatchLayout)> {
    cfg.validate()?;
    if img.height() == 0 || img.width() == 0 {
        return Err(Error::arg("crop_patches: empty image"));
    }
    let p = cfg.patch;
    let padded = pad_replicate(img, p, p);
    let stride = cfg.stride();
    let ys = axis_origins(padded.height(), p, stride);
    let xs = axis_origins(padded.width(), p, stride);
    let mut rects = Vec::with_capacity(ys.len() * xs.len());
    let mut patches = Vec::with_capacity(ys.len() * xs.len());
    let c = img.channels();
    for &y in &ys {
        for &x in &xs {
            rects.push((y, x));
            let mut data = Vec::with_capacity(p * p * c);
            for py in 0..p {
                let row = ((y + py) * padded.width() + x) * c;
                data.extend_from_slice(&padded.data()[row..row + p * c]);
            }
            patches.push(Image::new(p, p, c, data)?);
        }
    }
    Ok((
        patches,
        PatchLayout {
            src_height: img.height(),
            src_width: img.width(),
            padded_height: padded.height(),
            padded_width: padded.width(),
            patch: p,
            rects,
        },
    ))
}

/// Feathering weight along one axis: a tent peaking mid-patch, strictly
/// positive so normalization is always well defined.
#[inline]
fn tent(t: usize, patch: usize) -> f32 {
    ((t + 1).min(patch - t)) as f32
}

/// Per-patch normalized blend weights over the padded extent.
pub fn blend_weights(layout: &PatchLayout) -> Vec<Vec<f32>> {
    let (h, w, p) = (layout.padded_height, layout.padded_width, layout.patch);
    let mut total = vec![0.0f32; h * w];
    for &(oy, ox) in &layout.rects {
        for py in 0..p {
            for px in 0..p {
                total[(oy + py) * w + ox + px] += tent(py, p) * tent(px, p);
            }
        }
    }
    layout
        .rects
        .iter()
        .map(|&(oy, ox)| {
            let mut wmap = vec![0.0f32; p * p];
            for py in 0..p {
                for px in 0..p {
                    wmap[py * p + px] =
                        tent(py, p) * tent(px, p) / total[(oy + py) * w + ox + px];
                }
            }
            wmap
        })
        .collect()
}

/// Reassembles patches into the source image. Overlaps blend with linear
/// feathering ramps; per-pixel blend weights sum to one.
pub fn stitch(patches: &[Image], layout: &PatchLayout) -> Result<Image> {
    if patches.len() != layout.rects.len() {
        return Err(Error::arg(format!(
            "stitch: {} patches for {} rectangles",
            patches.len(),
            layout.rects.len()
        )));
    }
    let p = layout.patch;
    let c = patches
        .first()
        .map(Image::channels)
        .ok_or_else(|| Error::arg("stitch: no patches"))?;
    for patch in patches {
        if patch.height() != p || patch.width() != p || patch.channels() != c {
            return Err(Error::dim("stitch: patch extent mismatch"));
        }
    }
    let (h, w) = (layout.padded_height, layout.padded_width);
    let weights = blend_weights(layout);
    let mut acc = vec![0.0f32; h * w * c];
    for (patch, (wmap, &(oy, ox))) in patches.iter().zip(weights.iter().zip(&layout.rects)) {
        for py in 0..p {
            for px in 0..p {
                let wgt = wmap[py * p + px];
                let dst = ((oy + py) * w + ox + px) * c;
                for ch in 0..c {
                    acc[dst + ch] += wgt * patch.at(py, px, ch);
                }
            }
        }
    }
    let padded = Image::new(h, w, c, acc)?;
    if h == layout.src_height && w == layout.src_width {
        return Ok(padded);
    }
    // drop the replication padding
    let mut out = Image::zeros(layout.src_height, layout.src_width, c);
    for y in 0..layout.src_height {
        for x in 0..layout.src_width {
            for ch in 0..c {
                out.set(y, x, ch, padded.at(y, x, ch));
            }
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct IllModel<T> {
    pub cfg: IllConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> IllModel<T> {
    pub fn new(cfg: IllConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let ci = cfg.ci;
        let cw = cfg.token_width();
        let n = cfg.tokens();
        let mut p = ParamSet::new();
        nn::add_conv(&mut p, rng, "head.c1", 3, 3, 3, ci)?;
        nn::add_conv(&mut p, rng, "head.c2", 3, 3, ci, ci)?;
        nn::add_conv(&mut p, rng, "head.c3", 3, 3, ci, ci)?;
        p.add("ep", nn::embedding_init_scaled(rng, n, cw, 1.0))?;
        if cfg.use_encoder {
            for i in 0..cfg.depth {
                let pre = format!("enc{i}");
                nn::add_attn(&mut p, rng, &format!("{pre}.attn"), cw)?;
                nn::add_norm(&mut p, &format!("{pre}.ln1"), cw)?;
                nn::add_ffn(&mut p, rng, &format!("{pre}.ffn"), cw, cfg.ffn_width)?;
                nn::add_norm(&mut p, &format!("{pre}.ln2"), cw)?;
            }
        }
        if cfg.use_decoder {
            p.add("ed", nn::embedding_init_scaled(rng, n, cw, 1.0))?;
            for i in 0..cfg.depth {
                let pre = format!("dec{i}");
                nn::add_attn(&mut p, rng, &format!("{pre}.self"), cw)?;
                nn::add_norm(&mut p, &format!("{pre}.ln1"), cw)?;
                nn::add_attn(&mut p, rng, &format!("{pre}.cross"), cw)?;
                // start cross-attention keys aligned with queries and scale
                // both up: with the strong position embeddings the aligned
                // logit then dominates the softmax, so attention starts
                // near-diagonal and patch content flows from the first step
                // instead of averaging out
                let mut wq = p.get(&format!("{pre}.cross.wq"))?.clone();
                for v in wq.data_mut() {
                    *v *= T::from_f64(2.0);
                }
                *p.get_mut(&format!("{pre}.cross.wq"))? = wq.clone();
                *p.get_mut(&format!("{pre}.cross.wk"))? = wq;
                nn::add_norm(&mut p, &format!("{pre}.ln2"), cw)?;
                nn::add_ffn(&mut p, rng, &format!("{pre}.ffn"), cw, cfg.ffn_width)?;
                nn::add_norm(&mut p, &format!("{pre}.ln3"), cw)?;
                // damp the residual branches at init so early optimization
                // cannot profit from collapsing output variance
                for name in [
                    format!("{pre}.self.wo"),
                    format!("{pre}.cross.wo"),
                    format!("{pre}.ffn.w2"),
                ] {
                    for v in p.get_mut(&name)?.data_mut() {
                        *v *= T::from_f64(0.2);
                    }
                }
            }
        }
        nn::add_conv(&mut p, rng, "tail.c", 3, 3, ci, 3)?;
        // start inside the clamp's linear zone, near page brightness
        for v in p.get_mut("tail.c.b")?.data_mut() {
            *v = T::from_f64(0.9);
        }
        Ok(IllModel { cfg, params: p })
    }

    /// Corrects one patch: [p, p, 3] in, [p, p, 3] in [0, 1] out.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, patch: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let f_sp = ill_head(g, b, cfg, patch)?;
        let ep = b.v("ep");
        let enc_depth = if cfg.use_encoder { cfg.depth } else { 0 };
        let f_k = encode(g, b, "enc", f_sp, ep, enc_depth, cfg.heads)?;
        let f_d = if cfg.use_decoder {
            let ed = b.v("ed");
            decode(g, b, "dec", f_k, ep, ed, cfg.depth, cfg.heads, false)?
        } else {
            f_k
        };
        let spatial = mini_unflatten(g, cfg, f_d)?;
        let out = b.conv(g, "tail.c", spatial, 1, 1)?;
        g.softclamp01(out, 0.3)
    }

    pub fn append_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.params.iter() {
            ckpt.tensors.add(format!("{prefix}.{name}"), t.cast())?;
        }
        let c = &self.cfg;
        let mut put = |k: &str, v: String| {
            ckpt.config.insert(format!("{prefix}.{k}"), v);
        };
        put("patch", c.patch.to_string());
        put("mini", c.mini.to_string());
        put("ci", c.ci.to_string());
        put("depth", c.depth.to_string());
        put("heads", c.heads.to_string());
        put("ffn_width", c.ffn_width.to_string());
        put("overlap", c.overlap.to_string());
        put("alpha", c.alpha.to_string());
        put("use_encoder", c.use_encoder.to_string());
        put("use_decoder", c.use_decoder.to_string());
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = IllConfig {
            patch: ckpt.config_parse(&format!("{prefix}.patch"))?,
            mini: ckpt.config_parse(&format!("{prefix}.mini"))?,
            ci: ckpt.config_parse(&format!("{prefix}.ci"))?,
            depth: ckpt.config_parse(&format!("{prefix}.depth"))?,
            heads: ckpt.config_parse(&format!("{prefix}.heads"))?,
            ffn_width: ckpt.config_parse(&format!("{prefix}.ffn_width"))?,
            overlap: ckpt.config_parse(&format!("{prefix}.overlap"))?,
            alpha: ckpt.config_parse(&format!("{prefix}.alpha"))?,
            use_encoder: ckpt.config_parse(&format!("{prefix}.use_encoder"))?,
            use_decoder: ckpt.config_parse(&format!("{prefix}.use_decoder"))?,
        };
        let mut model = IllModel::new(cfg, &mut Rng::new(0))?;
        nn::load_params(ckpt, prefix, &mut model.params)?;
        Ok(model)
    }
}

/// Head: 3 convs preserving resolution, then flattening into P x P
/// mini-patches: [p, p, ci] -> [N_i, ci * P^2].
pub fn ill_head<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &IllConfig, patch: Var) -> Result<Var> {
    let p = cfg.patch;
    if g.shape(patch) != [p, p, 3] {
        return Err(Error::dim(format!(
            "ill head expects {p}x{p}x3, got {:?}",
            g.shape(patch)
        )));
    }
    let x = b.conv(g, "head.c1", patch, 1, 1)?;
    let x = g.relu(x);
    let x = b.conv(g, "head.c2", x, 1, 1)?;
    let x = g.relu(x);
    let x = b.conv(g, "head.c3", x, 1, 1)?;
    mini_flatten(g, cfg, x)
}

/// [p, p, ci] -> [N_i, ci * P^2], mini-patches row-major.
pub fn mini_flatten<T: Real>(g: &mut Graph<T>, cfg: &IllConfig, x: Var) -> Result<Var> {
    let (p, pm, ci) = (cfg.patch, cfg.patch / cfg.mini, cfg.ci);
    if g.shape(x) != [p, p, ci] {
        return Err(Error::dim(format!(
            "mini_flatten expects {p}x{p}x{ci}, got {:?}",
            g.shape(x)
        )));
    }
    let v = g.reshape(x, vec![pm, cfg.mini, pm, cfg.mini, ci])?;
    let v = g.permute(v, &[0, 2, 1, 3, 4])?;
    g.reshape(v, vec![pm * pm, cfg.token_width()])
}

/// Inverse of [`mini_flatten`].
pub fn mini_unflatten<T: Real>(g: &mut Graph<T>, cfg: &IllConfig, x: Var) -> Result<Var> {
    let (p, pm, ci) = (cfg.patch, cfg.patch / cfg.mini, cfg.ci);
    if g.shape(x) != [pm * pm, cfg.token_width()] {
        return Err(Error::dim(format!(
            "mini_unflatten expects [{}, {}], got {:?}",
            pm * pm,
            cfg.token_width(),
            g.shape(x)
        )));
    }
    let v = g.reshape(x, vec![pm, pm, cfg.mini, cfg.mini, ci])?;
    let v = g.permute(v, &[0, 2, 1, 3, 4])?;
    g.reshape(v, vec![p, p, ci])
}

/// Fixed seeded conv stack standing in for a pretrained perceptual network.
/// Three stride-2 stages of two convs; taps after the ReLU of each stage.
#[derive(Debug)]
pub struct PerceptualExtractor<T> {
    pub params: ParamSet<T>,
}

const PERCEPTUAL_CHANNELS: [usize; 3] = [8, 16, 32];

impl<T: Real> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (s, &cout) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            nn::add_conv(&mut p, &mut rng, &format!("s{s}.c1"), 3, 3, cin, cout)
                .expect("fresh names");
            nn::add_conv(&mut p, &mut rng, &format!("s{s}.c2"), 3, 3, cout, cout)
                .expect("fresh names");
            cin = cout;
        }
        PerceptualExtractor { params: p }
    }

    /// Feature maps at the three tap depths; gradients flow into the image
    /// but never into the fixed weights.
    pub fn features(&self, g: &mut Graph<T>, image: Var) -> Result<Vec<Var>> {
        if g.shape(image).len() != 3 || g.shape(image)[2] != 3 {
            return Err(Error::dim("perceptual extractor expects an HWC 3-channel input"));
        }
        let b = nn::bind(g, &self.params, false);
        let mut taps = Vec::with_capacity(3);
        let mut x = image;
        for s in 0..PERCEPTUAL_CHANNELS.len() {
            let y = b.conv(g, &format!("s{s}.c1"), x, 2, 1)?;
            let y = g.relu(y);
            let y = b.conv(g, &format!("s{s}.c2"), y, 1, 1)?;
            let y = g.relu(y);
            taps.push(y);
            x = y;
        }
        Ok(taps)
    }
}

/// Illumination checkpoint: model weights, config, and the extractor seed
/// (the extractor itself is re-derived, never stored).
pub fn save_ill_checkpoint(
    path: impl AsRef<std::path::Path>,
    model: &IllModel<f32>,
    extractor_seed: u64,
    extra: &[(String, String)],
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    model.append_to(&mut ckpt, "ill")?;
    ckpt.config
        .insert("ill.extractor_seed".into(), extractor_seed.to_string());
    for (k, v) in extra {
        ckpt.config.insert(k.clone(), v.clone());
    }
    crate::checkpoint::save_checkpoint(&ckpt, path)
}

pub fn load_ill_checkpoint(
    path: impl AsRef<std::path::Path>,
) -> Result<(IllModel<f32>, u64, Checkpoint)> {
    let ckpt = crate::checkpoint::load_checkpoint(path)?;
    let model = IllModel::from_checkpoint(&ckpt, "ill")?;
    let seed: u64 = ckpt.config_parse("ill.extractor_seed")?;
    Ok((model, seed, ckpt))
}

/// Corrects a full image: crop into overlapping patches, run each through
/// the model, and stitch with feathered blending.
pub fn correct_image(img: &Image, model: &IllModel<f32>) -> Result<Image> {
    let (patches, layout) = crop_patches(img, &model.cfg)?;
    let corrected: Vec<Result<Image>> = {
        use rayon::prelude::*;
        patches
            .par_iter()
            .map(|patch| {
                let mut g = Graph::<f32>::new();
                let b = nn::bind(&mut g, &model.params, false);
                let x = g.input(patch.to_tensor());
                let out = model.forward(&mut g, &b, x)?;
                Image::from_tensor(g.value(out))
            })
            .collect()
    };
    let corrected: Result<Vec<Image>> = corrected.into_iter().collect();
    stitch(&corrected?, &layout)
}

/// L1 reconstruction plus alpha-weighted perceptual distance over the
/// extractor's tap features.
pub fn ill_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    gt: Var,
    alpha: f64,
    extractor: &PerceptualExtractor<T>,
) -> Result<Var> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::dim(format!(
            "ill_loss extents differ: {:?} vs {:?}",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    let mut loss = g.l1(pred, gt)?;
    if alpha != 0.0 {
        let fp = extractor.features(g, pred)?;
        let fg = extractor.features(g, gt)?;
        let mut per = None;
        for (a, b) in fp.into_iter().zip(fg) {
            let term = g.l1(a, b)?;
            per = Some(match per {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        if let Some(per) = per {
            let scaled = g.scale(per, T::from_f64(alpha));
            loss = g.add(loss, scaled)?;
        }
    }
    Ok(loss)
}
