//! Geometric unwarping transformer.
//!
//! Head: six residual conv blocks downsampling to 1/8 resolution, projected
//! to `cg` channels and flattened row-major into a token sequence. Body: a
//! K-layer self-attention encoder and a K-layer parallel decoder driven by a
//! learned query embedding. Tail: two conv pairs regress a coarse coordinate
//! field and per-pixel convex upsampling masks; the upsampled field is the
//! backward map. The full `unwarp` pipeline wires segmentation, background
//! removal, map prediction, and bilinear warping together.

use crate::checkpoint::{Checkpoint, ParamSet};
use crate::fields::{resize_map, warp_image, BackwardMap};
use crate::image::Image;
use crate::nn::{self, Bound};
use crate::numerics::{feed_forward, multi_head_attention, Graph, Real, Rng, Var};
use crate::segmenter::{binarize, remove_background, segment, DocMask, SegModel};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GeoConfig {
    /// Square working resolution H0 = W0; divisible by 8.
    pub input_size: usize,
    /// Token width c_g after the head.
    pub cg: usize,
    /// Encoder and decoder depth K.
    pub depth: usize,
    /// Attention heads M (per-head width is cg / M).
    pub heads: usize,
    /// Hidden width of the feed-forward blocks.
    pub ffn_width: usize,
    /// Channels of the three downsampling block pairs in the head.
    pub head_channels: [usize; 3],
    /// Ablation switches.
    pub use_encoder: bool,
    pub use_decoder: bool,
    pub learned_upsample: bool,
    /// Second decoder residual reads Y'_i instead of Y_{i-1}.
    pub decoder_residual_alt: bool,
}

impl Default for GeoConfig {
    fn default() -> Self {
        GeoConfig {
            input_size: 288,
            cg: 512,
            depth: 6,
            heads: 8,
            ffn_width: 2048,
            head_channels: [64, 128, 256],
            use_encoder: true,
            use_decoder: true,
            learned_upsample: true,
            decoder_residual_alt: false,
        }
    }
}

impl GeoConfig {
    /// Desk-scale configuration for overfit runs and smoke training.
    pub fn tiny() -> Self {
        GeoConfig {
            input_size: 64,
            cg: 64,
            depth: 2,
            heads: 4,
            ffn_width: 128,
            head_channels: [12, 16, 24],
            ..GeoConfig::default()
        }
    }

    /// Smallest usable configuration, for gradient checks.
    pub fn micro() -> Self {
        GeoConfig {
            input_size: 16,
            cg: 8,
            depth: 1,
            heads: 2,
            ffn_width: 16,
            head_channels: [4, 5, 6],
            ..GeoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::config(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.heads == 0 || self.cg % self.heads != 0 {
            return Err(Error::config(format!(
                "cg {} must be divisible by heads {}",
                self.cg, self.heads
            )));
        }
        if self.ffn_width == 0 || self.head_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("zero extent in geo config"));
        }
        Ok(())
    }

    /// Tokens per image: (H0/8)^2.
    pub fn tokens(&self) -> usize {
        let s = self.input_size / 8;
        s * s
    }

    pub fn coarse_extent(&self) -> usize {
        self.input_size / 8
    }
}

#[derive(Debug)]
pub struct GeoModel<T> {
    pub cfg: GeoConfig,
    pub params: ParamSet<T>,
}

/// Outputs of a full forward pass.
pub struct GeoForward {
    /// Backward map at working resolution [S, S, 2].
    pub map: Var,
    /// Coarse field before upsampling [S/8, S/8, 2].
    pub coarse: Var,
}

impl<T: Real> GeoModel<T> {
    pub fn new(cfg: GeoConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.head_channels;
        let mut p = ParamSet::new();
        let plan = [(3, c1, 2), (c1, c1, 1), (c1, c2, 2), (c2, c2, 1), (c2, c3, 2), (c3, c3, 1)];
        for (i, &(cin, cout, stride)) in plan.iter().enumerate() {
            let pre = format!("head.b{i}");
            nn::add_conv(&mut p, rng, &format!("{pre}.c1"), 3, 3, cin, cout)?;
            nn::add_norm(&mut p, &format!("{pre}.n1"), cout)?;
            nn::add_conv(&mut p, rng, &format!("{pre}.c2"), 3, 3, cout, cout)?;
            nn::add_norm(&mut p, &format!("{pre}.n2"), cout)?;
            if stride != 1 || cin != cout {
                nn::add_conv(&mut p, rng, &format!("{pre}.skip"), 1, 1, cin, cout)?;
            }
        }
        nn::add_conv(&mut p, rng, "head.proj", 3, 3, c3, cfg.cg)?;
        let n = cfg.tokens();
        p.add("ep", nn::embedding_init(rng, n, cfg.cg))?;
        if cfg.use_encoder {
            for i in 0..cfg.depth {
                let pre = format!("enc{i}");
                nn::add_attn(&mut p, rng, &format!("{pre}.attn"), cfg.cg)?;
                nn::add_norm(&mut p, &format!("{pre}.ln1"), cfg.cg)?;
                nn::add_ffn(&mut p, rng, &format!("{pre}.ffn"), cfg.cg, cfg.ffn_width)?;
                nn::add_norm(&mut p, &format!("{pre}.ln2"), cfg.cg)?;
            }
        }
        if cfg.use_decoder {
            p.add("ed", nn::embedding_init(rng, n, cfg.cg))?;
            for i in 0..cfg.depth {
                let pre = format!("dec{i}");
                nn::add_attn(&mut p, rng, &format!("{pre}.self"), cfg.cg)?;
                nn::add_norm(&mut p, &format!("{pre}.ln1"), cfg.cg)?;
                nn::add_attn(&mut p, rng, &format!("{pre}.cross"), cfg.cg)?;
                nn::add_norm(&mut p, &format!("{pre}.ln2"), cfg.cg)?;
                nn::add_ffn(&mut p, rng, &format!("{pre}.ffn"), cfg.cg, cfg.ffn_width)?;
                nn::add_norm(&mut p, &format!("{pre}.ln3"), cfg.cg)?;
            }
        }
        let mid = (cfg.cg / 2).max(2);
        nn::add_conv(&mut p, rng, "tail.flow.c1", 3, 3, cfg.cg, mid)?;
        nn::add_conv(&mut p, rng, "tail.flow.c2", 3, 3, mid, 2)?;
        // start the predicted field at the page center
        for v in p.get_mut("tail.flow.c2.b")?.data_mut() {
            *v = T::from_f64(0.5);
        }
        if cfg.learned_upsample {
            nn::add_conv(&mut p, rng, "tail.mask.c1", 3, 3, cfg.cg, mid)?;
            nn::add_conv(&mut p, rng, "tail.mask.c2", 1, 1, mid, 576)?;
        }
        Ok(GeoModel { cfg, params: p })
    }

    /// Full forward: background-excluded [S, S, 3] image to backward map.
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, image: Var) -> Result<GeoForward> {
        let cfg = &self.cfg;
        let f_s = geo_head(g, b, cfg, image)?;
        let ep = b.v("ep");
        let enc_depth = if cfg.use_encoder { cfg.depth } else { 0 };
        let f_k = encode(g, b, "enc", f_s, ep, enc_depth, cfg.heads)?;
        let f_d = if cfg.use_decoder {
            let ed = b.v("ed");
            decode(
                g,
                b,
                "dec",
                f_k,
                ep,
                ed,
                cfg.depth,
                cfg.heads,
                cfg.decoder_residual_alt,
            )?
        } else {
            f_k
        };
        geo_tail(g, b, cfg, f_d)
    }

    pub fn append_to(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.params.iter() {
            ckpt.tensors.add(format!("{prefix}.{name}"), t.cast())?;
        }
        let c = &self.cfg;
        let mut put = |k: &str, v: String| {
            ckpt.config.insert(format!("{prefix}.{k}"), v);
        };
        put("input_size", c.input_size.to_string());
        put("cg", c.cg.to_string());
        put("depth", c.depth.to_string());
        put("heads", c.heads.to_string());
        put("ffn_width", c.ffn_width.to_string());
        put("head_c1", c.head_channels[0].to_string());
        put("head_c2", c.head_channels[1].to_string());
        put("head_c3", c.head_channels[2].to_string());
        put("use_encoder", c.use_encoder.to_string());
        put("use_decoder", c.use_decoder.to_string());
        put("learned_upsample", c.learned_upsample.to_string());
        put("decoder_residual_alt", c.decoder_residual_alt.to_string());
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = GeoConfig {
            input_size: ckpt.config_parse(&format!("{prefix}.input_size"))?,
            cg: ckpt.config_parse(&format!("{prefix}.cg"))?,
            depth: ckpt.config_parse(&format!("{prefix}.depth"))?,
            heads: ckpt.config_parse(&format!("{prefix}.heads"))?,
            ffn_width: ckpt.config_parse(&format!("{prefix}.ffn_width"))?,
            head_channels: [
                ckpt.config_parse(&format!("{prefix}.head_c1"))?,
                ckpt.config_parse(&format!("{prefix}.head_c2"))?,
                ckpt.config_parse(&format!("{prefix}.head_c3"))?,
            ],
            use_encoder: ckpt.config_parse(&format!("{prefix}.use_encoder"))?,
            use_decoder: ckpt.config_parse(&format!("{prefix}.use_decoder"))?,
            learned_upsample: ckpt.config_parse(&format!("{prefix}.learned_upsample"))?,
            decoder_residual_alt: ckpt.config_parse(&format!("{prefix}.decoder_residual_alt"))?,
        };
        let mut model = GeoModel::new(cfg, &mut Rng::new(0))?;
        nn::load_params(ckpt, prefix, &mut model.params)?;
        Ok(model)
    }
}

/// Residual conv block: conv-norm-relu, conv-norm, skip, relu.
fn res_block<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let y = b.conv(g, &format!("{prefix}.c1"), x, stride, 1)?;
    let y = b.inorm(g, &format!("{prefix}.n1"), y)?;
    let y = g.relu(y);
    let y = b.conv(g, &format!("{prefix}.c2"), y, 1, 1)?;
    let y = b.inorm(g, &format!("{prefix}.n2"), y)?;
    let skip = if b.try_v(&format!("{prefix}.skip.k")).is_ok() {
        b.conv(g, &format!("{prefix}.skip"), x, stride, 0)?
    } else {
        x
    };
    let sum = g.add(y, skip)?;
    Ok(g.relu(sum))
}

/// Head: six residual blocks (downsampling 1/2 every two) then a 3x3
/// projection to cg channels, flattened row-major to [N_g, cg].
pub fn geo_head<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &GeoConfig,
    image: Var,
) -> Result<Var> {
    let s = cfg.input_size;
    if g.shape(image) != [s, s, 3] {
        return Err(Error::dim(format!(
            "geo head expects {s}x{s}x3, got {:?}",
            g.shape(image)
        )));
    }
    let mut x = image;
    for (i, stride) in [2usize, 1, 2, 1, 2, 1].iter().enumerate() {
        x = res_block(g, b, &format!("head.b{i}"), x, *stride)?;
    }
    let x = b.conv(g, "head.proj", x, 1, 1)?;
    let h = cfg.coarse_extent();
    g.reshape(x, vec![h * h, cfg.cg])
}

/// Encoder stack: F_0 = f_s + E_p, then `depth` layers of post-norm
/// self-attention and feed-forward with residuals. depth = 0 returns F_0.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    f_s: Var,
    e_p: Var,
    depth: usize,
    heads: usize,
) -> Result<Var> {
    let mut f = g.add(f_s, e_p)?;
    for i in 0..depth {
        let pre = format!("{prefix}{i}");
        let a = multi_head_attention(g, f, f, f, &b.attn(&format!("{pre}.attn")), heads)?;
        let r = g.add(a, f)?;
        let f1 = b.ln(g, &format!("{pre}.ln1"), r)?;
        let ff = feed_forward(g, f1, &b.ffn(&format!("{pre}.ffn")))?;
        let r2 = g.add(ff, f1)?;
        f = b.ln(g, &format!("{pre}.ln2"), r2)?;
    }
    Ok(f)
}

/// Decoder stack: Y_0 = E_p + E_d; each layer is self-attention over Y,
/// cross-attention with keys/values from F_K, and a feed-forward block, all
/// post-norm. The second residual reads Y_{i-1} as printed, or Y'_i when
/// `alt_residual` is set.
#[allow(clippy::too_many_arguments)]
pub fn decode<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    prefix: &str,
    f_k: Var,
    e_p: Var,
    e_d: Var,
    depth: usize,
    heads: usize,
    alt_residual: bool,
) -> Result<Var> {
    if g.shape(e_p) != g.shape(e_d) {
        return Err(Error::dim(format!(
            "embedding extents differ: {:?} vs {:?}",
            g.shape(e_p),
            g.shape(e_d)
        )));
    }
    let mut y = g.add(e_p, e_d)?;
    for i in 0..depth {
        let pre = format!("{prefix}{i}");
        let a = multi_head_attention(g, y, y, y, &b.attn(&format!("{pre}.self")), heads)?;
        let r = g.add(a, y)?;
        let y1 = b.ln(g, &format!("{pre}.ln1"), r)?;
        let c = multi_head_attention(g, y1, f_k, f_k, &b.attn(&format!("{pre}.cross")), heads)?;
        let res = if alt_residual { y1 } else { y };
        let r2 = g.add(c, res)?;
        let y2 = b.ln(g, &format!("{pre}.ln2"), r2)?;
        let ff = feed_forward(g, y2, &b.ffn(&format!("{pre}.ffn")))?;
        let r3 = g.add(ff, y2)?;
        y = b.ln(g, &format!("{pre}.ln3"), r3)?;
    }
    Ok(y)
}

/// Tail: reduce channels to a coarse 2-channel field, predict per-pixel 3x3
/// masks softmax-normalized over the neighborhood, and upsample 8x by convex
/// combination (or plain bilinear resize when `learned_upsample` is off).
pub fn geo_tail<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &GeoConfig,
    f_d: Var,
) -> Result<GeoForward> {
    let h = cfg.coarse_extent();
    if g.shape(f_d) != [h * h, cfg.cg] {
        return Err(Error::dim(format!(
            "tail expects [{}x{}] tokens, got {:?}",
            h * h,
            cfg.cg,
            g.shape(f_d)
        )));
    }
    let grid = g.reshape(f_d, vec![h, h, cfg.cg])?;
    let f = b.conv(g, "tail.flow.c1", grid, 1, 1)?;
    let f = g.relu(f);
    let coarse = b.conv(g, "tail.flow.c2", f, 1, 1)?;
    let map = if cfg.learned_upsample {
        let m = b.conv(g, "tail.mask.c1", grid, 1, 1)?;
        let m = g.relu(m);
        let m = b.conv(g, "tail.mask.c2", m, 1, 0)?;
        let m = g.reshape(m, vec![h, h, 3, 3, 64])?;
        let m = g.softmax(m, &[2, 3])?;
        let m = g.reshape(m, vec![h, h, 576])?;
        g.convex_upsample(coarse, m)?
    } else {
        g.resize_bilinear(coarse, 8 * h, 8 * h)?
    };
    Ok(GeoForward { map, coarse })
}

/// L1 training loss: mean absolute difference over all coordinate entries.
pub fn geo_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    g.l1(pred, gt)
}

/// Result of the full unwarp pipeline.
pub struct Unwarped {
    pub rectified: Image,
    pub map: BackwardMap,
    pub mask: DocMask,
}

/// End-to-end unwarp: downsample, segment, excise background, predict the
/// backward map, resize it to the input resolution, and warp. Passing no
/// segmenter skips preprocessing entirely (the no-preprocessing ablation).
pub fn unwarp(image: &Image, seg: Option<&SegModel<f32>>, geo: &GeoModel<f32>) -> Result<Unwarped> {
    if image.height() == 0 || image.width() == 0 {
        return Err(Error::arg("unwarp: empty input image"));
    }
    let s = geo.cfg.input_size;
    let small = image.resize_bilinear(s, s);
    let (mask, excised) = match seg {
        Some(seg) => {
            if seg.cfg.input_size != s {
                return Err(Error::config(format!(
                    "segmenter works at {} but unwarper at {}",
                    seg.cfg.input_size, s
                )));
            }
            let conf = segment(&small, seg)?;
            let mask = binarize(&conf, seg.cfg.tau)?;
            if mask.area_fraction() < 0.01 {
                return Err(Error::data(format!(
                    "no document found: mask covers {:.2}% of the frame",
                    mask.area_fraction() * 100.0
                )));
            }
            let excised = remove_background(&small, &mask)?;
            (mask, excised)
        }
        None => {
            let mask = DocMask {
                height: s,
                width: s,
                data: vec![1u8; s * s],
            };
            (mask, small)
        }
    };
    let mut g = Graph::<f32>::new();
    let b = nn::bind(&mut g, &geo.params, false);
    let x = g.input(excised.to_tensor());
    let fwd = geo.forward(&mut g, &b, x)?;
    let f_b = BackwardMap::from_tensor(g.value(fwd.map))?;
    let f_cap = resize_map(&f_b, image.height(), image.width())?;
    // warp the background-excluded image at full resolution; a small
    // dilation keeps mask boundary noise from biting into the document
    let masked = if seg.is_some() {
        let conf_img = mask.to_image().resize_bilinear(image.height(), image.width());
        let scale = (image.height().max(image.width()) / s).max(1);
        let full = DocMask::from_image(&conf_img)?.dilate(2 * scale);
        remove_background(image, &full)?
    } else {
        image.clone()
    };
    let rectified = warp_image(&masked, &f_cap)?;
    Ok(Unwarped {
        rectified,
        map: f_cap,
        mask,
    })
}

/// Combined pipeline checkpoint: segmenter weights (when preprocessing is
/// enabled) plus unwarper weights and both configs in one DTRC file.
pub fn save_pipeline_checkpoint(
    path: impl AsRef<std::path::Path>,
    seg: Option<&SegModel<f32>>,
    geo: &GeoModel<f32>,
    extra: &[(String, String)],
) -> Result<()> {
    let mut ckpt = Checkpoint::default();
    ckpt.config
        .insert("pipeline.preprocess".into(), seg.is_some().to_string());
    if let Some(seg) = seg {
        seg.append_to(&mut ckpt, "seg")?;
    }
    geo.append_to(&mut ckpt, "geo")?;
    for (k, v) in extra {
        ckpt.config.insert(k.clone(), v.clone());
    }
    crate::checkpoint::save_checkpoint(&ckpt, path)
}

pub fn load_pipeline_checkpoint(
    path: impl AsRef<std::path::Path>,
) -> Result<(Option<SegModel<f32>>, GeoModel<f32>, Checkpoint)> {
    let ckpt = crate::checkpoint::load_checkpoint(path)?;
    let preprocess: bool = ckpt.config_parse("pipeline.preprocess")?;
    let seg = if preprocess {
        Some(SegModel::from_checkpoint(&ckpt, "seg")?)
    } else {
        None
    };
    let geo = GeoModel::from_checkpoint(&ckpt, "geo")?;
    Ok((seg, geo, ckpt))
}
