//! Foreground document segmentation.
//!
//! A small U-shaped encoder-decoder predicts a per-pixel confidence that a
//! pixel belongs to the document; thresholding gives a binary mask used to
//! excise the background before geometric unwarping.

use crate::checkpoint::ParamSet;
use crate::image::Image;
use crate::nn::{self, Bound};
use crate::numerics::{Graph, Real, Rng, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SegConfig {
    /// Square input extent; must be divisible by 4 (two downsamplings).
    pub input_size: usize,
    /// Channels of the three encoder levels.
    pub channels: [usize; 3],
    /// Binarization threshold.
    pub tau: f32,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            input_size: 288,
            channels: [16, 32, 64],
            tau: 0.5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 4 != 0 {
            return Err(Error::config(format!(
                "segmenter input size {} must be a positive multiple of 4",
                self.input_size
            )));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::arg(format!("tau must be in (0,1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-pixel foreground confidence in [0, 1].
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    pub height: usize,
    pub width: usize,
    pub p: Vec<f32>,
}

/// Binary document-region mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DocMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl DocMask {
    /// Morphological dilation by a square structuring element of the given
    /// radius.
    pub fn dilate(&self, radius: usize) -> DocMask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                if self.data[y * w + x] == 0 {
                    continue;
                }
                let y0 = y.saturating_sub(radius);
                let x0 = x.saturating_sub(radius);
                for ny in y0..(y + radius + 1).min(h) {
                    for nx in x0..(x + radius + 1).min(w) {
                        out[ny * w + nx] = 1;
                    }
                }
            }
        }
        DocMask {
            height: h,
            width: w,
            data: out,
        }
    }

    /// Fraction of pixels marked as document.
    pub fn area_fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&v| v != 0).count() as f64 / self.data.len() as f64
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| v as f32).collect(),
        )
        .expect("consistent extents")
    }

    /// Imports a graymap: pixels at or above 0.5 become document.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels() != 1 {
            return Err(Error::dim("mask image must be single-channel"));
        }
        Ok(DocMask {
            height: img.height(),
            width: img.width(),
            data: img.data().iter().map(|&v| u8::from(v >= 0.5)).collect(),
        })
    }
}

#[derive(Debug)]
pub struct SegModel<T> {
    pub cfg: SegConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> SegModel<T> {
    pub fn new(cfg: SegConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let [c1, c2, c3] = cfg.channels;
        let mut p = ParamSet::new();
        nn::add_conv(&mut p, rng, "enc1.conv1", 3, 3, 3, c1)?;
        nn::add_conv(&mut p, rng, "enc1.conv2", 3, 3, c1, c1)?;
        nn::add_conv(&mut p, rng, "enc2.conv1", 3, 3, c1, c2)?;
        nn::add_conv(&mut p, rng, "enc2.conv2", 3, 3, c2, c2)?;
        nn::add_conv(&mut p, rng, "enc3.conv1", 3, 3, c2, c3)?;
        nn::add_conv(&mut p, rng, "enc3.conv2", 3, 3, c3, c3)?;
        nn::add_conv(&mut p, rng, "dec2.conv1", 3, 3, c3 + c2, c2)?;
        nn::add_conv(&mut p, rng, "dec2.conv2", 3, 3, c2, c2)?;
        nn::add_conv(&mut p, rng, "dec1.conv1", 3, 3, c2 + c1, c1)?;
        nn::add_conv(&mut p, rng, "dec1.conv2", 3, 3, c1, c1)?;
        nn::add_conv(&mut p, rng, "out", 1, 1, c1, 1)?;
        Ok(SegModel { cfg, params: p })
    }

    pub fn append_to(&self, ckpt: &mut crate::checkpoint::Checkpoint, prefix: &str) -> Result<()> {
        for (name, t) in self.params.iter() {
            ckpt.tensors.add(format!("{prefix}.{name}"), t.cast())?;
        }
        let c = &self.cfg;
        ckpt.config
            .insert(format!("{prefix}.input_size"), c.input_size.to_string());
        ckpt.config
            .insert(format!("{prefix}.c1"), c.channels[0].to_string());
        ckpt.config
            .insert(format!("{prefix}.c2"), c.channels[1].to_string());
        ckpt.config
            .insert(format!("{prefix}.c3"), c.channels[2].to_string());
        ckpt.config.insert(format!("{prefix}.tau"), c.tau.to_string());
        Ok(())
    }

    pub fn from_checkpoint(ckpt: &crate::checkpoint::Checkpoint, prefix: &str) -> Result<Self> {
        let cfg = SegConfig {
            input_size: ckpt.config_parse(&format!("{prefix}.input_size"))?,
            channels: [
                ckpt.config_parse(&format!("{prefix}.c1"))?,
                ckpt.config_parse(&format!("{prefix}.c2"))?,
                ckpt.config_parse(&format!("{prefix}.c3"))?,
            ],
            tau: ckpt.config_parse(&format!("{prefix}.tau"))?,
        };
        let mut model = SegModel::new(cfg, &mut Rng::new(0))?;
        nn::load_params(ckpt, prefix, &mut model.params)?;
        Ok(model)
    }

    /// Forward pass on a bound graph: image var [S, S, 3] -> confidence [S, S, 1].
    pub fn forward(&self, g: &mut Graph<T>, b: &Bound, image: Var) -> Result<Var> {
        let s = self.cfg.input_size;
        if g.shape(image) != [s, s, 3] {
            return Err(Error::dim(format!(
                "segmenter expects {s}x{s}x3, got {:?}",
                g.shape(image)
            )));
        }
        let block = |g: &mut Graph<T>, b: &Bound, prefix: &str, x: Var, stride: usize| -> Result<Var> {
            let y = b.conv(g, &format!("{prefix}.conv1"), x, stride, 1)?;
            let y = g.relu(y);
            let y = b.conv(g, &format!("{prefix}.conv2"), y, 1, 1)?;
            Ok(g.relu(y))
        };
        let e1 = block(g, b, "enc1", image, 1)?;
        let e2 = block(g, b, "enc2", e1, 2)?;
        let e3 = block(g, b, "enc3", e2, 2)?;
        let u2 = g.upsample_nearest2x(e3)?;
        let cat2 = g.concat_last(&[u2, e2])?;
        let d2 = block(g, b, "dec2", cat2, 1)?;
        let u1 = g.upsample_nearest2x(d2)?;
        let cat1 = g.concat_last(&[u1, e1])?;
        let d1 = block(g, b, "dec1", cat1, 1)?;
        let logits = b.conv(g, "out", d1, 1, 0)?;
        Ok(g.sigmoid(logits))
    }
}

/// Runs segmentation on an image at the configured resolution.
pub fn segment<T: Real>(image: &Image, model: &SegModel<T>) -> Result<ConfidenceMap> {
    let s = model.cfg.input_size;
    if image.height() != s || image.width() != s || image.channels() != 3 {
        return Err(Error::dim(format!(
            "segment expects {s}x{s}x3 input, got {}x{}x{}",
            image.height(),
            image.width(),
            image.channels()
        )));
    }
    let mut g = Graph::<T>::new();
    let b = nn::bind(&mut g, &model.params, false);
    let x = g.input(image.to_tensor());
    let conf = model.forward(&mut g, &b, x)?;
    Ok(ConfidenceMap {
        height: s,
        width: s,
        p: g.value(conf).data().iter().map(|v| v.to_f32()).collect(),
    })
}

/// Thresholds a confidence map; the comparison is inclusive (p >= tau).
pub fn binarize(conf: &ConfidenceMap, tau: f32) -> Result<DocMask> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::arg(format!("tau must be in (0,1), got {tau}")));
    }
    Ok(DocMask {
        height: conf.height,
        width: conf.width,
        data: conf.p.iter().map(|&p| u8::from(p >= tau)).collect(),
    })
}

/// Zeroes background pixels: out = image * mask, broadcast over channels.
pub fn remove_background(image: &Image, mask: &DocMask) -> Result<Image> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(Error::dim(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height,
            mask.width,
            image.height(),
            image.width()
        )));
    }
    let c = image.channels();
    let mut out = image.clone();
    for (px, &m) in out.data_mut().chunks_mut(c).zip(&mask.data) {
        if m == 0 {
            px.fill(0.0);
        }
    }
    Ok(out)
}

/// Binary cross-entropy between predicted confidences and a {0,1} target
/// (summed over pixels by default, mean reduction behind the flag).
pub fn bce_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mean: bool) -> Result<Var> {
    g.bce(pred, target, mean)
}
