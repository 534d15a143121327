//! Batched training steps for the three models.
//!
//! Each step builds one graph per sample (keeping activation memory bounded),
//! averages gradients over the batch, and applies a single AdamW update.

use crate::fields::resize_map;
use crate::geotr::{geo_loss, GeoModel};
use crate::illtr::{ill_loss, IllConfig, IllModel, PerceptualExtractor};
use crate::image::Image;
use crate::nn;
use crate::numerics::{AdamW, Graph, Real, Rng, Tensor};
use crate::segmenter::{remove_background, DocMask, SegModel};
use crate::synthdata::{gen_shading, replace_background, LoadedSample};
use crate::Result;

fn add_into<T: Real>(acc: &mut [Option<Tensor<T>>], grads: Vec<Option<Tensor<T>>>) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        match (slot.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            (None, Some(g)) => *slot = Some(g),
            _ => {}
        }
    }
}

fn scale_grads<T: Real>(acc: &mut [Option<Tensor<T>>], factor: T) {
    for slot in acc.iter_mut().flatten() {
        for v in slot.data_mut() {
            *v *= factor;
        }
    }
}

/// One segmenter update on (image [S,S,3], mask [S,S,1]) tensor pairs;
/// returns the mean batch loss.
pub fn seg_step(
    model: &mut SegModel<f32>,
    opt: &mut AdamW<f32>,
    batch: &[(Tensor<f32>, Tensor<f32>)],
    lr: f64,
    mean_reduction: bool,
) -> Result<f64> {
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut total = 0.0f64;
    for (img, mask) in batch {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &model.params, true);
        let x = g.input(img.clone());
        let conf = model.forward(&mut g, &b, x)?;
        let target = g.input(mask.clone());
        let loss = g.bce(conf, target, mean_reduction)?;
        g.backward(loss)?;
        total += g.value(loss).item()?.to_f64();
        add_into(&mut acc, nn::collect_grads(&g, &b));
    }
    scale_grads(&mut acc, 1.0 / batch.len() as f32);
    opt.step(&mut model.params, &acc, lr)?;
    Ok(total / batch.len() as f64)
}

/// One unwarper update on (background-excluded image, ground-truth map)
/// tensor pairs; returns the mean batch loss.
pub fn geo_step(
    model: &mut GeoModel<f32>,
    opt: &mut AdamW<f32>,
    batch: &[(Tensor<f32>, Tensor<f32>)],
    lr: f64,
) -> Result<f64> {
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut total = 0.0f64;
    for (img, gt) in batch {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &model.params, true);
        let x = g.input(img.clone());
        let fwd = model.forward(&mut g, &b, x)?;
        let gt_v = g.input(gt.clone());
        let loss = geo_loss(&mut g, fwd.map, gt_v)?;
        g.backward(loss)?;
        total += g.value(loss).item()?.to_f64();
        add_into(&mut acc, nn::collect_grads(&g, &b));
    }
    scale_grads(&mut acc, 1.0 / batch.len() as f32);
    opt.step(&mut model.params, &acc, lr)?;
    Ok(total / batch.len() as f64)
}

/// Mean L1 map error of the current model over pairs, without updating.
pub fn geo_eval(model: &GeoModel<f32>, pairs: &[(Tensor<f32>, Tensor<f32>)]) -> Result<f64> {
    let mut total = 0.0f64;
    for (img, gt) in pairs {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &model.params, false);
        let x = g.input(img.clone());
        let fwd = model.forward(&mut g, &b, x)?;
        let gt_v = g.input(gt.clone());
        let loss = geo_loss(&mut g, fwd.map, gt_v)?;
        total += g.value(loss).item()?.to_f64();
    }
    Ok(total / pairs.len() as f64)
}

/// One illumination update on (shaded patch, clean patch) tensor pairs.
pub fn ill_step(
    model: &mut IllModel<f32>,
    opt: &mut AdamW<f32>,
    batch: &[(Tensor<f32>, Tensor<f32>)],
    extractor: &PerceptualExtractor<f32>,
    lr: f64,
) -> Result<f64> {
    let alpha = model.cfg.alpha;
    let mut acc: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
    let mut total = 0.0f64;
    for (shaded, clean) in batch {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &model.params, true);
        let x = g.input(shaded.clone());
        let out = model.forward(&mut g, &b, x)?;
        let target = g.input(clean.clone());
        let loss = ill_loss(&mut g, out, target, alpha, extractor)?;
        g.backward(loss)?;
        total += g.value(loss).item()?.to_f64();
        add_into(&mut acc, nn::collect_grads(&g, &b));
    }
    scale_grads(&mut acc, 1.0 / batch.len() as f32);
    opt.step(&mut model.params, &acc, lr)?;
    Ok(total / batch.len() as f64)
}

/// Mean Eq-style loss of the current illumination model over pairs.
pub fn ill_eval(
    model: &IllModel<f32>,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    extractor: &PerceptualExtractor<f32>,
) -> Result<f64> {
    let mut total = 0.0f64;
    for (shaded, clean) in pairs {
        let mut g = Graph::<f32>::new();
        let b = nn::bind(&mut g, &model.params, false);
        let x = g.input(shaded.clone());
        let out = model.forward(&mut g, &b, x)?;
        let target = g.input(clean.clone());
        let loss = ill_loss(&mut g, out, target, model.cfg.alpha, extractor)?;
        total += g.value(loss).item()?.to_f64();
    }
    Ok(total / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// batch preparation from synthetic samples
// ---------------------------------------------------------------------------

/// (excised distorted image, ground-truth map) at the unwarper's working
/// resolution. Background removal runs through the trained segmenter exactly
/// as inference does, so training and pipeline inputs are identical; without
/// a segmenter the plain resized image is used. Normalized map values survive
/// resizing unchanged.
pub fn geo_training_pair(
    sample: &LoadedSample,
    seg: Option<&SegModel<f32>>,
    size: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let small = sample.distorted.resize_bilinear(size, size);
    let img = match seg {
        Some(seg) => {
            let conf = crate::segmenter::segment(&small, seg)?;
            let mask = crate::segmenter::binarize(&conf, seg.cfg.tau)?;
            remove_background(&small, &mask)?
        }
        None => small,
    };
    let map = resize_map(&sample.map, size, size)?;
    Ok((img.to_tensor(), map.to_tensor()))
}

/// (augmented image, mask) at the segmenter's resolution; the background is
/// replaced with a fresh procedural texture drawn from `bg_seed`.
pub fn seg_training_pair(
    sample: &LoadedSample,
    size: usize,
    bg_seed: u64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let replaced = replace_background(&sample.distorted, &sample.mask, bg_seed)?;
    let img = replaced.resize_bilinear(size, size);
    let mask_img = sample.mask.to_image().resize_bilinear(size, size);
    let mask = DocMask::from_image(&mask_img)?;
    let mask_t = Tensor::new(
        vec![size, size, 1],
        mask.data.iter().map(|&v| v as f32).collect(),
    )?;
    Ok((img.to_tensor(), mask_t))
}

/// (shaded patch, clean patch) pair cut from a sample's flat page, with a
/// fresh synthetic shading field applied.
pub fn ill_training_pair(
    sample: &LoadedSample,
    cfg: &IllConfig,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let p = cfg.patch;
    let clean = &sample.clean;
    let max_y = clean.height().saturating_sub(p);
    let max_x = clean.width().saturating_sub(p);
    let oy = if max_y > 0 { rng.below(max_y + 1) } else { 0 };
    let ox = if max_x > 0 { rng.below(max_x + 1) } else { 0 };
    let mut patch = Image::zeros(p, p, 3);
    for y in 0..p {
        for x in 0..p {
            for c in 0..3 {
                let sy = (oy + y).min(clean.height() - 1);
                let sx = (ox + x).min(clean.width() - 1);
                patch.set(y, x, c, clean.at(sy, sx, c));
            }
        }
    }
    let shading = gen_shading(rng.next_u64(), p, p);
    let mut shaded = patch.clone();
    for y in 0..p {
        let s = |x: usize| shading.at(y, x, 0);
        for x in 0..p {
            for c in 0..3 {
                let v = shaded.at(y, x, c) * s(x);
                shaded.set(y, x, c, v);
            }
        }
    }
    Ok((shaded.to_tensor(), patch.to_tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamWConfig;
    use crate::segmenter::SegConfig;
    use crate::synthdata::gen_sample;

    fn loaded(seed: u64) -> LoadedSample {
        let rec = gen_sample(seed).unwrap();
        LoadedSample {
            index: 0,
            seed,
            distorted: rec.distorted,
            map: rec.map,
            mask: rec.mask,
            clean: rec.clean,
            text: rec.text,
        }
    }

    #[test]
    fn geo_step_reduces_loss_on_micro_overfit() {
        let sample = loaded(51);
        let pair = geo_training_pair(&sample, None, 16).unwrap();
        let mut model =
            GeoModel::<f32>::new(crate::geotr::GeoConfig::micro(), &mut Rng::new(3)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let batch = vec![pair];
        let first = geo_step(&mut model, &mut opt, &batch, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = geo_step(&mut model, &mut opt, &batch, 1e-3).unwrap();
        }
        assert!(last < first * 0.8, "loss {first} -> {last}");
    }

    #[test]
    fn seg_step_reduces_loss() {
        let sample = loaded(52);
        let cfg = SegConfig {
            input_size: 32,
            channels: [6, 8, 12],
            tau: 0.5,
        };
        let mut model = SegModel::<f32>::new(cfg, &mut Rng::new(4)).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let pair = seg_training_pair(&sample, 32, 99).unwrap();
        let batch = vec![pair];
        let first = seg_step(&mut model, &mut opt, &batch, 1e-3, true).unwrap();
        let mut last = first;
        for _ in 0..25 {
            last = seg_step(&mut model, &mut opt, &batch, 1e-3, true).unwrap();
        }
        assert!(last < first * 0.8, "loss {first} -> {last}");
    }

    #[test]
    fn ill_step_reduces_loss() {
        let sample = loaded(53);
        let cfg = IllConfig::micro();
        let mut rng = Rng::new(5);
        let pair = ill_training_pair(&sample, &cfg, &mut rng).unwrap();
        let mut model = IllModel::<f32>::new(cfg, &mut Rng::new(6)).unwrap();
        let extractor = PerceptualExtractor::<f32>::new(7);
        let mut opt = AdamW::new(AdamWConfig::default());
        let batch = vec![pair];
        let first = ill_step(&mut model, &mut opt, &batch, &extractor, 1e-3).unwrap();
        let mut last = first;
        for _ in 0..40 {
            last = ill_step(&mut model, &mut opt, &batch, &extractor, 1e-3).unwrap();
        }
        assert!(last < first * 0.8, "loss {first} -> {last}");
    }
}
