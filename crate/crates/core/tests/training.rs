//! Training-behavior checks on synthetic data: the segmenter overfits a few
//! samples to high mask accuracy, and its loss decreases monotonically in
//! smoothed windows.

use doctr_core::numerics::{AdamW, AdamWConfig, Rng};
use doctr_core::segmenter::{binarize, segment, SegConfig, SegModel};
use doctr_core::synthdata::{gen_sample, LoadedSample};
use doctr_core::train::{seg_step, seg_training_pair};

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
fn segmenter_overfit_reaches_high_mask_accuracy() {
    let size = 32;
    let samples: Vec<LoadedSample> = (60..64).map(loaded).collect();
    let cfg = SegConfig {
        input_size: size,
        channels: [6, 8, 12],
        tau: 0.5,
    };
    let mut model = SegModel::<f32>::new(cfg, &mut Rng::new(1)).unwrap();
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let mut losses = Vec::new();
    for step in 0..300u64 {
        let mut batch = Vec::new();
        for (k, s) in samples.iter().enumerate() {
            // fresh procedural background per step, per the training recipe
            let bg_seed = step * 31 + k as u64;
            batch.push(seg_training_pair(s, size, bg_seed).unwrap());
        }
        let lr = if step >= 200 { 2e-3 * 0.1 } else { 2e-3 };
        losses.push(seg_step(&mut model, &mut opt, &batch, lr, false).unwrap());
    }

    // per-pixel accuracy against ground-truth masks on the original samples
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in &samples {
        let img = s.distorted.resize_bilinear(size, size);
        let conf = segment(&img, &model).unwrap();
        let mask = binarize(&conf, 0.5).unwrap();
        let gt_img = s.mask.to_image().resize_bilinear(size, size);
        let gt = doctr_core::segmenter::DocMask::from_image(&gt_img).unwrap();
        correct += mask
            .data
            .iter()
            .zip(&gt.data)
            .filter(|(a, b)| a == b)
            .count();
        total += mask.data.len();
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.98, "mask accuracy {acc:.4}");

    // smoothed windows of 100 steps decrease monotonically below the start
    let w = |range: std::ops::Range<usize>| -> f64 {
        losses[range.clone()].iter().sum::<f64>() / range.len() as f64
    };
    let (w0, w1, w2) = (w(0..100), w(100..200), w(200..300));
    assert!(
        w0 > w1 && w1 > w2,
        "windows not monotone: {w0:.1} {w1:.1} {w2:.1}"
    );
    assert!(w2 < losses[0], "final window {w2:.1} not below start {:.1}", losses[0]);
}
