use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use doctr_core::image::load_ppm;
use doctr_core::metrics::{cer, dense_flow, edit_distance, local_distortion, ms_ssim, MsSsimParams};
use doctr_core::synthdata::decode_text;
use doctr_core::{Error, Result};
use rayon::prelude::*;

use crate::cfg_entries;
use crate::config::echo_config;

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory of rectified images.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth images with matching filenames.
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated metric list.
    #[arg(long, default_value = "ld,ms-ssim,ed,cer")]
    pub metrics: String,
    /// Directory of reference text files (stem.txt); enables ED/CER.
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Report output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Pyramid levels of the dense matcher behind LD.
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
}

fn image_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::data(format!("{}: {e}", dir.display())))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") || name.ends_with(".pgm") {
            names.insert(name);
        }
    }
    Ok(names)
}

fn text_stem(name: &str) -> &str {
    name.trim_end_matches(".ppm").trim_end_matches(".pgm")
}

struct PairResult {
    name: String,
    ld: Option<f64>,
    msssim: Option<f64>,
    ed: Option<usize>,
    cer: Option<f64>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let want: BTreeSet<&str> = args.metrics.split(',').map(str::trim).collect();
    for m in &want {
        if !["ld", "ms-ssim", "ed", "cer"].contains(m) {
            return Err(Error::arg(format!(
                "unknown metric {m:?} (expected ld, ms-ssim, ed, cer)"
            )));
        }
    }
    let pred_names = image_names(&args.pred)?;
    let gt_names = image_names(&args.gt)?;
    if pred_names != gt_names {
        let only_pred: Vec<_> = pred_names.difference(&gt_names).collect();
        let only_gt: Vec<_> = gt_names.difference(&pred_names).collect();
        return Err(Error::data(format!(
            "unmatched files: pred-only {only_pred:?}, gt-only {only_gt:?}"
        )));
    }
    if pred_names.is_empty() {
        return Err(Error::data("no image pairs to evaluate"));
    }
    let want_text = want.contains("ed") || want.contains("cer");
    if want_text && args.text.is_none() {
        eprintln!("evaluate: no --text directory given, skipping ED/CER");
    }
    let names: Vec<String> = pred_names.into_iter().collect();
    let params = MsSsimParams::default();
    let results: Vec<Result<PairResult>> = names
        .par_iter()
        .map(|name| {
            let gt = load_ppm(args.gt.join(name))?;
            let pred = load_ppm(args.pred.join(name))?;
            // rectified output is resized to the ground-truth extent first
            let pred = if pred.height() != gt.height() || pred.width() != gt.width() {
                pred.resize_bilinear(gt.height(), gt.width())
            } else {
                pred
            };
            let ld = if want.contains("ld") {
                Some(local_distortion(&dense_flow(&gt, &pred, args.levels)?))
            } else {
                None
            };
            let msssim = if want.contains("ms-ssim") {
                Some(ms_ssim(&pred, &gt, &params)?)
            } else {
                None
            };
            let (mut ed, mut cer_v) = (None, None);
            if want_text {
                if let Some(text_dir) = &args.text {
                    let ref_path = text_dir.join(format!("{}.txt", text_stem(name)));
                    let reference = fs::read_to_string(&ref_path)
                        .map_err(|e| Error::data(format!("{}: {e}", ref_path.display())))?;
                    let hyp = decode_text(&pred);
                    if want.contains("ed") {
                        ed = Some(edit_distance(&hyp, &reference));
                    }
                    if want.contains("cer") {
                        cer_v = Some(cer(&hyp, &reference)?);
                    }
                }
            }
            Ok(PairResult {
                name: name.clone(),
                ld,
                msssim,
                ed,
                cer: cer_v,
            })
        })
        .collect();
    let results: Vec<PairResult> = results.into_iter().collect::<Result<_>>()?;

    let mut report = String::new();
    let push = |name: &str, metric: &str, value: String, report: &mut String| {
        let line = format!("{name}.{metric}\t{value}");
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    };
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for r in &results {
        if let Some(v) = r.ld {
            push(&r.name, "ld", format!("{v:.6}"), &mut report);
            sums[0] += v;
            counts[0] += 1;
        }
        if let Some(v) = r.msssim {
            push(&r.name, "ms-ssim", format!("{v:.6}"), &mut report);
            sums[1] += v;
            counts[1] += 1;
        }
        if let Some(v) = r.ed {
            push(&r.name, "ed", v.to_string(), &mut report);
            sums[2] += v as f64;
            counts[2] += 1;
        }
        if let Some(v) = r.cer {
            push(&r.name, "cer", format!("{v:.6}"), &mut report);
            sums[3] += v;
            counts[3] += 1;
        }
    }
    let mut summary = String::new();
    summary.push_str(&format!("count={}\n", results.len()));
    for (i, metric) in ["ld", "ms-ssim", "ed", "cer"].iter().enumerate() {
        if counts[i] > 0 {
            let mean = sums[i] / counts[i] as f64;
            push("mean", metric, format!("{mean:.6}"), &mut report);
            summary.push_str(&format!("{}_mean={mean:.6}\n", metric.replace('-', "_")));
        }
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("report.tsv"), report)?;
    fs::write(args.out.join("summary.txt"), summary)?;
    let mut entries = cfg_entries![
        ("command", "evaluate"),
        ("pred", args.pred.display()),
        ("gt", args.gt.display()),
        ("metrics", &args.metrics),
        (
            "text",
            args.text
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        ),
        ("out", args.out.display()),
        ("levels", args.levels),
    ];
    entries.sort();
    echo_config(&args.out, &entries)?;
    Ok(())
}
