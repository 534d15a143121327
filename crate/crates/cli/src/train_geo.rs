use std::fs;
use std::path::PathBuf;

use clap::Args;
use doctr_core::geotr::{load_pipeline_checkpoint, save_pipeline_checkpoint, GeoConfig, GeoModel};
use doctr_core::numerics::{AdamW, AdamWConfig, LrSchedule, Rng};
use doctr_core::segmenter::{SegConfig, SegModel};
use doctr_core::synthdata::read_dataset;
use doctr_core::train::{geo_step, geo_training_pair, seg_step, seg_training_pair};
use doctr_core::{Error, Result};

use crate::cfg_entries;
use crate::config::{echo_config, FileOverrides};

#[derive(Args)]
pub struct TrainGeoArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, logs, and the config echo.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale preset: desk (default), paper, tiny, micro.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// key=value overrides applied between the profile and explicit flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seg_steps: Option<u64>,
    #[arg(long)]
    pub seg_lr: Option<f64>,
    #[arg(long)]
    pub seg_batch: Option<usize>,
    /// Restrict training to the first N samples (overfit runs).
    #[arg(long)]
    pub overfit: Option<usize>,
    /// Stop early once the step loss falls below this value.
    #[arg(long)]
    pub target_loss: Option<f64>,
    #[arg(long)]
    pub ckpt_every: Option<u64>,
    /// Working resolution H0 (multiple of 8).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub cg: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn: Option<usize>,
    /// Binarization threshold of the preprocessing segmenter.
    #[arg(long)]
    pub tau: Option<f32>,
    /// Ablation: train without the preprocessing segmentation stage.
    #[arg(long)]
    pub no_preprocess: bool,
    /// Ablation: no encoder stack (tokens go straight to the decoder).
    #[arg(long)]
    pub no_encoder: bool,
    /// Ablation: no decoder stack (encoded tokens go straight to the tail).
    #[arg(long)]
    pub no_decoder: bool,
    /// Ablation: bilinear 8x upsampling instead of the learned masks.
    #[arg(long)]
    pub bilinear_up: bool,
    /// Use Y'_i as the second decoder residual instead of Y_{i-1}.
    #[arg(long)]
    pub alt_dec_residual: bool,
    /// Continue from an existing pipeline checkpoint (parameters only).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

struct Settings {
    geo: GeoConfig,
    seg: SegConfig,
    steps: u64,
    batch: usize,
    max_lr: f64,
    warmup: u64,
    weight_decay: f64,
    seg_steps: u64,
    seg_lr: f64,
    seg_batch: usize,
    ckpt_every: u64,
    seg_channels: [usize; 3],
}

fn profile_settings(name: &str) -> Result<Settings> {
    let s = match name {
        "desk" => Settings {
            geo: GeoConfig::default(),
            seg: SegConfig::default(),
            steps: 2000,
            batch: 8,
            max_lr: 1e-4,
            warmup: 700,
            weight_decay: 1e-4,
            seg_steps: 300,
            seg_lr: 1e-3,
            seg_batch: 8,
            ckpt_every: 500,
            seg_channels: [16, 32, 64],
        },
        "paper" => Settings {
            geo: GeoConfig::default(),
            seg: SegConfig::default(),
            steps: 500_000,
            batch: 8,
            max_lr: 1e-4,
            warmup: 700,
            weight_decay: 1e-4,
            seg_steps: 20_000,
            seg_lr: 1e-4,
            seg_batch: 32,
            ckpt_every: 10_000,
            seg_channels: [16, 32, 64],
        },
        "tiny" => Settings {
            geo: GeoConfig::tiny(),
            seg: SegConfig {
                input_size: GeoConfig::tiny().input_size,
                channels: [8, 12, 16],
                tau: 0.5,
            },
            steps: 3000,
            batch: 8,
            max_lr: 1e-3,
            warmup: 100,
            weight_decay: 1e-4,
            seg_steps: 200,
            seg_lr: 2e-3,
            seg_batch: 4,
            ckpt_every: 1000,
            seg_channels: [8, 12, 16],
        },
        "micro" => Settings {
            geo: GeoConfig::micro(),
            seg: SegConfig {
                input_size: GeoConfig::micro().input_size,
                channels: [4, 6, 8],
                tau: 0.5,
            },
            steps: 100,
            batch: 2,
            max_lr: 1e-3,
            warmup: 10,
            weight_decay: 1e-4,
            seg_steps: 40,
            seg_lr: 2e-3,
            seg_batch: 2,
            ckpt_every: 100,
            seg_channels: [4, 6, 8],
        },
        other => {
            return Err(Error::config(format!(
                "unknown profile {other:?} (expected desk, paper, tiny, micro)"
            )))
        }
    };
    Ok(s)
}

fn resolve(args: &TrainGeoArgs) -> Result<Settings> {
    let mut s = profile_settings(&args.profile)?;
    let mut file = FileOverrides::load(args.config.as_deref())?;
    macro_rules! field {
        ($name:ident, $slot:expr) => {
            if let Some(v) = file.take(stringify!($name))? {
                $slot = v;
            }
            if let Some(v) = args.$name {
                $slot = v;
            }
        };
    }
    field!(steps, s.steps);
    field!(batch, s.batch);
    field!(max_lr, s.max_lr);
    field!(warmup, s.warmup);
    field!(weight_decay, s.weight_decay);
    field!(seg_steps, s.seg_steps);
    field!(seg_lr, s.seg_lr);
    field!(seg_batch, s.seg_batch);
    field!(ckpt_every, s.ckpt_every);
    field!(size, s.geo.input_size);
    field!(cg, s.geo.cg);
    field!(depth, s.geo.depth);
    field!(heads, s.geo.heads);
    field!(ffn, s.geo.ffn_width);
    field!(tau, s.seg.tau);
    file.finish()?;
    s.seg.input_size = s.geo.input_size;
    s.seg.channels = s.seg_channels;
    s.geo.use_encoder = !args.no_encoder;
    s.geo.use_decoder = !args.no_decoder;
    s.geo.learned_upsample = !args.bilinear_up;
    s.geo.decoder_residual_alt = args.alt_dec_residual;
    s.geo.validate()?;
    s.seg.validate()?;
    Ok(s)
}

fn bg_seed(run_seed: u64, step: u64, slot: usize) -> u64 {
    let mut r = Rng::new(run_seed ^ 0xBA5E_BA11);
    r.next_u64()
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(slot as u64)
}

pub fn run(args: TrainGeoArgs) -> Result<()> {
    let s = resolve(&args)?;
    let samples = read_dataset(&args.data)?;
    if samples.is_empty() {
        return Err(Error::data(format!(
            "no samples in dataset {}",
            args.data.display()
        )));
    }
    let samples = match args.overfit {
        Some(n) if n == 0 => return Err(Error::arg("overfit count must be positive")),
        Some(n) => samples.into_iter().take(n).collect::<Vec<_>>(),
        None => samples,
    };
    fs::create_dir_all(&args.out)?;

    let mut rng = Rng::new(args.seed);
    let (mut seg_model, mut geo_model, start_step) = if let Some(resume) = &args.resume {
        let (seg, geo, ckpt) = load_pipeline_checkpoint(resume)?;
        let start: u64 = ckpt.config_parse("trained_steps").unwrap_or(0);
        (seg, geo, start)
    } else {
        let seg = if args.no_preprocess {
            None
        } else {
            Some(SegModel::new(s.seg, &mut rng.split())?)
        };
        (seg, GeoModel::new(s.geo, &mut rng.split())?, 0)
    };

    // stage A: preprocessing segmenter (fresh runs only)
    if let (Some(seg), None) = (seg_model.as_mut(), &args.resume) {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        });
        let mut log = String::new();
        for step in 0..s.seg_steps {
            // mirror the drop-by-0.1 recipe at two thirds of the run
            let lr = if step * 3 >= s.seg_steps * 2 {
                s.seg_lr * 0.1
            } else {
                s.seg_lr
            };
            let mut batch = Vec::with_capacity(s.seg_batch);
            for k in 0..s.seg_batch {
                let idx = (step as usize * s.seg_batch + k) % samples.len();
                batch.push(seg_training_pair(
                    &samples[idx],
                    s.seg.input_size,
                    bg_seed(args.seed, step, k),
                )?);
            }
            let loss = seg_step(seg, &mut opt, &batch, lr, false)?;
            log.push_str(&format!("{}\t{loss:.6}\n", step + 1));
            if (step + 1) % 50 == 0 {
                eprintln!("train-geo/seg: step {} loss {loss:.4}", step + 1);
            }
        }
        fs::write(args.out.join("loss_seg.tsv"), log)?;
    }

    // stage B: the unwarper under the one-cycle policy
    let sched = LrSchedule::new(s.max_lr, s.warmup, s.steps)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: s.weight_decay,
        ..AdamWConfig::default()
    });
    let pairs: Vec<_> = samples
        .iter()
        .map(|smp| geo_training_pair(smp, seg_model.as_ref(), s.geo.input_size))
        .collect::<Result<_>>()?;
    let mut loss_log = String::new();
    let mut lr_log = String::new();
    let mut trained = start_step;
    let extra = |steps: u64| {
        cfg_entries![
            ("trained_steps", steps),
            ("seed", args.seed),
            ("profile", &args.profile),
        ]
    };
    let ckpt_path = args.out.join("geo.dtrc");
    for step in start_step..s.steps {
        let lr = sched.lr(step + 1)?;
        let mut batch = Vec::with_capacity(s.batch);
        for k in 0..s.batch {
            let idx = (step as usize * s.batch + k) % pairs.len();
            batch.push(pairs[idx].clone());
        }
        let loss = geo_step(&mut geo_model, &mut opt, &batch, lr)?;
        if !loss.is_finite() {
            // keep the last good checkpoint on disk and abort
            return Err(Error::train(format!(
                "loss became non-finite at step {} (last checkpoint retained)",
                step + 1
            )));
        }
        trained = step + 1;
        loss_log.push_str(&format!("{trained}\t{loss:.6}\n"));
        lr_log.push_str(&format!("{trained}\t{lr:.8}\n"));
        if trained % 50 == 0 || trained == s.steps {
            eprintln!("train-geo: step {trained} loss {loss:.5} lr {lr:.2e}");
        }
        if trained % s.ckpt_every == 0 {
            save_pipeline_checkpoint(&ckpt_path, seg_model.as_ref(), &geo_model, &extra(trained))?;
        }
        if args.target_loss.is_some_and(|t| loss < t) {
            eprintln!("train-geo: target loss reached at step {trained}");
            break;
        }
    }
    save_pipeline_checkpoint(&ckpt_path, seg_model.as_ref(), &geo_model, &extra(trained))?;
    fs::write(args.out.join("loss.tsv"), loss_log)?;
    fs::write(args.out.join("lr.tsv"), lr_log)?;

    let mut entries = cfg_entries![
        ("command", "train-geo"),
        ("data", args.data.display()),
        ("out", args.out.display()),
        ("seed", args.seed),
        ("profile", &args.profile),
        ("steps", s.steps),
        ("batch", s.batch),
        ("max_lr", s.max_lr),
        ("warmup", s.warmup),
        ("weight_decay", s.weight_decay),
        ("seg_steps", s.seg_steps),
        ("seg_lr", s.seg_lr),
        ("seg_batch", s.seg_batch),
        ("ckpt_every", s.ckpt_every),
        ("size", s.geo.input_size),
        ("cg", s.geo.cg),
        ("depth", s.geo.depth),
        ("heads", s.geo.heads),
        ("ffn", s.geo.ffn_width),
        ("tau", s.seg.tau),
        ("no_preprocess", args.no_preprocess),
        ("no_encoder", args.no_encoder),
        ("no_decoder", args.no_decoder),
        ("bilinear_up", args.bilinear_up),
        ("alt_dec_residual", args.alt_dec_residual),
        ("overfit", args.overfit.map(|v| v.to_string()).unwrap_or_default()),
        ("target_loss", args.target_loss.map(|v| v.to_string()).unwrap_or_default()),
    ];
    entries.sort();
    echo_config(&args.out, &entries)?;
    Ok(())
}
