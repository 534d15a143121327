use std::fs;
use std::path::PathBuf;

use clap::Args;
use doctr_core::illtr::{save_ill_checkpoint, IllConfig, IllModel, PerceptualExtractor};
use doctr_core::numerics::{AdamW, AdamWConfig, Rng, Tensor};
use doctr_core::synthdata::read_dataset;
use doctr_core::train::{ill_step, ill_training_pair};
use doctr_core::{Error, Result};

use crate::cfg_entries;
use crate::config::{echo_config, FileOverrides};

#[derive(Args)]
pub struct TrainIllArgs {
    /// Dataset directory produced by `synth` (clean pages are used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Scale preset: desk (default), paper, tiny, micro.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch index after which the LR drops by the 0.3 factor.
    #[arg(long)]
    pub lr_drop_epoch: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Shaded/clean pairs drawn per epoch.
    #[arg(long)]
    pub pairs_per_epoch: Option<usize>,
    /// Train on exactly N fixed pairs (overfit runs).
    #[arg(long)]
    pub overfit: Option<usize>,
    #[arg(long)]
    pub target_loss: Option<f64>,
    /// Ablation: encoder only (no decoder stack).
    #[arg(long)]
    pub encoder_only: bool,
    /// Ablation: decoder only (no encoder stack).
    #[arg(long)]
    pub decoder_only: bool,
}

struct Settings {
    ill: IllConfig,
    epochs: u64,
    batch: usize,
    lr: f64,
    lr_drop_epoch: u64,
    pairs_per_epoch: usize,
}

const LR_DROP_FACTOR: f64 = 0.3;

fn profile_settings(name: &str) -> Result<Settings> {
    let s = match name {
        "desk" => Settings {
            ill: IllConfig::default(),
            epochs: 6,
            batch: 4,
            lr: 1e-4,
            lr_drop_epoch: 4,
            pairs_per_epoch: 64,
        },
        "paper" => Settings {
            ill: IllConfig::default(),
            epochs: 35,
            batch: 24,
            lr: 1e-4,
            lr_drop_epoch: 20,
            pairs_per_epoch: 2048,
        },
        "tiny" => Settings {
            ill: IllConfig::tiny(),
            epochs: 10,
            batch: 4,
            lr: 1e-3,
            lr_drop_epoch: 7,
            pairs_per_epoch: 16,
        },
        "micro" => Settings {
            ill: IllConfig::micro(),
            epochs: 2,
            batch: 2,
            lr: 1e-3,
            lr_drop_epoch: 1,
            pairs_per_epoch: 8,
        },
        other => {
            return Err(Error::config(format!(
                "unknown profile {other:?} (expected desk, paper, tiny, micro)"
            )))
        }
    };
    Ok(s)
}

fn resolve(args: &TrainIllArgs) -> Result<Settings> {
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
    field!(epochs, s.epochs);
    field!(batch, s.batch);
    field!(lr, s.lr);
    field!(lr_drop_epoch, s.lr_drop_epoch);
    field!(alpha, s.ill.alpha);
    field!(patch, s.ill.patch);
    field!(depth, s.ill.depth);
    field!(heads, s.ill.heads);
    field!(pairs_per_epoch, s.pairs_per_epoch);
    file.finish()?;
    if args.encoder_only && args.decoder_only {
        return Err(Error::config("encoder-only and decoder-only are mutually exclusive"));
    }
    s.ill.use_decoder = !args.encoder_only;
    s.ill.use_encoder = !args.decoder_only;
    s.ill.validate()?;
    Ok(s)
}

pub fn run(args: TrainIllArgs) -> Result<()> {
    let s = resolve(&args)?;
    let samples = read_dataset(&args.data)?;
    if samples.is_empty() {
        return Err(Error::data(format!(
            "no samples in dataset {}",
            args.data.display()
        )));
    }
    fs::create_dir_all(&args.out)?;
    let mut rng = Rng::new(args.seed);
    let mut model = IllModel::new(s.ill, &mut rng.split())?;
    let extractor_seed = args.seed ^ 0x5EED_FACE;
    let extractor = PerceptualExtractor::<f32>::new(extractor_seed);
    let mut opt = AdamW::new(AdamWConfig::default());

    // overfit mode pins a fixed pair set; otherwise pairs are drawn per step
    let fixed_pairs: Option<Vec<(Tensor<f32>, Tensor<f32>)>> = match args.overfit {
        Some(n) if n == 0 => return Err(Error::arg("overfit count must be positive")),
        Some(n) => {
            let mut pair_rng = rng.split();
            let mut pairs = Vec::with_capacity(n);
            for i in 0..n {
                pairs.push(ill_training_pair(
                    &samples[i % samples.len()],
                    &model.cfg,
                    &mut pair_rng,
                )?);
            }
            Some(pairs)
        }
        None => None,
    };
    let pairs_per_epoch = fixed_pairs
        .as_ref()
        .map(|p| p.len())
        .unwrap_or(s.pairs_per_epoch);
    let steps_per_epoch = pairs_per_epoch.div_ceil(s.batch) as u64;
    let mut loss_log = String::new();
    let mut lr_log = String::new();
    let mut step_rng = rng.split();
    let mut global = 0u64;
    'epochs: for epoch in 0..s.epochs {
        let lr = if epoch >= s.lr_drop_epoch {
            s.lr * LR_DROP_FACTOR
        } else {
            s.lr
        };
        for _ in 0..steps_per_epoch {
            let batch: Vec<(Tensor<f32>, Tensor<f32>)> = match &fixed_pairs {
                Some(pairs) => {
                    let mut b = Vec::with_capacity(s.batch.min(pairs.len()));
                    for k in 0..s.batch.min(pairs.len()) {
                        b.push(pairs[(global as usize * s.batch + k) % pairs.len()].clone());
                    }
                    b
                }
                None => {
                    let mut b = Vec::with_capacity(s.batch);
                    for _ in 0..s.batch {
                        let idx = step_rng.below(samples.len());
                        b.push(ill_training_pair(&samples[idx], &model.cfg, &mut step_rng)?);
                    }
                    b
                }
            };
            let loss = ill_step(&mut model, &mut opt, &batch, &extractor, lr)?;
            if !loss.is_finite() {
                return Err(Error::train(format!(
                    "loss became non-finite at step {} (last checkpoint retained)",
                    global + 1
                )));
            }
            global += 1;
            loss_log.push_str(&format!("{global}\t{loss:.6}\n"));
            lr_log.push_str(&format!("{global}\t{lr:.8}\n"));
            if global % 20 == 0 {
                eprintln!("train-ill: epoch {epoch} step {global} loss {loss:.5} lr {lr:.2e}");
            }
            if args.target_loss.is_some_and(|t| loss < t) {
                eprintln!("train-ill: target loss reached at step {global}");
                break 'epochs;
            }
        }
        save_ill_checkpoint(
            args.out.join("ill.dtrc"),
            &model,
            extractor_seed,
            &cfg_entries![("trained_steps", global), ("seed", args.seed)],
        )?;
    }
    save_ill_checkpoint(
        args.out.join("ill.dtrc"),
        &model,
        extractor_seed,
        &cfg_entries![("trained_steps", global), ("seed", args.seed)],
    )?;
    fs::write(args.out.join("loss.tsv"), loss_log)?;
    fs::write(args.out.join("lr.tsv"), lr_log)?;
    let mut entries = cfg_entries![
        ("command", "train-ill"),
        ("data", args.data.display()),
        ("out", args.out.display()),
        ("seed", args.seed),
        ("profile", &args.profile),
        ("epochs", s.epochs),
        ("batch", s.batch),
        ("lr", s.lr),
        ("lr_drop_epoch", s.lr_drop_epoch),
        ("lr_drop_factor", LR_DROP_FACTOR),
        ("alpha", s.ill.alpha),
        ("patch", s.ill.patch),
        ("depth", s.ill.depth),
        ("heads", s.ill.heads),
        ("pairs_per_epoch", pairs_per_epoch),
        ("encoder_only", args.encoder_only),
        ("decoder_only", args.decoder_only),
        ("overfit", args.overfit.map(|v| v.to_string()).unwrap_or_default()),
        ("target_loss", args.target_loss.map(|v| v.to_string()).unwrap_or_default()),
    ];
    entries.sort();
    echo_config(&args.out, &entries)?;
    Ok(())
}
