use std::path::PathBuf;

use clap::Args;
use doctr_core::fields::save_bmap;
use doctr_core::geotr::{load_pipeline_checkpoint, unwarp};
use doctr_core::illtr::{correct_image, load_ill_checkpoint};
use doctr_core::image::{load_ppm, save_ppm};
use doctr_core::{Error, Result};

use crate::cfg_entries;
use crate::config::echo_config;

#[derive(Args)]
pub struct RectifyArgs {
    /// Input document photo (binary PPM/PGM).
    #[arg(long)]
    pub input: PathBuf,
    /// Pipeline checkpoint from train-geo.
    #[arg(long)]
    pub geo: PathBuf,
    /// Illumination checkpoint from train-ill.
    #[arg(long)]
    pub ill: Option<PathBuf>,
    /// Output image path (written as binary PPM).
    #[arg(long)]
    pub out: PathBuf,
    /// Stop after geometric unwarping even if --ill is given.
    #[arg(long)]
    pub skip_ill: bool,
    /// Also write the full-resolution backward map (BMAP).
    #[arg(long)]
    pub dump_bmap: Option<PathBuf>,
}

pub fn run(args: RectifyArgs) -> Result<()> {
    let (seg, geo, _ckpt) = load_pipeline_checkpoint(&args.geo)?;
    let image = load_ppm(&args.input)?;
    if image.channels() != 3 {
        return Err(Error::data(format!(
            "{}: rectify expects a 3-channel image",
            args.input.display()
        )));
    }
    let unwarped = unwarp(&image, seg.as_ref(), &geo)?;
    if let Some(path) = &args.dump_bmap {
        save_bmap(&unwarped.map, path)?;
    }
    let corrected = if args.skip_ill || args.ill.is_none() {
        unwarped.rectified
    } else {
        let (ill_model, _seed, _) = load_ill_checkpoint(args.ill.as_ref().unwrap())?;
        correct_image(&unwarped.rectified, &ill_model)?
    };
    save_ppm(&corrected, &args.out)?;

    let dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut entries = cfg_entries![
        ("command", "rectify"),
        ("input", args.input.display()),
        ("geo", args.geo.display()),
        (
            "ill",
            args.ill
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        ),
        ("out", args.out.display()),
        ("skip_ill", args.skip_ill),
        (
            "dump_bmap",
            args.dump_bmap
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        ),
    ];
    entries.sort();
    echo_config(&dir, &entries)?;
    Ok(())
}
