use std::path::PathBuf;

use clap::Args;
use doctr_core::synthdata::{gen_sample, write_dataset};
use doctr_core::Result;

use crate::cfg_entries;
use crate::config::echo_config;

#[derive(Args)]
pub struct SynthArgs {
    /// Number of samples to generate.
    #[arg(long)]
    pub count: usize,
    /// Base seed; sample i uses a stream derived from seed and i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Per-sample seed: a fixed odd-constant stride keeps streams disjoint.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub fn run(args: SynthArgs) -> Result<()> {
    let mut records = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = sample_seed(args.seed, i);
        records.push((seed, gen_sample(seed)?));
        eprintln!("synth: sample {i} done");
    }
    write_dataset(&args.out, &records)?;
    echo_config(
        &args.out,
        &cfg_entries![
            ("command", "synth"),
            ("count", args.count),
            ("seed", args.seed),
            ("out", args.out.display()),
        ],
    )?;
    Ok(())
}
