use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use midfsl::domaindist::compute_pad;
use midfsl::episodic::extract_features;
use midfsl::trainer::load_checkpoint;
use midfsl::{FeatureMode, PadConfig, PadReport};
use serde::Serialize;

use super::{config_path_for, load_for, open_dataset, resolve_seed, SplitArg};
use crate::config::write_toml;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// First dataset root.
    #[arg(long)]
    a: PathBuf,
    /// Second dataset root.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    a_split: SplitArg,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    b_split: SplitArg,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Defaults to MIDFSL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Report file; defaults to `pad.json` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Effective<'a> {
    checkpoint: &'a PathBuf,
    a: &'a PathBuf,
    b: &'a PathBuf,
    a_split: SplitArg,
    b_split: SplitArg,
    seed: u64,
    pad: &'a PadConfig,
}

#[derive(Serialize)]
struct Record<'a> {
    a_samples: usize,
    b_samples: usize,
    #[serde(flatten)]
    report: &'a PadReport,
}

pub fn run(args: Args) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let cfg = PadConfig {
        folds: args.folds,
        ..PadConfig::default()
    };
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let a = load_for(&ckpt, &open_dataset(&args.a)?, args.a_split)?;
    let b = load_for(&ckpt, &open_dataset(&args.b)?, args.b_split)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name("pad.json"));
    write_toml(
        &config_path_for(&out),
        &Effective {
            checkpoint: &args.checkpoint,
            a: &args.a,
            b: &args.b,
            a_split: args.a_split,
            b_split: args.b_split,
            seed,
            pad: &cfg,
        },
    )?;

    let loss = &ckpt.train_config.loss;
    let fa = extract_features(&ckpt.network, &a.images, FeatureMode::Final, loss)?;
    let fb = extract_features(&ckpt.network, &b.images, FeatureMode::Final, loss)?;
    let report = compute_pad(&fa, &fb, &cfg, seed)?;
    println!(
        "PAD {:.3} (balanced error {:.4}, {} vs {} samples)",
        report.pad,
        report.balanced_error,
        fa.len(),
        fb.len()
    );
    for (k, e) in report.fold_errors.iter().enumerate() {
        println!("  fold {}: error {e:.4}", k + 1);
    }
    let record = Record {
        a_samples: fa.len(),
        b_samples: fb.len(),
        report: &report,
    };
    fs::write(&out, serde_json::to_string_pretty(&record)?)?;
    println!("report written to {}", out.display());
    Ok(())
}
