use std::path::PathBuf;

use anyhow::{Context, Result};
use midfsl::domaindist::compute_pad;
use midfsl::episodic::{evaluate_features, extract_features, write_results};
use midfsl::trainer::load_checkpoint;
use midfsl::{Checkpoint, EpisodeConfig, FeatureMode, PadConfig};
use serde::Serialize;

use super::{config_path_for, load_for, open_dataset, percent, resolve_seed, SplitArg};
use crate::config::write_toml;

/// PAD at or above which the distant-domain feature is suggested.
const DISTANT_PAD: f64 = 1.2;

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root holding `split.tsv`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Novel)]
    split: SplitArg,
    /// distant, near, final or mid-concat.
    #[arg(long, default_value = "near")]
    mode: FeatureMode,
    #[arg(long, default_value_t = 5)]
    way: usize,
    #[arg(long, default_value_t = 1)]
    shot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 600)]
    episodes: usize,
    /// Defaults to MIDFSL_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Results file; defaults to `results-<mode>.jsonl` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the base-vs-evaluation PAD estimate.
    #[arg(long)]
    no_pad: bool,
    /// Replace features by one-hot labels (harness check).
    #[arg(long, hide = true)]
    oracle_features: bool,
}

#[derive(Serialize)]
struct Effective<'a> {
    checkpoint: &'a PathBuf,
    dataset: &'a PathBuf,
    split: SplitArg,
    mode: FeatureMode,
    way: usize,
    shot: usize,
    queries: usize,
    episodes: usize,
    seed: u64,
    out: &'a PathBuf,
    oracle_features: bool,
}

/// Width of the vectors produced by `mode`.
pub fn feature_dim(ckpt: &Checkpoint, mode: FeatureMode) -> usize {
    let cfg = &ckpt.network.config;
    match mode {
        FeatureMode::Near | FeatureMode::Final => cfg.feature_dim(),
        FeatureMode::Distant | FeatureMode::MidConcat => cfg.tap_dims().iter().sum(),
    }
}

pub fn run(args: Args) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let ckpt = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let manifest = open_dataset(&args.dataset)?;
    let out = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .with_file_name(format!("results-{}.jsonl", args.mode))
    });
    let ep = EpisodeConfig {
        way: args.way,
        shot: args.shot,
        queries: args.query,
        episodes: args.episodes,
    };
    ep.validate()?;
    write_toml(
        &config_path_for(&out),
        &Effective {
            checkpoint: &args.checkpoint,
            dataset: &args.dataset,
            split: args.split,
            mode: args.mode,
            way: ep.way,
            shot: ep.shot,
            queries: ep.queries,
            episodes: ep.episodes,
            seed,
            out: &out,
            oracle_features: args.oracle_features,
        },
    )?;

    let data = load_for(&ckpt, &manifest, args.split)?;
    let loss = &ckpt.train_config.loss;
    let (features, dim) = if args.oracle_features {
        let k = data.num_classes();
        let f = data
            .labels
            .iter()
            .map(|&y| (0..k).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect();
        (f, k)
    } else {
        (
            extract_features(&ckpt.network, &data.images, args.mode, loss)?,
            feature_dim(&ckpt, args.mode),
        )
    };
    let summary = evaluate_features(&features, &data.labels, &ep, seed)?;
    write_results(&out, &summary, args.mode, dim, &ckpt.config_fingerprint)?;
    println!(
        "{} {}-way {}-shot over {} episodes: {} ± {}",
        args.mode,
        ep.way,
        ep.shot,
        ep.episodes,
        percent(summary.mean),
        percent(summary.ci95)
    );
    println!("results written to {}", out.display());

    if !args.no_pad
        && !args.oracle_features
        && args.split != SplitArg::Base
        && manifest.classes_in(midfsl::data::Split::Base).next().is_some()
    {
        let base = load_for(&ckpt, &manifest, SplitArg::Base)?;
        let fb = extract_features(&ckpt.network, &base.images, FeatureMode::Final, loss)?;
        let fe = extract_features(&ckpt.network, &data.images, FeatureMode::Final, loss)?;
        match compute_pad(&fb, &fe, &PadConfig::default(), seed) {
            Ok(r) => {
                let hint = if r.pad >= DISTANT_PAD { "distant" } else { "near" };
                println!(
                    "PAD(base, {}) = {:.3}; suggested mode: {hint}",
                    args.split.name(),
                    r.pad
                );
            }
            Err(e) => log::warn!("PAD not computable: {e}"),
        }
    }
    Ok(())
}
