use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use midfsl::data::{Normalizer, Split};
use midfsl::episodic::{evaluate, write_results};
use midfsl::trainer::{save_checkpoint, train_base};

use super::{open_dataset, percent};
use crate::config::{write_toml, ConfigError, RunConfig};

#[derive(clap::Args)]
pub struct Args {
    /// Run file (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write_toml(&cfg.out_dir.join("effective_config.toml"), &cfg)?;

    let manifest = open_dataset(&cfg.dataset)?;
    let (h, w, c) = cfg.train.backbone.input_shape;
    let mut base = manifest.load_split(Split::Base, (h, w), c)?;
    let norm = Normalizer::fit(&base);
    norm.apply(&mut base);
    let val = match &cfg.train.validation {
        Some(_) => {
            let mut v = manifest.load_split(Split::Val, (h, w), c)?;
            if v.is_empty() {
                return Err(ConfigError(
                    "validation is configured but the dataset has no val classes".into(),
                )
                .into());
            }
            norm.apply(&mut v);
            Some(v)
        }
        None => None,
    };

    println!(
        "training on {} images of {} base classes for {} epochs",
        base.len(),
        base.num_classes(),
        cfg.train.epochs
    );
    let outcome = train_base(&cfg.train, &base, val.as_ref(), |r| {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}/{} lr {:.4} cls {:.4} recon {} mid {} train acc {}%{}",
            r.epoch,
            cfg.train.epochs,
            r.lr,
            r.loss_cls,
            opt(r.loss_recon),
            opt(r.loss_mid),
            percent(r.train_accuracy),
            r.val_accuracy
                .map_or(String::new(), |a| format!(" val {}%", percent(a)))
        );
    })?;
    let mut ckpt = outcome.checkpoint;
    ckpt.normalizer = Some(norm);
    let ckpt_path = cfg.out_dir.join("checkpoint.json");
    save_checkpoint(&ckpt, &ckpt_path)?;
    println!(
        "checkpoint (epoch {}) written to {}",
        ckpt.epoch,
        ckpt_path.display()
    );

    if cfg.eval.after_training {
        let mut novel = manifest.load_split(Split::Novel, (h, w), c)?;
        ckpt.normalizer.as_ref().expect("set above").apply(&mut novel);
        let ep = cfg.eval.episode_config();
        let summary = evaluate(
            &ckpt.network,
            &novel,
            &ep,
            cfg.eval.mode,
            &cfg.train.loss,
            cfg.train.seed,
        )?;
        let path = cfg.out_dir.join("results.jsonl");
        let dim = super::eval::feature_dim(&ckpt, cfg.eval.mode);
        write_results(&path, &summary, cfg.eval.mode, dim, &ckpt.config_fingerprint)?;
        println!(
            "{} {}-way {}-shot: {} ± {}",
            cfg.eval.mode,
            ep.way,
            ep.shot,
            percent(summary.mean),
            percent(summary.ci95)
        );
    }
    Ok(())
}
