pub mod eval;
pub mod pad;
pub mod plot;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use midfsl::data::{load_manifest, DatasetManifest, LabeledImages, Split};
use midfsl::Checkpoint;
use serde::Serialize;

use crate::config::seed_override;

/// Which classes of a dataset to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Base,
    Val,
    Novel,
    All,
}

impl SplitArg {
    pub fn name(self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Val => "val",
            Self::Novel => "novel",
            Self::All => "all",
        }
    }

    fn splits(self) -> Vec<Split> {
        match self {
            Self::Base => vec![Split::Base],
            Self::Val => vec![Split::Val],
            Self::Novel => vec![Split::Novel],
            Self::All => vec![Split::Base, Split::Val, Split::Novel],
        }
    }
}

pub fn open_dataset(root: &Path) -> Result<DatasetManifest> {
    load_manifest(root).with_context(|| format!("opening dataset {}", root.display()))
}

/// Images of `split` at the checkpoint's input size, standardized with the
/// checkpoint's normalizer.
pub fn load_for(ckpt: &Checkpoint, manifest: &DatasetManifest, split: SplitArg) -> Result<LabeledImages> {
    let (h, w, c) = ckpt.network.config.input_shape;
    let mut out: Option<LabeledImages> = None;
    for s in split.splits() {
        let part = manifest.load_split(s, (h, w), c)?;
        out = Some(match out {
            None => part,
            Some(mut acc) => {
                let offset = acc.class_names.len();
                acc.class_names.extend(part.class_names);
                acc.labels.extend(part.labels.into_iter().map(|y| y + offset));
                acc.images.extend(part.images);
                acc
            }
        });
    }
    let mut data = out.expect("at least one split");
    match &ckpt.normalizer {
        Some(n) => n.apply(&mut data),
        None => log::warn!("checkpoint has no normalizer; using raw pixel values"),
    }
    Ok(data)
}

/// Explicit seed, else `MIDFSL_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => seed_override()?.unwrap_or(0),
    })
}

/// `dir/stem.config.toml` next to an output file.
pub fn config_path_for(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    output.with_file_name(format!("{stem}.config.toml"))
}

pub fn percent(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}
