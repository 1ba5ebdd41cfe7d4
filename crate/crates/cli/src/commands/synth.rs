use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use midfsl::data::{generate_synthetic, Split, SynthSpec};

use crate::config::{seed_override, write_toml, ConfigError};

#[derive(clap::Args)]
pub struct Args {
    /// Generator spec (TOML); omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn run(args: Args) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let value: toml::Table = toml::from_str(&text)
                .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))?;
            // start from the defaults so a partial spec is enough
            let mut full = toml::Table::try_from(SynthSpec::default())?;
            full.extend(value);
            full.try_into::<SynthSpec>()
                .map_err(|e| ConfigError(format!("{}: {}", path.display(), e.message())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    let manifest = generate_synthetic(&spec, &args.out)?;
    write_toml(&args.out.join("synth_spec.toml"), &spec)?;
    let count = |s: Split| manifest.classes_in(s).count();
    let files: usize = manifest.classes.iter().map(|c| c.samples.len()).sum();
    println!(
        "{} base and {} novel classes ({:?}), {files} images written to {}",
        count(Split::Base),
        count(Split::Novel),
        spec.domain_style,
        args.out.display()
    );
    Ok(())
}
