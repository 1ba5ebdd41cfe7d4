use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use super::config_path_for;
use crate::config::write_toml;
use crate::plot::{render_bars, Bar};

#[derive(clap::Args)]
pub struct Args {
    /// Results files written by `midfsl eval`.
    #[arg(required = true)]
    results: Vec<PathBuf>,
    /// Output SVG.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated bar labels; default: file stem and feature mode.
    #[arg(long, value_delimiter = ',')]
    labels: Vec<String>,
    #[arg(long, default_value = "5-way accuracy")]
    title: String,
}

#[derive(Serialize)]
struct Effective<'a> {
    results: &'a [PathBuf],
    labels: Vec<String>,
    title: &'a str,
}

fn read_bar(path: &PathBuf) -> Result<(f64, f64, String)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for line in text.lines().rev().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
        if v.get("summary").and_then(serde_json::Value::as_bool) == Some(true) {
            let num = |k: &str| v.get(k).and_then(serde_json::Value::as_f64);
            let (Some(mean), Some(ci)) = (num("mean"), num("ci95")) else {
                break;
            };
            let mode = v
                .get("feature_mode")
                .and_then(serde_json::Value::as_str)
                .unwrap_or("?");
            return Ok((mean, ci, mode.to_string()));
        }
    }
    Err(anyhow!("{} has no summary record", path.display()))
}

pub fn run(args: Args) -> Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.results.len() {
        return Err(crate::config::ConfigError(format!(
            "{} labels for {} results files",
            args.labels.len(),
            args.results.len()
        ))
        .into());
    }
    let mut bars = Vec::with_capacity(args.results.len());
    for (i, path) in args.results.iter().enumerate() {
        let (mean, ci95, mode) = read_bar(path)?;
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
            format!("{stem} ({mode})")
        });
        bars.push(Bar { label, mean, ci95 });
    }
    fs::write(&args.out, render_bars(&args.title, &bars))
        .with_context(|| format!("writing {}", args.out.display()))?;
    write_toml(
        &config_path_for(&args.out),
        &Effective {
            results: &args.results,
            labels: bars.iter().map(|b| b.label.clone()).collect(),
            title: &args.title,
        },
    )?;
    println!("{} bars written to {}", bars.len(), args.out.display());
    Ok(())
}
