//! K-way n-shot evaluation on novel classes.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::geometry;
use crate::network::{self, Extracted, Network};
use crate::objectives::LossConfig;

/// Which vector represents an image at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Gate-weighted concatenation of normalized mid features.
    Distant,
    /// Reconstruction from all base prototypes plus the predicted residual.
    Near,
    /// The final-layer feature.
    Final,
    /// Unweighted concatenation of normalized mid features.
    MidConcat,
}

impl FeatureMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Distant => "distant",
            Self::Near => "near",
            Self::Final => "final",
            Self::MidConcat => "mid-concat",
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distant" => Ok(Self::Distant),
            "near" => Ok(Self::Near),
            "final" => Ok(Self::Final),
            "mid-concat" => Ok(Self::MidConcat),
            other => Err(Error::InvalidConfig(format!("unknown feature mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot == 0 || self.queries == 0 || self.episodes == 0 {
            return Err(Error::InvalidConfig(format!(
                "episodes need way >= 2 and positive shot, queries and count, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One task. Episode labels are positions in `classes`; sample entries are
/// indices into the source dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Dataset class ids, in episode-label order.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Sample indices grouped by class id.
fn group_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); n];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

fn check_groups(groups: &[Vec<usize>], cfg: &EpisodeConfig) -> Result<()> {
    if groups.len() < cfg.way {
        return Err(Error::InsufficientData(format!(
            "{}-way episodes need {} classes, dataset has {}",
            cfg.way,
            cfg.way,
            groups.len()
        )));
    }
    let need = cfg.shot + cfg.queries;
    if let Some(g) = groups.iter().find(|g| g.len() < need) {
        return Err(Error::InsufficientData(format!(
            "every class needs {need} samples, one has {}",
            g.len()
        )));
    }
    Ok(())
}

fn sample_grouped(
    groups: &[Vec<usize>],
    labels: &[usize],
    cfg: &EpisodeConfig,
    rng: &mut impl Rng,
) -> Episode {
    let picked = rand::seq::index::sample(rng, groups.len(), cfg.way);
    let mut ep = Episode {
        way: cfg.way,
        shot: cfg.shot,
        queries: cfg.queries,
        classes: Vec::with_capacity(cfg.way),
        support: Vec::with_capacity(cfg.way * cfg.shot),
        support_labels: Vec::with_capacity(cfg.way * cfg.shot),
        query: Vec::with_capacity(cfg.way * cfg.queries),
        query_labels: Vec::with_capacity(cfg.way * cfg.queries),
    };
    for (label, g) in picked.into_iter().enumerate() {
        let members = &groups[g];
        ep.classes.push(labels[members[0]]);
        let chosen = rand::seq::index::sample(rng, members.len(), cfg.shot + cfg.queries);
        for (j, k) in chosen.into_iter().enumerate() {
            if j < cfg.shot {
                ep.support.push(members[k]);
                ep.support_labels.push(label);
            } else {
                ep.query.push(members[k]);
                ep.query_labels.push(label);
            }
        }
    }
    ep
}

/// Draws `way` classes uniformly without replacement, then `shot + queries`
/// distinct samples from each.
pub fn sample_episode(labels: &[usize], cfg: &EpisodeConfig, rng: &mut impl Rng) -> Result<Episode> {
    cfg.validate()?;
    let groups = group_by_class(labels);
    check_groups(&groups, cfg)?;
    Ok(sample_grouped(&groups, labels, cfg, rng))
}

/// `F_a`: the concatenation over taps of `a_l · m_l / ‖m_l‖`.
pub fn feature_distant(x: &Extracted, net: &Network) -> Result<Vec<f64>> {
    let weights = network::direction_weights(&x.mids, &net.heads)?;
    let mut out = Vec::with_capacity(x.mids.features.iter().map(Vec::len).sum());
    for (m, a) in x.mids.features.iter().zip(weights) {
        out.extend(geometry::l2_normalize(m)?.into_iter().map(|v| a * v));
    }
    Ok(out)
}

/// `F_b = R^c + r̂^s r̂^c`, reconstructing from every base prototype.
pub fn feature_near(x: &Extracted, net: &Network, loss: &LossConfig) -> Result<Vec<f64>> {
    let bank = network::abs_prototypes(&net.classifier.bank()?);
    let rec = geometry::split_reconstruct(&x.feature, &bank, None, loss.splits, loss.neighbors)?;
    let r_c = geometry::l2_normalize(&rec.reconstructed)?;
    let (dir, _) = network::predict_direction(&x.mids, &net.heads)?;
    let (len, _) = network::predict_length(&x.mids, &net.heads)?;
    Ok(r_c.iter().zip(&dir).map(|(r, d)| r + len * d).collect())
}

/// Normalized mid features, concatenated with equal weight.
pub fn feature_mid_concat(x: &Extracted) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for m in &x.mids.features {
        out.extend(geometry::l2_normalize(m)?);
    }
    Ok(out)
}

pub fn feature_for(x: &Extracted, net: &Network, mode: FeatureMode, loss: &LossConfig) -> Result<Vec<f64>> {
    match mode {
        FeatureMode::Distant => feature_distant(x, net),
        FeatureMode::Near => feature_near(x, net, loss),
        FeatureMode::Final => Ok(x.feature.clone()),
        FeatureMode::MidConcat => feature_mid_concat(x),
    }
}

/// Runs the network over `images` and builds the requested features.
pub fn extract_features(
    net: &Network,
    images: &[Vec<f64>],
    mode: FeatureMode,
    loss: &LossConfig,
) -> Result<Vec<Vec<f64>>> {
    net.extract(images, 64)?
        .iter()
        .map(|x| feature_for(x, net, mode, loss))
        .collect()
}

/// Mean support feature of each of `way` classes.
pub fn class_prototypes(features: &[&[f64]], labels: &[usize], way: usize) -> Result<Vec<Vec<f64>>> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut sums = vec![vec![0.0; dim]; way];
    let mut counts = vec![0usize; way];
    for (f, &y) in features.iter().zip(labels) {
        if y >= way {
            return Err(Error::UnknownLabel(y));
        }
        if f.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "support feature of length {} vs {dim}",
                f.len()
            )));
        }
        sums[y].iter_mut().zip(f.iter()).for_each(|(s, v)| *s += v);
        counts[y] += 1;
    }
    for (c, (s, &n)) in sums.iter_mut().zip(&counts).enumerate() {
        if n == 0 {
            return Err(Error::EmptyClass(c));
        }
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok(sums)
}

/// Cosine nearest prototype; ties go to the lower class index.
pub fn classify_nn(queries: &[&[f64]], prototypes: &[Vec<f64>]) -> Result<Vec<usize>> {
    let protos: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| geometry::l2_normalize(p))
        .collect::<Result<_>>()?;
    queries
        .iter()
        .map(|q| {
            let q = geometry::l2_normalize(q)?;
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, p) in protos.iter().enumerate() {
                let s = geometry::dot(&q, p);
                if s > best.0 {
                    best = (s, i);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Per-episode accuracies and their summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episode_accuracies: Vec<f64>,
    pub mean: f64,
    /// `1.96 · σ / √n` with the population standard deviation.
    pub ci95: f64,
}

impl EvalSummary {
    pub fn from_accuracies(episode_accuracies: Vec<f64>) -> Self {
        let n = episode_accuracies.len() as f64;
        let mean = episode_accuracies.iter().sum::<f64>() / n;
        let var = episode_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self {
            ci95: 1.96 * var.sqrt() / n.sqrt(),
            mean,
            episode_accuracies,
        }
    }
}

/// Runs one episode on precomputed features.
pub fn run_episode(features: &[Vec<f64>], ep: &Episode) -> Result<f64> {
    let support: Vec<&[f64]> = ep.support.iter().map(|&i| features[i].as_slice()).collect();
    let query: Vec<&[f64]> = ep.query.iter().map(|&i| features[i].as_slice()).collect();
    let protos = class_prototypes(&support, &ep.support_labels, ep.way)?;
    let predicted = classify_nn(&query, &protos)?;
    let hits = predicted
        .iter()
        .zip(&ep.query_labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / ep.query.len() as f64)
}

/// Episode `i` draws from its own stream of the seed, so any subset of
/// episodes can be replayed independently.
pub fn episode_rng(seed: u64, episode: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Evaluates `cfg.episodes` episodes over one feature per sample.
pub fn evaluate_features(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<EvalSummary> {
    cfg.validate()?;
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let groups = group_by_class(labels);
    check_groups(&groups, cfg)?;
    let accs = (0..cfg.episodes)
        .map(|e| {
            run_episode(
                features,
                &sample_grouped(&groups, labels, cfg, &mut episode_rng(seed, e)),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_accuracies(accs))
}

/// Extracts features of `data` with `net` and evaluates them.
pub fn evaluate(
    net: &Network,
    data: &LabeledImages,
    cfg: &EpisodeConfig,
    mode: FeatureMode,
    loss: &LossConfig,
    seed: u64,
) -> Result<EvalSummary> {
    cfg.validate()?;
    check_groups(&group_by_class(&data.labels), cfg)?;
    let features = extract_features(net, &data.images, mode, loss)?;
    evaluate_features(&features, &data.labels, cfg, seed)
}

#[derive(Serialize)]
struct EpisodeLine {
    episode: usize,
    accuracy: f64,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: bool,
    episodes: usize,
    mean: f64,
    ci95: f64,
    feature_mode: &'a str,
    feature_dim: usize,
    fingerprint: &'a str,
}

/// Writes one JSON line per episode followed by a summary line.
pub fn write_results(
    path: impl AsRef<Path>,
    summary: &EvalSummary,
    mode: FeatureMode,
    feature_dim: usize,
    fingerprint: &str,
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for (episode, &accuracy) in summary.episode_accuracies.iter().enumerate() {
        serde_json::to_writer(&mut out, &EpisodeLine { episode, accuracy })?;
        out.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut out,
        &SummaryLine {
            summary: true,
            episodes: summary.episode_accuracies.len(),
            mean: summary.mean,
            ci95: summary.ci95,
            feature_mode: mode.as_str(),
            feature_dim,
            fingerprint,
        },
    )?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Per-episode accuracies read back from a results file.
pub fn read_episode_accuracies(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(a) = v.get("accuracy").and_then(serde_json::Value::as_f64) {
            out.push(a);
        }
    }
    Ok(out)
}
