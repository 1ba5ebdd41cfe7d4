//! Base-class training: every sample is classified, reconstructed from the
//! other classes' prototypes, and its residual is predicted from mid-level
//! features; the weighted sum of the three losses is minimized with SGD.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Tensor};
use crate::data::{Augment, LabeledImages, Normalizer};
use crate::episodic::{self, EpisodeConfig, FeatureMode};
use crate::error::{Error, Result};
use crate::network::{BackboneConfig, Network};
use crate::objectives::{self, LossConfig, Objective};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Step decay: the rate is multiplied by `factor` at every milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub initial: f64,
    /// Zero-based epochs at which the decay is applied.
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.05,
            milestones: vec![20, 30],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(drops as i32)
    }
}

/// Periodic episodic validation on a held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub every: usize,
    pub mode: FeatureMode,
    #[serde(default)]
    pub episodes: EpisodeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Whether the prediction loss reaches the backbone through the mid
    /// features, or only trains the heads.
    pub mid_grad_into_backbone: bool,
    pub augment: Augment,
    pub validation: Option<ValidationConfig>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            backbone: BackboneConfig::default(),
            objective: Objective::Full,
            epochs: 40,
            batch_size: 64,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            mid_grad_into_backbone: true,
            augment: Augment::default(),
            validation: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.initial > 0.0) || !self.lr.initial.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.lr.factor > 0.0 && self.lr.factor <= 1.0) {
            return bad("lr decay factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be nonnegative");
        }
        if let Some(v) = &self.validation {
            if v.every == 0 {
                return bad("validation.every must be at least 1");
            }
        }
        self.backbone.validate()?;
        if self.objective == Objective::Full {
            self.loss.validate(self.backbone.feature_dim(), num_classes)?;
        }
        Ok(())
    }

    /// Short content hash identifying this configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_cls: f64,
    pub loss_recon: Option<f64>,
    pub loss_mid: Option<f64>,
    pub train_accuracy: f64,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

impl EpochRecord {
    /// The record without its wall-clock field, for reproducibility checks.
    pub fn deterministic_part(&self) -> (usize, f64, f64, Option<f64>, Option<f64>, f64, Option<f64>) {
        (
            self.epoch,
            self.lr,
            self.loss_cls,
            self.loss_recon,
            self.loss_mid,
            self.train_accuracy,
            self.val_accuracy,
        )
    }
}

/// Parameters, optimizer state and progress of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub network: Network,
    pub velocity: Vec<Tensor>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub network: Network,
    pub normalizer: Option<Normalizer>,
    pub train_config: TrainConfig,
    pub config_fingerprint: String,
    pub epoch: usize,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptArchive(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptArchive("missing format_version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::CorruptArchive(e.to_string()))
}

/// Final state of a run plus the checkpoint to keep (the best-validation one
/// when validation is configured, otherwise the last).
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: Checkpoint,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SGD with momentum and decoupled-from-nothing L2 weight decay:
/// `v ← μ v + g + λ w`, `w ← w − η v`.
fn sgd_step(
    net: &mut Network,
    grads: &[Option<Vec<f64>>],
    velocity: &mut [Tensor],
    cfg: &TrainConfig,
    lr: f64,
) {
    for ((w, g), v) in net
        .parameters_mut()
        .into_iter()
        .zip(grads)
        .zip(velocity.iter_mut())
    {
        for i in 0..w.data.len() {
            let gi = g.as_ref().map_or(0.0, |g| g[i]) + cfg.weight_decay * w.data[i];
            v.data[i] = cfg.momentum * v.data[i] + gi;
            w.data[i] -= lr * v.data[i];
        }
    }
}

/// Trains on `base` (already normalized images with labels `0..N`).
/// `on_epoch` sees every log record as soon as it is produced.
pub fn train_base(
    cfg: &TrainConfig,
    base: &LabeledImages,
    validation: Option<&LabeledImages>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let n_classes = base.num_classes();
    if base.is_empty() || n_classes < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; n_classes];
    for &y in &base.labels {
        *counts.get_mut(y).ok_or(Error::UnknownLabel(y))? += 1;
    }
    if counts.contains(&0) {
        return Err(Error::EmptyDataset);
    }
    cfg.validate(n_classes)?;
    let (h, w, c) = cfg.backbone.input_shape;
    if base.shape != (h, w, c) {
        return Err(Error::ShapeMismatch(format!(
            "dataset images {:?} vs backbone input {:?}",
            base.shape, cfg.backbone.input_shape
        )));
    }

    let mut network = Network::new(
        cfg.backbone.clone(),
        n_classes,
        cfg.loss.temperature,
        &mut rng_for(cfg.seed, 0),
    )?;
    let mut velocity: Vec<Tensor> = network
        .parameters()
        .into_iter()
        .map(|(_, t)| Tensor::zeros(t.shape.clone()))
        .collect();
    let mut data_rng = rng_for(cfg.seed, 1);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Network, usize)> = None;
    let fingerprint = cfg.fingerprint();
    let mut log_file = match &cfg.checkpoint_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("epochs.jsonl"))?)
        }
        None => None,
    };

    let started = Instant::now();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at_epoch(epoch);
        order.shuffle(&mut data_rng);
        let (mut sum_cls, mut sum_recon, mut sum_mid, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * h * w * c);
            let labels: Vec<usize> = batch.iter().map(|&i| base.labels[i]).collect();
            for &i in batch {
                if cfg.augment.is_identity() {
                    x.extend_from_slice(&base.images[i]);
                } else {
                    x.extend(cfg.augment.apply(&base.images[i], base.shape, &mut data_rng));
                }
            }
            let mut g = Graph::new();
            let p = network.bind(&mut g);
            let xv = g.constant(Tensor::new(vec![batch.len(), c, h, w], x));
            let (losses, _) = objectives::build_losses(
                &mut g,
                &network,
                &p,
                xv,
                &labels,
                &cfg.loss,
                cfg.objective,
                cfg.mid_grad_into_backbone,
                None,
            )?;
            let finite = |v: f64, term: &'static str| {
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteLoss { term, epoch, step })
                }
            };
            let bs = batch.len() as f64;
            sum_cls += bs * finite(g.value(losses.cls).item(), "classification")?;
            if let Some(r) = losses.recon {
                sum_recon += bs * finite(g.value(r).item(), "reconstruction")?;
            }
            if let Some(m) = losses.mid {
                sum_mid += bs * finite(g.value(m).item(), "mid-level prediction")?;
            }
            correct += train_correct(&g, &network, losses.features, &labels);

            let mut grads = g.backward(losses.total);
            let flat: Vec<Option<Vec<f64>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
            sgd_step(&mut network, &flat, &mut velocity, cfg, lr);
            step += 1;
        }
        let n = base.len() as f64;
        let full = cfg.objective == Objective::Full;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss_cls: sum_cls / n,
            loss_recon: full.then_some(sum_recon / n),
            loss_mid: full.then_some(sum_mid / n),
            train_accuracy: correct as f64 / n,
            wall_time_s: started.elapsed().as_secs_f64(),
            val_accuracy: None,
        };
        if let (Some(vcfg), Some(val)) = (&cfg.validation, validation) {
            if (epoch + 1) % vcfg.every == 0 || epoch + 1 == cfg.epochs {
                let summary =
                    episodic::evaluate(&network, val, &vcfg.episodes, vcfg.mode, &cfg.loss, cfg.seed)?;
                record.val_accuracy = Some(summary.mean);
                if best.as_ref().is_none_or(|(b, _, _)| summary.mean > *b) {
                    best = Some((summary.mean, network.clone(), epoch + 1));
                }
            }
        }
        log::info!(
            "epoch {} lr {:.4} cls {:.4} recon {:?} mid {:?} acc {:.3}",
            record.epoch,
            record.lr,
            record.loss_cls,
            record.loss_recon,
            record.loss_mid,
            record.train_accuracy
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        on_epoch(&record);
        history.push(record);
    }

    let (kept, kept_epoch) = match best {
        Some((_, net, e)) => (net, e),
        None => (network.clone(), cfg.epochs),
    };
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        network: kept,
        normalizer: None,
        train_config: cfg.clone(),
        config_fingerprint: fingerprint,
        epoch: kept_epoch,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&checkpoint, dir.join("checkpoint.json"))?;
    }
    Ok(TrainOutcome {
        state: TrainState {
            network,
            velocity,
            epoch: cfg.epochs,
            history,
        },
        checkpoint,
    })
}

fn train_correct(g: &Graph, net: &Network, features: crate::autograd::Var, labels: &[usize]) -> usize {
    let f = g.value(features);
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            crate::network::cosine_logits(f.row(i), &net.classifier)
                .map(|l| argmax(&l) == y)
                .unwrap_or(false)
        })
        .count()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_never_increases() {
        let s = LrSchedule {
            initial: 0.1,
            milestones: vec![3, 6],
            factor: 0.5,
        };
        let rates: Vec<f64> = (0..10).map(|e| s.at_epoch(e)).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(rates[0], 0.1);
        assert_eq!(rates[3], 0.05);
        assert_eq!(rates[9], 0.025);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(8).is_ok());
        assert!(TrainConfig {
            epochs: 0,
            ..cfg.clone()
        }
        .validate(8)
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..cfg.clone()
        }
        .validate(8)
        .is_err());
        let mut bad_lr = cfg.clone();
        bad_lr.lr.initial = 0.0;
        assert!(bad_lr.validate(8).is_err());
        let mut growing = cfg.clone();
        growing.lr.factor = 2.0;
        assert!(growing.validate(8).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 9;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LabeledImages {
            images: vec![],
            labels: vec![],
            class_names: vec!["a".into(), "b".into()],
            shape: (32, 32, 1),
        };
        assert!(matches!(
            train_base(&TrainConfig::default(), &data, None, |_| {}),
            Err(Error::EmptyDataset)
        ));
    }
}
