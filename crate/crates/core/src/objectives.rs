//! Classification, reconstruction and residual-prediction losses.
//!
//! Each loss exists twice: as a plain-value function over one sample (used
//! for evaluation and as the numeric reference) and as a tape builder over a
//! batch ([`build_losses`]) that the trainer differentiates.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_sum_exp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{self, PrototypeBank, Residual, SplitReconstruction};
use crate::network::{self, BoundNetwork, ClassifierHead, MidFeatureSet, Network, ResidualHeads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Cosine-classifier temperature `τ`.
    pub temperature: f64,
    /// Weight of the length term inside the prediction loss.
    pub alpha: f64,
    /// Weight of the reconstruction loss.
    pub lambda1: f64,
    /// Weight of the residual-prediction loss.
    pub lambda2: f64,
    /// Channel splits `S` used for reconstruction.
    pub splits: usize,
    /// Neighbouring prototypes `m` averaged per split.
    pub neighbors: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 10.0,
            alpha: 0.1,
            lambda1: 0.5,
            lambda2: 0.5,
            splits: 4,
            neighbors: 4,
        }
    }
}

impl LossConfig {
    /// Checks the config against feature dimension `d` and class count `n`.
    pub fn validate(&self, d: usize, n: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if self.splits == 0 || !d.is_multiple_of(self.splits) {
            return Err(Error::IndivisibleSplit {
                dim: d,
                splits: self.splits,
            });
        }
        if self.neighbors == 0 || self.neighbors + 1 > n {
            return Err(Error::InsufficientPrototypes {
                requested: self.neighbors,
                available: n.saturating_sub(1),
            });
        }
        Ok(())
    }
}

/// `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::UnknownLabel(label));
    }
    Ok((log_sum_exp(logits) - logits[label]).max(0.0))
}

/// Cross-entropy of the cosine classifier for one sample.
pub fn loss_cls(f: &[f64], label: usize, head: &ClassifierHead) -> Result<f64> {
    if label >= head.num_classes() {
        return Err(Error::UnknownLabel(label));
    }
    softmax_cross_entropy(&network::cosine_logits(f, head)?, label)
}

/// `‖f^c − R^c‖²` where `R` is rebuilt from the absolute prototypes of every
/// class except `label`.
pub fn loss_recon(
    f: &[f64],
    label: usize,
    bank: &PrototypeBank,
    cfg: &LossConfig,
) -> Result<(f64, SplitReconstruction)> {
    let bank = network::abs_prototypes(bank);
    let rec = geometry::split_reconstruct(f, &bank, Some(label), cfg.splits, cfg.neighbors)?;
    let f_c = geometry::l2_normalize(f)?;
    let r_c = geometry::l2_normalize(&rec.reconstructed)?;
    let loss = f_c.iter().zip(&r_c).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((loss, rec))
}

/// Residual of `f` against its reconstruction, with the cosine clamped to
/// the prolonging floor so that training never aborts on one sample.
pub fn residual_target(f: &[f64], rec: &SplitReconstruction) -> Result<Residual> {
    let f_c = geometry::l2_normalize(f)?;
    let r_c = geometry::l2_normalize(&rec.reconstructed)?;
    geometry::residual_clamped(&f_c, &r_c)
}

/// `‖r̂^c − r^c‖² + α (r̂^s − ‖r‖)²`; the direction term is dropped for a
/// degenerate (zero) target.
pub fn loss_mid(
    target: &Residual,
    mids: &MidFeatureSet,
    heads: &ResidualHeads,
    cfg: &LossConfig,
) -> Result<f64> {
    let (dir, _) = network::predict_direction(mids, heads)?;
    let (len, _) = network::predict_length(mids, heads)?;
    Ok(mid_loss_from_predictions(target, &dir, len, cfg.alpha))
}

pub fn mid_loss_from_predictions(target: &Residual, dir: &[f64], len: f64, alpha: f64) -> f64 {
    let dir_term = if target.degenerate {
        0.0
    } else {
        dir.iter()
            .zip(&target.direction)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    dir_term + alpha * (len - target.length).powi(2)
}

/// The three loss values of one sample or batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub recon: f64,
    pub mid: f64,
}

/// `L_cls + λ₁ L_recon + λ₂ L_mid`.
pub fn loss_total(parts: LossParts, cfg: &LossConfig) -> f64 {
    parts.cls + cfg.lambda1 * parts.recon + cfg.lambda2 * parts.mid
}

/// Which terms a training graph contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Classification, reconstruction and residual prediction.
    Full,
    /// Classification only: the plain cosine classifier.
    CosineBaseline,
}

/// Per-step constants of the batch loss: the top-m prototype selection and
/// the detached residual targets.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    /// `[B * S * m]` prototype rows.
    pub selection: Vec<usize>,
    /// `[B, d]` target directions (zero rows for degenerate targets).
    pub directions: Tensor,
    /// `[B]`, 0 where the target is degenerate.
    pub direction_mask: Tensor,
    /// `[B, 1]`
    pub lengths: Tensor,
}

impl StepTargets {
    /// Computes selection and residual targets from the current feature
    /// values `f` (`[B, d]`) and the current prototypes.
    pub fn compute(
        f: &Tensor,
        labels: &[usize],
        classifier: &ClassifierHead,
        cfg: &LossConfig,
    ) -> Result<Self> {
        let bank = network::abs_prototypes(&classifier.bank()?);
        let d = f.row_len();
        let b = f.rows();
        let mut selection = Vec::with_capacity(b * cfg.splits * cfg.neighbors);
        let mut directions = Vec::with_capacity(b * d);
        let mut mask = Vec::with_capacity(b);
        let mut lengths = Vec::with_capacity(b);
        for (i, &y) in labels.iter().enumerate() {
            let row = f.row(i);
            let rec = geometry::split_reconstruct(row, &bank, Some(y), cfg.splits, cfg.neighbors)?;
            for s in &rec.selected_indices {
                selection.extend_from_slice(s);
            }
            // a dead (all-zero) feature has no residual to predict
            let target = match residual_target(row, &rec) {
                Err(Error::ZeroVector { .. }) => Residual {
                    direction: vec![0.0; d],
                    length: 0.0,
                    cosine: 0.0,
                    degenerate: true,
                },
                other => other?,
            };
            directions.extend_from_slice(&target.direction);
            mask.push(if target.degenerate { 0.0 } else { 1.0 });
            lengths.push(target.length);
        }
        Ok(Self {
            selection,
            directions: Tensor::new(vec![b, d], directions),
            direction_mask: Tensor::new(vec![b], mask),
            lengths: Tensor::new(vec![b, 1], lengths),
        })
    }
}

/// Tape handles of the batch-mean losses.
pub struct BatchLosses {
    pub cls: Var,
    pub recon: Option<Var>,
    pub mid: Option<Var>,
    pub total: Var,
    /// Final features `[B, d]`.
    pub features: Var,
}

/// Builds the batch losses on `g` for images `x` (`[B, C, H, W]`).
///
/// With `targets = None` the selection and residual targets are derived from
/// the forward values; passing them in freezes them, which gradient checks
/// rely on. When `mid_into_backbone` is false the mid features are detached
/// before the heads.
#[allow(clippy::too_many_arguments)]
pub fn build_losses(
    g: &mut Graph,
    net: &Network,
    p: &BoundNetwork,
    x: Var,
    labels: &[usize],
    cfg: &LossConfig,
    objective: Objective,
    mid_into_backbone: bool,
    targets: Option<&StepTargets>,
) -> Result<(BatchLosses, Option<StepTargets>)> {
    let n = net.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::UnknownLabel(bad));
    }
    let (f, mids) = net.forward_graph(g, p, x);
    let logits = net.logits_graph(g, p, f);
    let cls = g.cross_entropy(logits, labels);
    if objective == Objective::CosineBaseline {
        return Ok((
            BatchLosses {
                cls,
                recon: None,
                mid: None,
                total: cls,
                features: f,
            },
            None,
        ));
    }

    let computed = match targets {
        Some(_) => None,
        None => Some(StepTargets::compute(g.value(f), labels, &net.classifier, cfg)?),
    };
    let t = targets.or(computed.as_ref()).expect("targets given or computed");

    // reconstruction from the other classes' absolute prototypes
    let w_abs = g.abs(p.classifier());
    let rec = g.gather_split_mean(w_abs, t.selection.clone(), cfg.splits, cfg.neighbors);
    let rec_c = g.normalize_rows(rec);
    let f_c = g.normalize_rows(f);
    let diff = g.sub(f_c, rec_c);
    let sq = g.row_sq_norm(diff);
    let recon = g.mean(sq);

    // residual prediction from mid features
    let mids: Vec<Var> = if mid_into_backbone {
        mids
    } else {
        mids.into_iter().map(|m| g.detach(m)).collect()
    };
    let heads = net.heads_graph(g, p, &mids);
    let dir_target = g.constant(t.directions.clone());
    let mask = g.constant(t.direction_mask.clone());
    let len_target = g.constant(t.lengths.clone());
    let dd = g.sub(heads.direction, dir_target);
    let dir_sq = g.row_sq_norm(dd);
    let dir_term = g.mul(dir_sq, mask);
    let ld = g.sub(heads.length, len_target);
    let len_sq = g.row_sq_norm(ld);
    let len_term = g.scale(len_sq, cfg.alpha);
    let per_sample = g.add(dir_term, len_term);
    let mid = g.mean(per_sample);

    let total = g.weighted_sum(&[(cls, 1.0), (recon, cfg.lambda1), (mid, cfg.lambda2)]);
    Ok((
        BatchLosses {
            cls,
            recon: Some(recon),
            mid: Some(mid),
            total,
            features: f,
        },
        computed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        let tau = 10.0;
        let l = softmax_cross_entropy(&[tau, -tau], 0).unwrap();
        // -log σ(20) = log(1 + e^-20)
        assert_abs_diff_eq!(l, (-20f64).exp().ln_1p(), epsilon = 1e-15);
        assert!((l - 2.06e-9).abs() < 1e-11);
        assert_abs_diff_eq!(
            softmax_cross_entropy(&[0.3; 5], 2).unwrap(),
            5f64.ln(),
            epsilon = 1e-12
        );
        assert!(matches!(
            softmax_cross_entropy(&[0.0; 3], 3),
            Err(Error::UnknownLabel(3))
        ));
    }

    #[test]
    fn loss_cls_unknown_label() {
        let head = ClassifierHead {
            weights: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            temperature: 10.0,
        };
        assert!(matches!(
            loss_cls(&[1.0, 1.0], 2, &head),
            Err(Error::UnknownLabel(2))
        ));
        assert!(loss_cls(&[1.0, 0.0], 0, &head).unwrap() < loss_cls(&[1.0, 0.0], 1, &head).unwrap());
    }

    #[test]
    fn recon_examples() {
        let cfg = LossConfig {
            splits: 1,
            neighbors: 1,
            ..LossConfig::default()
        };
        let bank = PrototypeBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 1.0]]).unwrap();
        let (l, _) = loss_recon(&[0.0, 4.0, 2.0], 0, &bank, &cfg).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
        let (l, _) = loss_recon(&[1.0, 0.0, 0.0], 0, &bank, &cfg).unwrap();
        assert_abs_diff_eq!(l, 2.0, epsilon = 1e-15);
        // negative prototype entries are used in absolute value
        let signed = PrototypeBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, -2.0, 1.0]]).unwrap();
        let (l, _) = loss_recon(&[0.0, 4.0, 2.0], 0, &signed, &cfg).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-15);
    }

    fn target(direction: Vec<f64>, length: f64) -> Residual {
        Residual {
            direction,
            length,
            cosine: 0.5,
            degenerate: false,
        }
    }

    #[test]
    fn mid_examples() {
        let t = target(vec![1.0, 0.0], 0.7);
        assert_eq!(mid_loss_from_predictions(&t, &[1.0, 0.0], 0.7, 0.1), 0.0);
        assert_abs_diff_eq!(
            mid_loss_from_predictions(&t, &[-1.0, 0.0], 0.7, 0.1),
            4.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            mid_loss_from_predictions(&t, &[0.0, 1.0], 1.2, 1.0),
            2.25,
            epsilon = 1e-15
        );
        let degenerate = Residual {
            direction: vec![0.0, 0.0],
            length: 0.0,
            cosine: 1.0,
            degenerate: true,
        };
        assert_abs_diff_eq!(
            mid_loss_from_predictions(&degenerate, &[0.0, 1.0], 0.5, 1.0),
            0.25,
            epsilon = 1e-15
        );
    }

    #[test]
    fn total_examples() {
        let parts = LossParts {
            cls: 1.0,
            recon: 0.2,
            mid: 0.5,
        };
        let mut cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(loss_total(parts, &cfg), 1.0);
        cfg.lambda1 = 1.0;
        cfg.lambda2 = 2.0;
        assert_abs_diff_eq!(loss_total(parts, &cfg), 2.2, epsilon = 1e-15);
    }

    #[test]
    fn config_validation() {
        let cfg = LossConfig::default();
        assert!(cfg.validate(64, 8).is_ok());
        assert!(matches!(cfg.validate(6, 8), Err(Error::IndivisibleSplit { .. })));
        assert!(matches!(
            cfg.validate(64, 4),
            Err(Error::InsufficientPrototypes { .. })
        ));
        let neg = LossConfig { alpha: -1.0, ..cfg };
        assert!(neg.validate(64, 8).is_err());
    }
}
