//! Proxy-A-distance between two feature corpora.
//!
//! A linear logistic discriminator is cross-validated on A-vs-B; its
//! class-balanced held-out error `ε` gives `PAD = 2 (1 − 2ε)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PadConfig {
    pub folds: usize,
    /// Full-batch gradient steps per fold.
    pub iterations: usize,
    /// L2 penalty on the discriminator weights.
    pub l2: f64,
}

impl Default for PadConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            iterations: 300,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PadReport {
    pub pad: f64,
    /// Balanced error pooled over all held-out predictions.
    pub balanced_error: f64,
    /// Balanced error of each fold.
    pub fold_errors: Vec<f64>,
}

/// Fold id per sample. The permutation depends only on the seed and the
/// corpus size, so swapping A and B swaps their folds too.
fn fold_ids(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut ids = vec![0; n];
    for (rank, &i) in perm.iter().enumerate() {
        ids[i] = rank % folds;
    }
    ids
}

struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn standardize(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.mean[j]) * self.scale[j];
        }
    }

    fn score(&self, x: &[f64], buf: &mut [f64]) -> f64 {
        self.standardize(x, buf);
        buf.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }

    /// Class-balanced logistic regression; `y` is true for corpus B.
    fn fit(xs: &[&[f64]], ys: &[bool], cfg: &PadConfig) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            mean.iter_mut().zip(x.iter()).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for x in xs {
            for j in 0..d {
                var[j] += (x[j] - mean[j]).powi(2) / n;
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 })
            .collect();
        let mut model = Self {
            mean,
            scale,
            w: vec![0.0; d],
            b: 0.0,
        };
        let mut z = vec![vec![0.0; d]; xs.len()];
        for (x, zi) in xs.iter().zip(z.iter_mut()) {
            model.standardize(x, zi);
        }
        let n_pos = ys.iter().filter(|&&y| y).count() as f64;
        let n_neg = n - n_pos;
        let weight: Vec<f64> = ys
            .iter()
            .map(|&y| if y { 0.5 / n_pos } else { 0.5 / n_neg })
            .collect();

        // step size from the curvature bound 0.25 λ_max(Σ_i w_i z_i z_iᵀ)
        let lambda = power_iteration(&z, &weight);
        let lr = 1.0 / (0.25 * (lambda + 1.0) + cfg.l2);

        let mut gw = vec![0.0; d];
        for _ in 0..cfg.iterations {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for ((zi, &y), &wt) in z.iter().zip(ys).zip(&weight) {
                let s = zi.iter().zip(&model.w).map(|(a, b)| a * b).sum::<f64>() + model.b;
                let p = 1.0 / (1.0 + (-s).exp());
                let r = wt * (p - if y { 1.0 } else { 0.0 });
                gw.iter_mut().zip(zi).for_each(|(g, v)| *g += r * v);
                gb += r;
            }
            for (w, g) in model.w.iter_mut().zip(&gw) {
                *w -= lr * (g + cfg.l2 * *w);
            }
            model.b -= lr * gb;
        }
        model
    }
}

fn power_iteration(z: &[Vec<f64>], weight: &[f64]) -> f64 {
    let d = z[0].len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..30 {
        let mut next = vec![0.0; d];
        for (zi, &w) in z.iter().zip(weight) {
            let proj = w * zi.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            next.iter_mut().zip(zi).for_each(|(o, x)| *o += proj * x);
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = next.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Cross-validated PAD between corpora `a` and `b`, clamped to `[0, 2]`.
pub fn compute_pad(a: &[Vec<f64>], b: &[Vec<f64>], cfg: &PadConfig, seed: u64) -> Result<PadReport> {
    if cfg.folds < 2 {
        return Err(Error::InvalidConfig("PAD needs at least 2 folds".into()));
    }
    if a.len() < cfg.folds || b.len() < cfg.folds {
        return Err(Error::InsufficientData(format!(
            "{}-fold PAD needs {} samples per corpus, got {} and {}",
            cfg.folds,
            cfg.folds,
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::ShapeMismatch(
            "PAD corpora need one common nonzero width".into(),
        ));
    }
    let fa = fold_ids(a.len(), cfg.folds, seed);
    let fb = fold_ids(b.len(), cfg.folds, seed);

    let mut fold_errors = Vec::with_capacity(cfg.folds);
    let (mut miss_a, mut miss_b) = (0usize, 0usize);
    let mut buf = vec![0.0; d];
    for k in 0..cfg.folds {
        let mut xs: Vec<&[f64]> = Vec::new();
        let mut ys = Vec::new();
        for (x, &f) in a.iter().zip(&fa) {
            if f != k {
                xs.push(x);
                ys.push(false);
            }
        }
        for (x, &f) in b.iter().zip(&fb) {
            if f != k {
                xs.push(x);
                ys.push(true);
            }
        }
        let model = Logistic::fit(&xs, &ys, cfg);
        let (mut ea, mut na, mut eb, mut nb) = (0usize, 0usize, 0usize, 0usize);
        for (x, _) in a.iter().zip(&fa).filter(|(_, &f)| f == k) {
            na += 1;
            if model.score(x, &mut buf) > 0.0 {
                ea += 1;
            }
        }
        for (x, _) in b.iter().zip(&fb).filter(|(_, &f)| f == k) {
            nb += 1;
            if model.score(x, &mut buf) <= 0.0 {
                eb += 1;
            }
        }
        fold_errors.push(0.5 * (ea as f64 / na as f64 + eb as f64 / nb as f64));
        miss_a += ea;
        miss_b += eb;
    }
    let balanced_error = 0.5 * (miss_a as f64 / a.len() as f64 + miss_b as f64 / b.len() as f64);
    Ok(PadReport {
        pad: pad_from_error(balanced_error),
        balanced_error,
        fold_errors,
    })
}

/// `2 (1 − 2ε)` clamped to `[0, 2]`.
pub fn pad_from_error(error: f64) -> f64 {
    (2.0 * (1.0 - 2.0 * error)).clamp(0.0, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        z + if j == 0 { shift } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_distributions_are_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let all = gaussian(2000, 8, 0.0, &mut rng);
        let (a, b) = all.split_at(1000);
        let r = compute_pad(a, b, &PadConfig::default(), 0).unwrap();
        assert!(r.pad <= 0.15, "{r:?}");
        assert_eq!(r.fold_errors.len(), 5);
    }

    #[test]
    fn separated_distributions_are_far() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = gaussian(1000, 8, 0.0, &mut rng);
        let b = gaussian(1000, 8, 10.0, &mut rng);
        let r = compute_pad(&a, &b, &PadConfig::default(), 0).unwrap();
        assert!(r.pad >= 1.9, "{r:?}");
    }

    #[test]
    fn clamping() {
        assert_eq!(pad_from_error(0.7), 0.0);
        assert_eq!(pad_from_error(0.0), 2.0);
        assert_eq!(pad_from_error(0.25), 1.0);
    }

    #[test]
    fn swapping_corpora_mirrors_the_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gaussian(120, 5, 0.0, &mut rng);
        let b = gaussian(90, 5, 0.8, &mut rng);
        let ab = compute_pad(&a, &b, &PadConfig::default(), 7).unwrap();
        let ba = compute_pad(&b, &a, &PadConfig::default(), 7).unwrap();
        assert!((ab.pad - ba.pad).abs() <= 0.05, "{ab:?} {ba:?}");
    }

    #[test]
    fn too_small_corpora() {
        let a = vec![vec![0.0]; 3];
        assert!(matches!(
            compute_pad(&a, &a, &PadConfig::default(), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn separation_is_monotone() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = gaussian(200, 4, 0.0, &mut rng);
            let mut last = 0.0;
            for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
                let b = gaussian(200, 4, shift, &mut rng);
                let pad = compute_pad(&a, &b, &PadConfig::default(), seed).unwrap().pad;
                assert!(pad >= last - 0.15, "seed {seed} shift {shift}: {pad} < {last}");
                last = last.max(pad);
            }
        }
    }
}
