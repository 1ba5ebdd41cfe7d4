//! Feature-space geometry: normalization, cosine similarity, split-wise
//! prototype reconstruction, prolonging and residual extraction.
//!
//! Everything here is pure and deterministic. The trainable path in
//! [`crate::network`] and [`crate::objectives`] re-expresses the same
//! formulas over the autodiff graph; this module is the reference they are
//! checked against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const EPS_NORM: f64 = 1e-12;

/// Minimum cosine accepted by [`prolong`].
pub const EPS_COS: f64 = 0.1;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ‖v‖₂`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::ZeroVector { threshold: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if !(nu > EPS_NORM) || !(nv > EPS_NORM) {
        return Err(Error::ZeroVector { threshold: EPS_NORM });
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine that evaluates to 0 when either side is (numerically) zero.
fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    let nu = l2_norm(u);
    let nv = l2_norm(v);
    if nu > EPS_NORM && nv > EPS_NORM {
        (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}

/// An `N × d` matrix of class prototypes, one row per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    dim: usize,
    rows: Vec<f64>,
    class_ids: Vec<usize>,
}

impl PrototypeBank {
    /// Builds a bank from a row-major `N × dim` buffer with classes `0..N`.
    pub fn from_flat(dim: usize, rows: Vec<f64>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form rows of width {dim}",
                rows.len()
            )));
        }
        let n = rows.len() / dim;
        Self::with_ids(dim, rows, (0..n).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged prototype rows".into()));
        }
        Self::from_flat(dim, rows.concat())
    }

    pub fn with_ids(dim: usize, rows: Vec<f64>, class_ids: Vec<usize>) -> Result<Self> {
        if dim == 0 || rows.len() != dim * class_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} classes of width {dim}",
                rows.len(),
                class_ids.len()
            )));
        }
        if class_ids.len() < 2 {
            return Err(Error::InsufficientPrototypes {
                requested: 2,
                available: class_ids.len(),
            });
        }
        let bank = Self { dim, rows, class_ids };
        if (0..bank.len()).any(|i| !(l2_norm(bank.row(i)) > EPS_NORM)) {
            return Err(Error::ZeroVector { threshold: EPS_NORM });
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows_flat(&self) -> &[f64] {
        &self.rows
    }

    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Elementwise absolute value of every row.
    pub fn abs(&self) -> Self {
        Self {
            dim: self.dim,
            rows: self.rows.iter().map(|x| x.abs()).collect(),
            class_ids: self.class_ids.clone(),
        }
    }
}

/// Result of reconstructing a feature from its nearest prototype splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitReconstruction {
    /// Concatenation of the per-split means, `R(x, W)`.
    pub reconstructed: Vec<f64>,
    /// `splits × m` prototype row indices, best first.
    pub selected_indices: Vec<Vec<usize>>,
    /// Cosine similarities matching `selected_indices`.
    pub per_split_sims: Vec<Vec<f64>>,
}

/// Reconstructs `f` split by split from the `m` most cosine-similar
/// prototype splits, never using the row of class `exclude`.
///
/// Ties on similarity go to the lower prototype index. A split of `f` with
/// zero norm has similarity 0 to every prototype.
pub fn split_reconstruct(
    f: &[f64],
    bank: &PrototypeBank,
    exclude: Option<usize>,
    splits: usize,
    neighbors: usize,
) -> Result<SplitReconstruction> {
    let d = bank.dim();
    if f.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "feature of length {} against prototypes of width {d}",
            f.len()
        )));
    }
    if splits == 0 || !d.is_multiple_of(splits) {
        return Err(Error::IndivisibleSplit { dim: d, splits });
    }
    let excluded = match exclude {
        Some(c) => Some(bank.index_of(c).ok_or(Error::UnknownLabel(c))?),
        None => None,
    };
    let candidates: Vec<usize> = (0..bank.len()).filter(|&i| Some(i) != excluded).collect();
    if neighbors == 0 || neighbors > candidates.len() {
        return Err(Error::InsufficientPrototypes {
            requested: neighbors,
            available: candidates.len(),
        });
    }

    let width = d / splits;
    let mut reconstructed = vec![0.0; d];
    let mut selected_indices = Vec::with_capacity(splits);
    let mut per_split_sims = Vec::with_capacity(splits);
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(candidates.len());

    for k in 0..splits {
        let span = k * width..(k + 1) * width;
        let fk = &f[span.clone()];
        scored.clear();
        scored.extend(
            candidates
                .iter()
                .map(|&i| (cosine_or_zero(fk, &bank.row(i)[span.clone()]), i)),
        );
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &scored[..neighbors];
        let out = &mut reconstructed[span.clone()];
        for &(_, i) in top {
            for (o, p) in out.iter_mut().zip(&bank.row(i)[span.clone()]) {
                *o += p;
            }
        }
        let inv = 1.0 / neighbors as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        selected_indices.push(top.iter().map(|&(_, i)| i).collect());
        per_split_sims.push(top.iter().map(|&(s, _)| s).collect());
    }

    Ok(SplitReconstruction {
        reconstructed,
        selected_indices,
        per_split_sims,
    })
}

/// Scales the unit feature `f_c` by `1 / cos⟨f_c, r_c⟩` so that its
/// difference with `r_c` is orthogonal to `r_c`.
pub fn prolong(f_c: &[f64], r_c: &[f64]) -> Result<Vec<f64>> {
    let cosine = cosine_sim(f_c, r_c)?;
    if cosine < EPS_COS {
        return Err(Error::DegenerateAngle {
            cosine,
            floor: EPS_COS,
        });
    }
    Ok(f_c.iter().map(|x| x / cosine).collect())
}

/// Direction and length of the part of a feature its reconstruction misses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    /// Unit direction, or all zeros when `degenerate`.
    pub direction: Vec<f64>,
    pub length: f64,
    /// `cos⟨f_c, R_c⟩` (after clamping, for [`residual_clamped`]).
    pub cosine: f64,
    /// Set when the residual vanishes and has no direction.
    pub degenerate: bool,
}

fn residual_from(f_c: &[f64], r_c: &[f64], cosine: f64) -> Residual {
    let r: Vec<f64> = f_c.iter().zip(r_c).map(|(f, c)| f / cosine - c).collect();
    let length = l2_norm(&r);
    if length > EPS_NORM {
        Residual {
            direction: r.iter().map(|x| x / length).collect(),
            length,
            cosine,
            degenerate: false,
        }
    } else {
        Residual {
            direction: vec![0.0; r.len()],
            length: 0.0,
            cosine,
            degenerate: true,
        }
    }
}

/// `prolong(f_c, r_c) - r_c`, split into direction and length.
pub fn residual(f_c: &[f64], r_c: &[f64]) -> Result<Residual> {
    let cosine = cosine_sim(f_c, r_c)?;
    if cosine < EPS_COS {
        return Err(Error::DegenerateAngle {
            cosine,
            floor: EPS_COS,
        });
    }
    Ok(residual_from(f_c, r_c, cosine))
}

/// Training variant of [`residual`]: the cosine is clamped up to
/// [`EPS_COS`] instead of failing, so one pathological sample cannot abort
/// an epoch. Zero inputs still fail.
pub fn residual_clamped(f_c: &[f64], r_c: &[f64]) -> Result<Residual> {
    let cosine = cosine_sim(f_c, r_c)?.max(EPS_COS);
    Ok(residual_from(f_c, r_c, cosine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0, 1.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[1e-30, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(
            cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap(),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-6
        );
        assert!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn reconstruct_single_candidate() {
        let bank = PrototypeBank::from_rows(&[vec![1.0, 1.0, 1.0, 1.0], vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        let rec = split_reconstruct(&[1.0, 0.0, 0.0, 0.0], &bank, Some(0), 1, 1).unwrap();
        assert_eq!(rec.reconstructed, vec![2.0, 0.0, 0.0, 0.0]);
        assert_eq!(rec.selected_indices, vec![vec![1]]);
    }

    #[test]
    fn reconstruct_mean_of_two() {
        let bank = PrototypeBank::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let rec = split_reconstruct(&[1.0, 1.0, 0.0, 0.0], &bank, None, 1, 2).unwrap();
        assert_eq!(rec.reconstructed, vec![0.5, 0.5, 0.0, 0.0]);
        // equal similarity: lower index first
        assert_eq!(rec.selected_indices, vec![vec![0, 1]]);
    }

    #[test]
    fn reconstruct_errors() {
        let bank = PrototypeBank::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        assert!(matches!(
            split_reconstruct(&[1.0, 0.0, 0.0], &bank, None, 2, 1),
            Err(Error::IndivisibleSplit { dim: 3, splits: 2 })
        ));
        assert!(matches!(
            split_reconstruct(&[1.0, 0.0, 0.0], &bank, Some(0), 1, 2),
            Err(Error::InsufficientPrototypes {
                requested: 2,
                available: 1
            })
        ));
        assert!(matches!(
            split_reconstruct(&[1.0, 0.0, 0.0], &bank, Some(7), 1, 1),
            Err(Error::UnknownLabel(7))
        ));
    }

    #[test]
    fn zero_split_selects_by_index() {
        let bank = PrototypeBank::from_rows(&[
            vec![1.0, 0.0, 5.0, 0.0],
            vec![0.0, 1.0, 0.0, 5.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        let rec = split_reconstruct(&[0.0, 0.0, 0.0, 1.0], &bank, None, 2, 2).unwrap();
        assert_eq!(rec.selected_indices[0], vec![0, 1]);
        assert_eq!(rec.per_split_sims[0], vec![0.0, 0.0]);
        assert_eq!(rec.selected_indices[1], vec![1, 2]);
    }

    #[test]
    fn prolong_examples() {
        assert_eq!(prolong(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        let p = prolong(&[1.0, 0.0], &[0.6, 0.8]).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 / 0.6, epsilon = 1e-12);
        assert_eq!(p[1], 0.0);
        assert!(matches!(
            prolong(&[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::DegenerateAngle { .. })
        ));
    }

    #[test]
    fn residual_of_perfect_reconstruction_is_degenerate() {
        let r = residual(&[0.6, 0.8], &[0.6, 0.8]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.length, 0.0);
        assert_eq!(r.direction, vec![0.0, 0.0]);
    }

    #[test]
    fn residual_at_45_degrees() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let r = residual(&[1.0, 0.0], &[h, h]).unwrap();
        assert_abs_diff_eq!(r.length, 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(dot(&r.direction, &[h, h]), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn clamped_residual_does_not_fail() {
        let r = residual_clamped(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(r.cosine, EPS_COS);
        assert!(r.length.is_finite());
        assert!(residual(&[1.0, 0.0], &[-1.0, 0.0]).is_err());
    }

    #[test]
    fn abs_bank() {
        let bank = PrototypeBank::from_rows(&[vec![-1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let a = bank.abs();
        assert_eq!(a.row(0), &[1.0, 2.0]);
        assert_eq!(a.abs(), a);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn nonneg(d: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, d)
        }

        proptest! {
            #[test]
            fn residual_is_orthogonal_to_the_reconstruction(f in nonneg(12), r in nonneg(12)) {
                let f_c = l2_normalize(&f).unwrap();
                let r_c = l2_normalize(&r).unwrap();
                if let Ok(res) = residual(&f_c, &r_c) {
                    let along: f64 = res.direction.iter().zip(&r_c).map(|(a, b)| a * b).sum();
                    prop_assert!(res.degenerate || along.abs() < 1e-9);
                    let p = prolong(&f_c, &r_c).unwrap();
                    let rebuilt: Vec<f64> = r_c.iter().zip(&res.direction).map(|(c, d)| c + res.length * d).collect();
                    for (a, b) in p.iter().zip(&rebuilt) {
                        prop_assert!((a - b).abs() < 1e-9);
                    }
                }
            }

            #[test]
            fn reconstruction_never_selects_the_excluded_class(
                rows in prop::collection::vec(nonneg(8), 3..8),
                f in nonneg(8),
                pick in 0usize..8,
            ) {
                let bank = PrototypeBank::from_rows(&rows).unwrap();
                let exclude = pick % rows.len();
                let rec = split_reconstruct(&f, &bank, Some(exclude), 2, 2).unwrap();
                prop_assert_eq!(rec.reconstructed.len(), 8);
                for (idx, sims) in rec.selected_indices.iter().zip(&rec.per_split_sims) {
                    prop_assert!(!idx.contains(&exclude));
                    prop_assert!(sims[0] >= sims[1]);
                }
            }
        }
    }
}
