//! Likelihood-ratio attack with per-sample Gaussian score models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{check_victim, AttackScoreRecord};
use crate::domain::{MembershipMatrix, ScoreTensor};
use crate::error::{Error, Result};

/// Relative variance floor: stds never drop below this fraction of the pooled std.
pub const STD_FLOOR_FRACTION: f64 = 0.05;
/// Absolute std floor.
pub const STD_FLOOR_ABS: f64 = 1e-8;
/// Off-diagonal covariance shrinkage towards the diagonal.
pub const SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPair {
    pub mu_in: f64,
    pub sigma_in: f64,
    pub mu_out: f64,
    pub sigma_out: f64,
}

impl GaussianPair {
    pub fn new(mu_in: f64, sigma_in: f64, mu_out: f64, sigma_out: f64) -> Result<Self> {
        let ok = |s: f64| s > 0.0 && s.is_finite();
        if !ok(sigma_in) || !ok(sigma_out) || !mu_in.is_finite() || !mu_out.is_finite() {
            return Err(Error::InvalidInput(
                "gaussian pair needs finite means and positive stds".into(),
            ));
        }
        Ok(Self {
            mu_in,
            sigma_in,
            mu_out,
            sigma_out,
        })
    }

    /// Same pair with the member and non-member sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            mu_in: self.mu_out,
            sigma_in: self.sigma_out,
            mu_out: self.mu_in,
            sigma_out: self.sigma_in,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LiraMode {
    /// Uses only the first (unaugmented) query variant.
    Single,
    /// Joint Gaussian over every query variant.
    Multivariate,
}

impl LiraMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LiraMode::Single => "single",
            LiraMode::Multivariate => "multi",
        }
    }
}

/// Mean taken relative to the first element, so constant inputs are exact.
fn mean(v: &[f64]) -> f64 {
    let x0 = v[0];
    x0 + v.iter().map(|x| x - x0).sum::<f64>() / v.len() as f64
}

fn unbiased_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn check_sides(n_in: usize, n_out: usize) -> Result<()> {
    if n_in < 2 {
        return Err(Error::InsufficientScores {
            side: "in",
            count: n_in,
        });
    }
    if n_out < 2 {
        return Err(Error::InsufficientScores {
            side: "out",
            count: n_out,
        });
    }
    Ok(())
}

fn std_floor(in_scores: &[f64], out_scores: &[f64]) -> f64 {
    let pooled: Vec<f64> = in_scores.iter().chain(out_scores).copied().collect();
    STD_FLOOR_ABS.max(STD_FLOOR_FRACTION * unbiased_std(&pooled))
}

/// Per-side unbiased mean/std; each std is floored at
/// `max(1e-8, 0.05 * std of the pooled scores)`.
pub fn fit_gaussian_pair(in_scores: &[f64], out_scores: &[f64]) -> Result<GaussianPair> {
    check_sides(in_scores.len(), out_scores.len())?;
    if in_scores.iter().chain(out_scores).any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite shadow score".into()));
    }
    let floor = std_floor(in_scores, out_scores);
    GaussianPair::new(
        mean(in_scores),
        unbiased_std(in_scores).max(floor),
        mean(out_scores),
        unbiased_std(out_scores).max(floor),
    )
}

/// `ln N(s; mu_in, sigma_in^2) - ln N(s; mu_out, sigma_out^2)`.
pub fn lira_score(s: f64, pair: &GaussianPair) -> f64 {
    let zi = (s - pair.mu_in) / pair.sigma_in;
    let zo = (s - pair.mu_out) / pair.sigma_out;
    (pair.sigma_out / pair.sigma_in).ln() + 0.5 * (zo * zo - zi * zi)
}

/// Multivariate normal kept as mean plus lower Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct MvGaussian {
    pub mean: DVector<f64>,
    pub chol_lower: DMatrix<f64>,
    /// Whether the shrunk covariance was not positive definite and only its
    /// diagonal was kept.
    pub diagonal_fallback: bool,
}

impl MvGaussian {
    fn fit(rows: &[&[f64]], floors: &[f64]) -> Self {
        let a = floors.len();
        let n = rows.len() as f64;
        let mean = DVector::from_fn(a, |d, _| {
            let x0 = rows[0][d];
            x0 + rows.iter().map(|r| r[d] - x0).sum::<f64>() / n
        });
        let mut cov = DMatrix::zeros(a, a);
        for r in rows {
            let c = DVector::from_fn(a, |d, _| r[d] - mean[d]);
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        for i in 0..a {
            for j in 0..a {
                if i != j {
                    cov[(i, j)] *= 1.0 - SHRINKAGE;
                }
            }
            cov[(i, i)] = cov[(i, i)].max(floors[i] * floors[i]);
        }
        match cov.clone().cholesky() {
            Some(ch) => Self {
                mean,
                chol_lower: ch.l(),
                diagonal_fallback: false,
            },
            None => {
                let l = DMatrix::from_diagonal(&cov.diagonal().map(f64::sqrt));
                Self {
                    mean,
                    chol_lower: l,
                    diagonal_fallback: true,
                }
            }
        }
    }

    /// Log-density without the `-(A/2) ln 2 pi` constant.
    fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let y = self
            .chol_lower
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        let log_det: f64 = self
            .chol_lower
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * (y.norm_squared() + log_det)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultivariatePair {
    pub inside: MvGaussian,
    pub outside: MvGaussian,
}

/// Joint Gaussian fit over all query variants, with off-diagonal shrinkage
/// and the same per-coordinate std floor as the univariate fit.
pub fn fit_multivariate_pair(in_rows: &[&[f64]], out_rows: &[&[f64]]) -> Result<MultivariatePair> {
    check_sides(in_rows.len(), out_rows.len())?;
    let a = in_rows[0].len();
    if a == 0 || in_rows.iter().chain(out_rows).any(|r| r.len() != a) {
        return Err(Error::InvalidInput(
            "shadow score rows must share a non-zero length".into(),
        ));
    }
    let floors: Vec<f64> = (0..a)
        .map(|d| {
            let i: Vec<f64> = in_rows.iter().map(|r| r[d]).collect();
            let o: Vec<f64> = out_rows.iter().map(|r| r[d]).collect();
            std_floor(&i, &o)
        })
        .collect();
    Ok(MultivariatePair {
        inside: MvGaussian::fit(in_rows, &floors),
        outside: MvGaussian::fit(out_rows, &floors),
    })
}

pub fn lira_score_multivariate(s: &[f64], pair: &MultivariatePair) -> f64 {
    pair.inside.log_density(s) - pair.outside.log_density(s)
}

/// Scores every audit sample of `victim_index` against Gaussians fitted on
/// all other models. Samples with fewer than two in or out shadow models are
/// skipped with a warning.
///
/// Shadow scores are sorted before fitting so the result does not depend on
/// model order.
pub fn lira_attack(
    scores: &ScoreTensor,
    membership: &MembershipMatrix,
    victim_index: usize,
    mode: LiraMode,
) -> Result<Vec<AttackScoreRecord>> {
    check_victim(scores, membership, victim_index)?;
    let mut out = Vec::with_capacity(scores.num_audit());
    for j in 0..scores.num_audit() {
        let shadows = (0..scores.num_models()).filter(|&m| m != victim_index);
        let attack_score = match mode {
            LiraMode::Single => {
                let (mut ins, mut outs) = (Vec::new(), Vec::new());
                for m in shadows {
                    let s = scores.get(m, j, 0);
                    if membership.get(m, j) {
                        ins.push(s)
                    } else {
                        outs.push(s)
                    }
                }
                ins.sort_by(f64::total_cmp);
                outs.sort_by(f64::total_cmp);
                match fit_gaussian_pair(&ins, &outs) {
                    Ok(pair) => lira_score(scores.get(victim_index, j, 0), &pair),
                    Err(e) => {
                        log::warn!("skipping audit sample {j} for victim {victim_index}: {e}");
                        continue;
                    }
                }
            }
            LiraMode::Multivariate => {
                let (mut ins, mut outs): (Vec<&[f64]>, Vec<&[f64]>) = (Vec::new(), Vec::new());
                for m in shadows {
                    let row = scores.cell(m, j);
                    if membership.get(m, j) {
                        ins.push(row)
                    } else {
                        outs.push(row)
                    }
                }
                let lex = |a: &&[f64], b: &&[f64]| {
                    a.iter()
                        .zip(b.iter())
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                };
                ins.sort_by(lex);
                outs.sort_by(lex);
                match fit_multivariate_pair(&ins, &outs) {
                    Ok(pair) => lira_score_multivariate(scores.cell(victim_index, j), &pair),
                    Err(e) => {
                        log::warn!("skipping audit sample {j} for victim {victim_index}: {e}");
                        continue;
                    }
                }
            }
        };
        out.push(AttackScoreRecord {
            victim_index,
            audit_index: j,
            attack_score,
            is_member: membership.get(victim_index, j),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unbiased_fit_by_hand() {
        let p = fit_gaussian_pair(&[0.0, 2.0], &[5.0, 7.0]).unwrap();
        assert_eq!(p.mu_in, 1.0);
        assert!((p.sigma_in - 2f64.sqrt()).abs() < 1e-12);
        let flat = fit_gaussian_pair(&[1.0, 1.0, 1.0], &[0.0, 3.0]).unwrap();
        assert!(flat.sigma_in > 0.0);
        assert!(matches!(
            fit_gaussian_pair(&[1.0, 2.0], &[]),
            Err(Error::InsufficientScores { side: "out", .. })
        ));
    }

    #[test]
    fn closed_form_scores() {
        let same = GaussianPair::new(0.3, 1.2, 0.3, 1.2).unwrap();
        for s in [-3.0, 0.0, 2.5] {
            assert_eq!(lira_score(s, &same), 0.0);
        }
        let p = GaussianPair::new(1.0, 1.0, 0.0, 1.0).unwrap();
        assert!((lira_score(1.0, &p) - 0.5).abs() < 1e-12);
        assert!((lira_score(0.0, &p) + 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn swapping_sides_negates(s in -10.0..10.0f64, mi in -3.0..3.0f64, mo in -3.0..3.0f64,
                                  si in 0.1..4.0f64, so in 0.1..4.0f64) {
            let p = GaussianPair::new(mi, si, mo, so).unwrap();
            prop_assert!((lira_score(s, &p) + lira_score(s, &p.swapped())).abs() < 1e-9);
        }

        #[test]
        fn increasing_when_member_mean_is_higher(a in -10.0..10.0f64, b in -10.0..10.0f64,
                                                 gap in 0.01..3.0f64, sigma in 0.1..4.0f64) {
            prop_assume!(a != b);
            let p = GaussianPair::new(gap, sigma, 0.0, sigma).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lira_score(lo, &p) < lira_score(hi, &p));
        }
    }

    #[test]
    fn multivariate_matches_univariate_in_one_dimension() {
        let ins = [[0.0], [2.0], [1.5]];
        let outs = [[-1.0], [0.5], [-0.2], [0.1]];
        let ir: Vec<&[f64]> = ins.iter().map(|r| r.as_slice()).collect();
        let or: Vec<&[f64]> = outs.iter().map(|r| r.as_slice()).collect();
        let mv = fit_multivariate_pair(&ir, &or).unwrap();
        let uv = fit_gaussian_pair(&[0.0, 2.0, 1.5], &[-1.0, 0.5, -0.2, 0.1]).unwrap();
        for s in [-1.0, 0.3, 2.0] {
            assert!((lira_score_multivariate(&[s], &mv) - lira_score(s, &uv)).abs() < 1e-10);
        }
    }

    #[test]
    fn multivariate_handles_more_dims_than_points() {
        let ins: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..18).map(|d| ((i * 7 + d) % 5) as f64).collect())
            .collect();
        let outs: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..18).map(|d| ((i * 3 + d) % 4) as f64 - 1.0).collect())
            .collect();
        let ir: Vec<&[f64]> = ins.iter().map(Vec::as_slice).collect();
        let or: Vec<&[f64]> = outs.iter().map(Vec::as_slice).collect();
        let mv = fit_multivariate_pair(&ir, &or).unwrap();
        assert!(lira_score_multivariate(&ins[0], &mv).is_finite());
    }

    fn toy(s: usize, c: usize) -> (ScoreTensor, MembershipMatrix) {
        let m = crate::assign_memberships(s, c, 4).unwrap();
        let vals: Vec<f64> = (0..s * c * 3)
            .map(|i| {
                let cell = i / 3;
                let bump = if m.get(cell / c, cell % c) { 1.0 } else { 0.0 };
                ((i * 7919) % 101) as f64 / 50.0 + bump
            })
            .collect();
        (
            ScoreTensor::new(vals, s, c, vec!["a".into(), "b".into(), "c".into()]).unwrap(),
            m,
        )
    }

    #[test]
    fn record_is_composition_of_fit_and_score() {
        // With S = 4 the victim leaves 2 + 1 shadows, so every sample is skipped.
        let m = MembershipMatrix::from_bits(vec![true, true, false, false], 4, 1).unwrap();
        let scores = ScoreTensor::new(vec![1.0, 1.0, 0.0, 0.0], 4, 1, vec!["id".into()]).unwrap();
        let recs = lira_attack(&scores, &m, 0, LiraMode::Single).unwrap();
        assert!(recs.is_empty());
        let m =
            MembershipMatrix::from_bits(vec![true, true, true, false, false, false], 6, 1).unwrap();
        let scores =
            ScoreTensor::new(vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 6, 1, vec!["id".into()]).unwrap();
        let recs = lira_attack(&scores, &m, 0, LiraMode::Single).unwrap();
        let pair = fit_gaussian_pair(&[1.0, 1.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(recs[0].attack_score, lira_score(1.0, &pair));
        assert!(recs[0].is_member);
    }

    #[test]
    fn identical_shadow_scores_give_zero() {
        let m = crate::assign_memberships(8, 5, 1).unwrap();
        let scores = ScoreTensor::new(vec![0.7; 8 * 5], 8, 5, vec!["id".into()]).unwrap();
        for mode in [LiraMode::Single, LiraMode::Multivariate] {
            for r in lira_attack(&scores, &m, 3, mode).unwrap() {
                assert_eq!(r.attack_score, 0.0);
            }
        }
    }

    #[test]
    fn shadow_order_does_not_matter() {
        let (scores, m) = toy(10, 6);
        let order = [3, 9, 0, 7, 1, 8, 2, 6, 4, 5];
        let (ps, pm) = (scores.permute_models(&order), m.permute_models(&order));
        for mode in [LiraMode::Single, LiraMode::Multivariate] {
            for (new_victim, &old_victim) in order.iter().enumerate() {
                let a = lira_attack(&scores, &m, old_victim, mode).unwrap();
                let b = lira_attack(&ps, &pm, new_victim, mode).unwrap();
                let sa: Vec<_> = a
                    .iter()
                    .map(|r| (r.audit_index, r.attack_score, r.is_member))
                    .collect();
                let sb: Vec<_> = b
                    .iter()
                    .map(|r| (r.audit_index, r.attack_score, r.is_member))
                    .collect();
                assert_eq!(sa, sb);
            }
        }
    }

    #[test]
    fn victim_out_of_range() {
        let (scores, m) = toy(4, 2);
        assert!(matches!(
            lira_attack(&scores, &m, 4, LiraMode::Single),
            Err(Error::IndexOutOfRange { .. })
        ));
    }
}
