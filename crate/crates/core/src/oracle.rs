//! Independent reference computations for the test suite and `check` command.
//!
//! Nothing in this module calls into [`crate::ar1`] or [`crate::posterior`]:
//! covariances are rebuilt from their entrywise definition, factored with a
//! textbook Cholesky, and gradients are estimated by central differences.
//! Callers hand production outputs in and compare.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `s · ρ^|i−j|`, filled entry by entry.
pub fn kms_matrix(d: usize, rho: f64, s: f64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let lag = i.abs_diff(j) as i32;
            m[(i, j)] = s * rho.powi(lag);
        }
    }
    m
}

/// Cholesky–Banachiewicz factorization. Fails on the first non-positive pivot.
pub fn dense_cholesky(m: &DenseMatrix) -> Result<DenseMatrix> {
    if !m.is_square() {
        return Err(Error::Dimension {
            what: "cholesky input columns",
            expected: m.rows(),
            actual: m.cols(),
        });
    }
    let n = m.rows();
    let mut l = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: sum });
                }
                l[(i, i)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// `2 Σ log L_ii` for a lower Cholesky factor `L`.
pub fn log_det_from_cholesky(l: &DenseMatrix) -> f64 {
    2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `KL[N(μ, C) ‖ N(0, I)] = ½(tr C + μᵀμ − d − log det C)` on a dense `C`.
pub fn gaussian_kl_dense(mu: &[f64], cov: &DenseMatrix) -> Result<f64> {
    if mu.len() != cov.rows() {
        return Err(Error::Dimension {
            what: "mean vs covariance",
            expected: cov.rows(),
            actual: mu.len(),
        });
    }
    let l = dense_cholesky(cov)?;
    let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
    Ok(0.5 * (cov.trace() + mu_sq - mu.len() as f64 - log_det_from_cholesky(&l)))
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn forward_substitute(l: &DenseMatrix, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l[(i, k)] * x[k];
        }
        x[i] = acc / l[(i, i)];
    }
    x
}

/// Log density of `N(mean, L·Lᵀ)` at `z`.
pub fn gaussian_log_density(z: &[f64], mean: &[f64], chol: &DenseMatrix) -> f64 {
    let centered: Vec<f64> = z.iter().zip(mean).map(|(a, b)| a - b).collect();
    let w = forward_substitute(chol, &centered);
    let mahalanobis: f64 = w.iter().map(|v| v * v).sum();
    -0.5 * (mahalanobis + log_det_from_cholesky(chol) + z.len() as f64 * LN_2PI)
}

pub fn standard_normal_log_density(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|v| v * v).sum();
    -0.5 * (sq + z.len() as f64 * LN_2PI)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

impl McEstimate {
    /// `|estimate − value|` in units of standard error.
    pub fn z_score(&self, value: f64) -> f64 {
        (self.estimate - value).abs() / self.std_error
    }
}

/// Monte-Carlo estimate of `E_q[log q(z) − log p(z)]` over `n_draws` draws of
/// `sampler`, which is fed a `ChaCha8Rng` seeded from `seed`.
pub fn mc_kl<S, Q, P>(mut sampler: S, log_q: Q, log_p: P, n_draws: usize, seed: u64) -> McEstimate
where
    S: FnMut(&mut ChaCha8Rng) -> Vec<f64>,
    Q: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> f64,
{
    assert!(n_draws >= 2, "need at least two draws for a standard error");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_draws {
        let z = sampler(&mut rng);
        let v = log_q(&z) - log_p(&z);
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = m2 / (n_draws - 1) as f64;
    McEstimate {
        estimate: mean,
        std_error: (var / n_draws as f64).sqrt(),
    }
}

/// Streaming mean and (unbiased) covariance.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    count: usize,
    mean: Vec<f64>,
    comoment: DenseMatrix,
}

impl CovarianceAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; d],
            comoment: DenseMatrix::zeros(d, d),
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        assert_eq!(x.len(), d);
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after_i = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[(i, j)] += delta[j] * after_i;
            }
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> DenseMatrix {
        let d = self.mean.len();
        let denom = self.count.saturating_sub(1).max(1) as f64;
        let mut c = DenseMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                c[(i, j)] = self.comoment[(i, j)] / denom;
            }
        }
        c
    }
}

/// Pearson lag-1 autocorrelation pooled over several series.
pub fn lag_one_autocorrelation<'a, I>(series: I) -> f64
where
    I: IntoIterator<Item = &'a [f64]> + Clone,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for s in series.clone() {
        sum += s.iter().sum::<f64>();
        n += s.len();
    }
    let mean = sum / n as f64;
    let (mut num, mut den, mut pairs) = (0.0, 0.0, 0usize);
    for s in series {
        for w in s.windows(2) {
            num += (w[0] - mean) * (w[1] - mean);
            pairs += 1;
        }
        den += s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    (num / pairs as f64) / (den / n as f64)
}

/// Outcome of comparing analytic gradients against central differences.
///
/// The error for each coordinate is `|a − n| / max(|a|, |n|, floor / tol)`,
/// which is below `tol` exactly when the relative error is below `tol` or the
/// absolute difference is below `floor`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupError> {
        self.groups.iter().filter(move |g| !(g.max_rel_error < self.tolerance))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
        }
    }
}

/// Central-difference check of `analytic` against `loss` at `params`.
/// `groups` names contiguous spans of the parameter vector; pass an empty
/// slice to treat everything as one group.
pub fn finite_diff<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    groups: &[(String, Range<usize>)],
    cfg: GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let whole = [("all".to_string(), 0..params.len())];
    let groups = if groups.is_empty() { &whole[..] } else { groups };
    let denom_floor = cfg.abs_floor / cfg.tolerance;

    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(groups.len());
    for (name, range) in groups {
        let mut worst = GroupError {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: range.start,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in range.clone() {
            let orig = x[i];
            x[i] = orig + cfg.step;
            let up = loss(&x);
            x[i] = orig - cfg.step;
            let down = loss(&x);
            x[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(denom_floor);
            if !(err <= worst.max_rel_error) {
                worst = GroupError {
                    name: name.clone(),
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        out.push(worst);
    }
    let passed = out.iter().all(|g| g.max_rel_error < cfg.tolerance);
    GradCheckReport {
        groups: out,
        step: cfg.step,
        tolerance: cfg.tolerance,
        abs_floor: cfg.abs_floor,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn cholesky_of_identity() {
        assert_eq!(dense_cholesky(&DenseMatrix::identity(4)).unwrap(), DenseMatrix::identity(4));
    }

    #[test]
    fn cholesky_hand_example() {
        let m = DenseMatrix::from_nested(&[&[4.0, 2.0], &[2.0, 2.0]]);
        let l = dense_cholesky(&m).unwrap();
        assert_eq!(l, DenseMatrix::from_nested(&[&[2.0, 0.0], &[1.0, 1.0]]));
        assert_eq!(l.matmul(&l.transpose()).unwrap(), m);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DenseMatrix::from_nested(&[&[1.0, 2.0], &[2.0, 1.0]]);
        assert!(matches!(dense_cholesky(&m), Err(Error::NotPositiveDefinite { row: 1, .. })));
    }

    #[test]
    fn kms_matrix_by_definition() {
        let m = kms_matrix(3, -0.5, 2.0);
        assert_eq!(m.row(0), &[2.0, -1.0, 0.5]);
        assert_eq!(m.row(2), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn generic_kl_examples() {
        let kl = gaussian_kl_dense(&[1.0, 0.0], &DenseMatrix::identity(2)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        let kl = gaussian_kl_dense(&[0.0, 0.0], &kms_matrix(2, 0.6, 1.0)).unwrap();
        assert!((kl + 0.5 * 0.64f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn mc_kl_of_identical_distributions_is_zero() {
        let est = mc_kl(
            |rng| (0..3).map(|_| StandardNormal.sample(rng)).collect(),
            standard_normal_log_density,
            standard_normal_log_density,
            1000,
            1,
        );
        assert_eq!(est.estimate, 0.0);
    }

    #[test]
    fn mc_kl_of_shifted_gaussian() {
        // KL[N(1, 1) || N(0, 1)] = 0.5
        let est = mc_kl(
            |rng| vec![1.0 + Distribution::<f64>::sample(&StandardNormal, rng)],
            |z| standard_normal_log_density(&[z[0] - 1.0]),
            standard_normal_log_density,
            100_000,
            3,
        );
        assert!(est.z_score(0.5) < 4.0, "{est:?}");
    }

    #[test]
    fn finite_diff_on_quadratic() {
        // f(x) = Σ k·x_k², ∇f = 2k·x_k
        let x = [0.5, -1.5, 2.0, 1e-3];
        let grad: Vec<f64> = x.iter().enumerate().map(|(k, v)| 2.0 * k as f64 * v).collect();
        let f = |p: &[f64]| p.iter().enumerate().map(|(k, v)| k as f64 * v * v).sum::<f64>();
        let r = finite_diff(f, &x, &grad, &[], GradCheckConfig::default());
        assert!(r.passed);
        assert!(r.max_rel_error() < 1e-8, "{r:?}");

        let mut wrong = grad.clone();
        wrong[2] *= 1.01;
        let groups = vec![("a".to_string(), 0..2), ("b".to_string(), 2..4)];
        let r = finite_diff(f, &x, &wrong, &groups, GradCheckConfig::default());
        assert!(!r.passed);
        let failed: Vec<_> = r.failures().map(|g| g.name.as_str()).collect();
        assert_eq!(failed, vec!["b"]);
        assert_eq!(r.groups[1].worst_index, 2);
    }

    #[test]
    fn covariance_accumulator() {
        let mut acc = CovarianceAccumulator::new(2);
        for x in [[1.0, 2.0], [3.0, 6.0], [5.0, 10.0]] {
            acc.push(&x);
        }
        assert_eq!(acc.mean(), &[3.0, 6.0]);
        let c = acc.covariance();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((c[(0, 1)] - 8.0).abs() < 1e-12);
        assert!((c[(1, 1)] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn autocorrelation_of_alternating_series() {
        let s = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let r = lag_one_autocorrelation([&s[..]]);
        assert!((r + 1.0).abs() < 1e-12, "{r}");
    }
}
