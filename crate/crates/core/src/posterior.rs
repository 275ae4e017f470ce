//! Approximate posteriors against the standard-normal prior `N(0, I_d)`.
//!
//! Two families are provided: the usual diagonal Gaussian `N(μ, diag(s))`
//! and the AR(1) Gaussian `N(μ, s·Toeplitz(1, ρ, …, ρ^{d−1}))`, which spends
//! two scalars on the covariance instead of `d`.
//!
//! Parameters are stored already squashed (`s > 0`, `|ρ| < 1`). Gradient
//! functions, however, return derivatives with respect to the raw network
//! outputs the optimizer actually updates: `log s` (or `log s_j`) and
//! `ρ_raw` with `ρ = tanh(ρ_raw)`.
//!
//! Noise is standard normal from `rand_distr::StandardNormal` (a ziggurat
//! sampler) driven by whatever seeded generator the caller passes; the
//! trainer uses `ChaCha8Rng`, whose output stream is stable across platforms.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ar1::{check_rho, check_scale, one_minus_rho_sq, Ar1Cov};
use crate::error::{Error, Result};

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Dimension {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Draws `d` independent standard-normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagPosterior {
    mu: Vec<f64>,
    var: Vec<f64>,
}

impl DiagPosterior {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim("diagonal variances", mu.len(), var.len())?;
        if mu.is_empty() {
            return Err(Error::Dimension {
                what: "posterior mean",
                expected: 1,
                actual: 0,
            });
        }
        for &v in &var {
            check_scale("variance", v)?;
        }
        Ok(Self { mu, var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Posterior {
    mu: Vec<f64>,
    rho: f64,
    s: f64,
}

impl Ar1Posterior {
    pub fn new(mu: Vec<f64>, rho: f64, s: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Dimension {
                what: "posterior mean",
                expected: 1,
                actual: 0,
            });
        }
        check_rho(rho)?;
        check_scale("s", s)?;
        Ok(Self { mu, rho, s })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn covariance(&self) -> Ar1Cov {
        Ar1Cov::new(self.mu.len(), self.rho, self.s).expect("posterior invariants imply a valid covariance")
    }
}

/// A reparametrized draw together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Gradient with respect to `(μ, log s_1..d)` of a diagonal posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGrad {
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

/// Gradient with respect to `(μ, log s, ρ_raw)` of an AR(1) posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Grad {
    pub d_mu: Vec<f64>,
    pub d_log_s: f64,
    pub d_rho_raw: f64,
}

/// `½[Σ s_j + ‖μ‖² − d − Σ log s_j]`
pub fn kl_diag(p: &DiagPosterior) -> f64 {
    let trace_minus_logdet: f64 = p.var.iter().map(|&s| s - 1.0 - s.ln()).sum();
    0.5 * (squared_norm(&p.mu) + trace_minus_logdet)
}

pub fn kl_diag_grad(p: &DiagPosterior) -> DiagGrad {
    DiagGrad {
        d_mu: p.mu.clone(),
        d_log_var: p.var.iter().map(|&s| 0.5 * (s - 1.0)).collect(),
    }
}

/// `½[‖μ‖² + d(s − 1 − log s) − (d − 1)·log(1 − ρ²)]`
pub fn kl_ar1(p: &Ar1Posterior) -> f64 {
    let d = p.dim() as f64;
    // summed rather than multiplied so ρ = 0 agrees bit-for-bit with kl_diag
    let per_dim = p.s - 1.0 - p.s.ln();
    let trace_minus_logdet: f64 = std::iter::repeat_n(per_dim, p.dim()).sum();
    0.5 * (squared_norm(&p.mu) + trace_minus_logdet - (d - 1.0) * one_minus_rho_sq(p.rho).ln())
}

/// The `1/(1 − ρ²)` from differentiating `log(1 − ρ²)` cancels against the
/// tanh Jacobian, leaving `(d − 1)·ρ` for the raw correlation.
pub fn kl_ar1_grad(p: &Ar1Posterior) -> Ar1Grad {
    let d = p.dim() as f64;
    Ar1Grad {
        d_mu: p.mu.clone(),
        d_log_s: 0.5 * d * (p.s - 1.0),
        d_rho_raw: (d - 1.0) * p.rho,
    }
}

pub fn reparam_diag(p: &DiagPosterior, eps: Vec<f64>) -> Result<LatentSample> {
    check_dim("noise vector", p.dim(), eps.len())?;
    let z = p
        .mu
        .iter()
        .zip(&p.var)
        .zip(&eps)
        .map(|((m, s), e)| m + s.sqrt() * e)
        .collect();
    Ok(LatentSample { z, eps })
}

pub fn sample_diag<R: Rng + ?Sized>(p: &DiagPosterior, rng: &mut R) -> LatentSample {
    let eps = standard_normal(rng, p.dim());
    reparam_diag(p, eps).expect("noise drawn at posterior dimension")
}

/// Pathwise gradient of `⟨upstream, z⟩` for `z = μ + exp(log s / 2) ⊙ ε`.
pub fn sample_diag_grad(p: &DiagPosterior, sample: &LatentSample, upstream: &[f64]) -> Result<DiagGrad> {
    check_dim("noise vector", p.dim(), sample.eps.len())?;
    check_dim("upstream gradient", p.dim(), upstream.len())?;
    let d_log_var = p
        .var
        .iter()
        .zip(&sample.eps)
        .zip(upstream)
        .map(|((s, e), u)| 0.5 * s.sqrt() * e * u)
        .collect();
    Ok(DiagGrad {
        d_mu: upstream.to_vec(),
        d_log_var,
    })
}

pub fn reparam_ar1(p: &Ar1Posterior, eps: Vec<f64>) -> Result<LatentSample> {
    let colored = p.covariance().color(&eps)?;
    let z = p.mu.iter().zip(colored).map(|(m, y)| m + y).collect();
    Ok(LatentSample { z, eps })
}

pub fn sample_ar1<R: Rng + ?Sized>(p: &Ar1Posterior, rng: &mut R) -> LatentSample {
    let eps = standard_normal(rng, p.dim());
    reparam_ar1(p, eps).expect("noise drawn at posterior dimension")
}

pub fn sample_ar1_grad(p: &Ar1Posterior, sample: &LatentSample, upstream: &[f64]) -> Result<Ar1Grad> {
    let (d_rho, d_log_s) = p.covariance().color_grad(&sample.eps, upstream)?;
    Ok(Ar1Grad {
        d_mu: upstream.to_vec(),
        d_log_s,
        d_rho_raw: d_rho * one_minus_rho_sq(p.rho),
    })
}

/// Either posterior family, as produced by an encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Posterior {
    Diag(DiagPosterior),
    Ar1(Ar1Posterior),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorGrad {
    Diag(DiagGrad),
    Ar1(Ar1Grad),
}

impl Posterior {
    pub fn dim(&self) -> usize {
        match self {
            Posterior::Diag(p) => p.dim(),
            Posterior::Ar1(p) => p.dim(),
        }
    }

    pub fn mu(&self) -> &[f64] {
        match self {
            Posterior::Diag(p) => p.mu(),
            Posterior::Ar1(p) => p.mu(),
        }
    }

    pub fn kl(&self) -> f64 {
        match self {
            Posterior::Diag(p) => kl_diag(p),
            Posterior::Ar1(p) => kl_ar1(p),
        }
    }

    pub fn reparam(&self, eps: Vec<f64>) -> Result<LatentSample> {
        match self {
            Posterior::Diag(p) => reparam_diag(p, eps),
            Posterior::Ar1(p) => reparam_ar1(p, eps),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentSample {
        match self {
            Posterior::Diag(p) => sample_diag(p, rng),
            Posterior::Ar1(p) => sample_ar1(p, rng),
        }
    }

    /// Gradient of `⟨upstream, z⟩ + kl_weight · KL` with respect to the raw
    /// head outputs.
    pub fn backward(&self, sample: &LatentSample, upstream: &[f64], kl_weight: f64) -> Result<PosteriorGrad> {
        match self {
            Posterior::Diag(p) => {
                let mut g = sample_diag_grad(p, sample, upstream)?;
                let k = kl_diag_grad(p);
                for (a, b) in g.d_mu.iter_mut().zip(&k.d_mu) {
                    *a += kl_weight * b;
                }
                for (a, b) in g.d_log_var.iter_mut().zip(&k.d_log_var) {
                    *a += kl_weight * b;
                }
                Ok(PosteriorGrad::Diag(g))
            }
            Posterior::Ar1(p) => {
                let mut g = sample_ar1_grad(p, sample, upstream)?;
                let k = kl_ar1_grad(p);
                for (a, b) in g.d_mu.iter_mut().zip(&k.d_mu) {
                    *a += kl_weight * b;
                }
                g.d_log_s += kl_weight * k.d_log_s;
                g.d_rho_raw += kl_weight * k.d_rho_raw;
                Ok(PosteriorGrad::Ar1(g))
            }
        }
    }
}
