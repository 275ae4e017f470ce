//! The first-order autoregressive (Kac–Murdock–Szegő) covariance family
//!
//! ```text
//! C(ρ, s)[i, j] = s · ρ^|i − j|,   s > 0, |ρ| < 1
//! ```
//!
//! Everything here has a closed form: the log-determinant is
//! `d·log s + (d − 1)·log(1 − ρ²)`, and the lower Cholesky factor has column 0
//! equal to `√s·[1, ρ, ρ², …]ᵀ` and every later column equal to
//! `√s·√(1 − ρ²)·[1, ρ, ρ², …]ᵀ` starting at the diagonal. Multiplying that
//! factor by a vector is the stationary AR(1) recursion, so the production
//! paths ([`Ar1Cov::color`], [`Ar1Cov::color_grad`]) are O(d) and never build
//! a matrix. [`Ar1Cov::materialize`] and [`Ar1Cov::cholesky_factor`] exist for
//! verification.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

/// `1 − ρ²`, evaluated as `(1 − ρ)(1 + ρ)` to keep precision near |ρ| = 1.
#[inline]
pub(crate) fn one_minus_rho_sq(rho: f64) -> f64 {
    (1.0 - rho) * (1.0 + rho)
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: rho,
            reason: "must lie strictly inside (-1, 1)",
        });
    }
    Ok(())
}

pub(crate) fn check_scale(name: &'static str, s: f64) -> Result<()> {
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::InvalidParameter {
            name,
            value: s,
            reason: "must be finite and strictly positive",
        });
    }
    Ok(())
}

/// `s · Toeplitz([1, ρ, …, ρ^{d−1}])`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Cov {
    d: usize,
    rho: f64,
    s: f64,
}

impl Ar1Cov {
    /// Rejects `d = 0`, `|ρ| ≥ 1` and `s ≤ 0`. Values are never clamped.
    pub fn new(d: usize, rho: f64, s: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter {
                name: "d",
                value: 0.0,
                reason: "latent dimension must be at least 1",
            });
        }
        check_rho(rho)?;
        check_scale("s", s)?;
        Ok(Self { d, rho, s })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn scale(&self) -> f64 {
        self.s
    }

    pub fn materialize(&self) -> DenseMatrix {
        let d = self.d;
        let mut m = DenseMatrix::zeros(d, d);
        let mut power = 1.0;
        for lag in 0..d {
            let v = self.s * power;
            for i in lag..d {
                m[(i, i - lag)] = v;
                m[(i - lag, i)] = v;
            }
            power *= self.rho;
        }
        m
    }

    pub fn log_det(&self) -> f64 {
        let d = self.d as f64;
        d * self.s.ln() + (d - 1.0) * one_minus_rho_sq(self.rho).ln()
    }

    /// Lower-triangular `L` with `L·Lᵀ = C`.
    pub fn cholesky_factor(&self) -> DenseMatrix {
        let d = self.d;
        let root_s = self.s.sqrt();
        let innovation = root_s * one_minus_rho_sq(self.rho).sqrt();
        let mut l = DenseMatrix::zeros(d, d);
        for j in 0..d {
            let head = if j == 0 { root_s } else { innovation };
            let mut v = head;
            for i in j..d {
                l[(i, j)] = v;
                v *= self.rho;
            }
        }
        l
    }

    /// `L·eps` through the recursion `y₀ = √s·ε₀`,
    /// `y_j = ρ·y_{j−1} + √(s(1 − ρ²))·ε_j`.
    pub fn color(&self, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_len("noise vector", eps.len())?;
        let root_s = self.s.sqrt();
        let innovation = root_s * one_minus_rho_sq(self.rho).sqrt();
        let mut y = Vec::with_capacity(self.d);
        let mut prev = root_s * eps[0];
        y.push(prev);
        for &e in &eps[1..] {
            prev = self.rho * prev + innovation * e;
            y.push(prev);
        }
        Ok(y)
    }

    /// Derivatives of `⟨upstream, color(eps)⟩` with respect to `ρ` and `log s`.
    ///
    /// `color` is linear in `√s`, so the `log s` derivative is half the inner
    /// product itself. The `ρ` derivative propagates the tangent
    /// `t_j = y_{j−1} + ρ·t_{j−1} − √s·ρ/√(1 − ρ²)·ε_j` alongside the recursion.
    pub fn color_grad(&self, eps: &[f64], upstream: &[f64]) -> Result<(f64, f64)> {
        self.check_len("noise vector", eps.len())?;
        self.check_len("upstream gradient", upstream.len())?;
        let root_s = self.s.sqrt();
        let c = one_minus_rho_sq(self.rho).sqrt();
        let innovation = root_s * c;
        let d_innovation = -root_s * self.rho / c;

        let mut y = root_s * eps[0];
        let mut t = 0.0;
        let mut inner = upstream[0] * y;
        let mut d_rho = 0.0;
        for j in 1..self.d {
            t = y + self.rho * t + d_innovation * eps[j];
            y = self.rho * y + innovation * eps[j];
            inner += upstream[j] * y;
            d_rho += upstream[j] * t;
        }
        Ok((d_rho, 0.5 * inner))
    }

    fn check_len(&self, what: &'static str, len: usize) -> Result<()> {
        if len != self.d {
            return Err(Error::Dimension {
                what,
                expected: self.d,
                actual: len,
            });
        }
        Ok(())
    }
}
