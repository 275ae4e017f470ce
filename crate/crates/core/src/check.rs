//! Self-test suite: structured AR(1) math against dense oracles, closed-form
//! KL against generic formulas, and every analytic gradient against central
//! differences. All randomness is seeded, so reports are reproducible.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ar1::Ar1Cov;
use crate::nets::{PosteriorKind, Trainable, Vae, VaeSpec};
use crate::oracle::{self, finite_diff, GradCheckConfig, GradCheckReport};
use crate::posterior::{self, standard_normal, Ar1Posterior, DiagPosterior};
use crate::trainer::{batch_loss_and_grad, ReconLoss};

pub const GRID_DIMS: [usize; 6] = [1, 2, 3, 8, 32, 64];
pub const GRID_RHOS: [f64; 5] = [-0.99, -0.5, 0.0, 0.5, 0.99];
pub const GRID_SCALES: [f64; 3] = [0.01, 1.0, 100.0];

/// Every `(d, ρ, s)` on the verification grid.
pub fn grid() -> impl Iterator<Item = Ar1Cov> {
    GRID_DIMS.into_iter().flat_map(|d| {
        GRID_RHOS
            .into_iter()
            .flat_map(move |rho| GRID_SCALES.into_iter().map(move |s| Ar1Cov::new(d, rho, s).expect("grid values are valid")))
    })
}

/// `|actual − expected| / |expected|`, zero when both are equal.
pub fn rel_err(actual: f64, expected: f64) -> f64 {
    if actual == expected {
        0.0
    } else {
        (actual - expected).abs() / expected.abs()
    }
}

/// Functions under test. Swapping one out lets the suite demonstrate that it
/// notices a broken implementation.
#[derive(Clone, Copy)]
pub struct CheckSubjects {
    pub kl_ar1: fn(&Ar1Posterior) -> f64,
    pub log_det: fn(&Ar1Cov) -> f64,
}

impl Default for CheckSubjects {
    fn default() -> Self {
        Self {
            kl_ar1: posterior::kl_ar1,
            log_det: Ar1Cov::log_det,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckRow> {
        self.rows.iter().filter(|r| !r.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<28} {:>14} {:>10}  status", "check", "max error", "tolerance");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<28} {:>14.3e} {:>10.0e}  {}",
                r.name,
                r.max_error,
                r.tolerance,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

fn row(name: &'static str, max_error: f64, tolerance: f64) -> CheckRow {
    CheckRow {
        name,
        max_error,
        tolerance,
        passed: max_error <= tolerance,
    }
}

fn grad_row(name: &'static str, reports: &[GradCheckReport]) -> CheckRow {
    let tol = reports.first().map_or(0.0, |r| r.tolerance);
    CheckRow {
        name,
        max_error: reports.iter().map(GradCheckReport::max_rel_error).fold(0.0, f64::max),
        tolerance: tol,
        passed: reports.iter().all(|r| r.passed),
    }
}

fn max_matrix_rel_err(actual: &crate::dense::DenseMatrix, expected: &crate::dense::DenseMatrix) -> f64 {
    actual
        .entries()
        .iter()
        .zip(expected.entries())
        .map(|(a, e)| rel_err(*a, *e))
        .fold(0.0, f64::max)
}

/// `max |L·Lᵀ − C| / |C|` over the grid.
pub fn cholesky_reconstruction_error() -> f64 {
    grid()
        .map(|c| {
            let l = c.cholesky_factor();
            let llt = l.matmul(&l.transpose()).expect("square");
            max_matrix_rel_err(&llt, &oracle::kms_matrix(c.dim(), c.rho(), c.scale()))
        })
        .fold(0.0, f64::max)
}

/// Closed-form factor vs textbook Cholesky of the dense matrix.
pub fn cholesky_vs_dense_error() -> f64 {
    grid()
        .map(|c| {
            let dense = oracle::dense_cholesky(&oracle::kms_matrix(c.dim(), c.rho(), c.scale())).expect("grid is positive definite");
            max_matrix_rel_err(&c.cholesky_factor(), &dense)
        })
        .fold(0.0, f64::max)
}

pub fn log_det_error(log_det: fn(&Ar1Cov) -> f64) -> f64 {
    grid()
        .map(|c| {
            let dense = oracle::dense_cholesky(&oracle::kms_matrix(c.dim(), c.rho(), c.scale())).expect("grid is positive definite");
            rel_err(log_det(&c), oracle::log_det_from_cholesky(&dense))
        })
        .fold(0.0, f64::max)
}

/// Closed-form KL vs `½(tr C + μᵀμ − d − log det C)` with random means.
pub fn kl_oracle_error(kl_ar1: fn(&Ar1Posterior) -> f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid()
        .map(|c| {
            let mu: Vec<f64> = (0..c.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = Ar1Posterior::new(mu.clone(), c.rho(), c.scale()).expect("valid");
            let want = oracle::gaussian_kl_dense(&mu, &oracle::kms_matrix(c.dim(), c.rho(), c.scale())).expect("positive definite");
            rel_err(kl_ar1(&p), want)
        })
        .fold(0.0, f64::max)
}

/// `|kl_ar1(μ, s, ρ=0) − kl_diag(μ, s·1)|` over random cases.
pub fn kl_reduction_error(kl_ar1: fn(&Ar1Posterior) -> f64, cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .map(|_| {
            let d = rng.random_range(1..=64);
            let s = rng.random_range(-3.0f64..3.0).exp();
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let a = kl_ar1(&Ar1Posterior::new(mu.clone(), 0.0, s).expect("valid"));
            let b = posterior::kl_diag(&DiagPosterior::new(mu, vec![s; d]).expect("valid"));
            (a - b).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest negative KL value found (zero if none).
pub fn kl_negativity(kl_ar1: fn(&Ar1Posterior) -> f64, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let d = rng.random_range(1..=32);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * rng.random::<f64>()).collect();
        let s = rng.random_range(-4.0f64..4.0).exp();
        let rho = rng.random_range(-0.999..0.999);
        let var: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
        worst = worst
            .max(-kl_ar1(&Ar1Posterior::new(mu.clone(), rho, s).expect("valid")))
            .max(-posterior::kl_diag(&DiagPosterior::new(mu, var).expect("valid")));
    }
    worst
}

/// Recursive sampler vs dense factor times the same noise, absolute.
pub fn color_vs_matvec_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid()
        .map(|c| {
            let eps = standard_normal(&mut rng, c.dim());
            let fast = c.color(&eps).expect("length d");
            let slow = c.cholesky_factor().matvec(&eps).expect("length d");
            fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

/// Finite-difference check of `color_grad` in `(ρ, log s)` over the grid.
pub fn color_grad_reports(seed: u64, cfg: GradCheckConfig) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grid()
        .map(|c| {
            let eps = standard_normal(&mut rng, c.dim());
            let up = standard_normal(&mut rng, c.dim());
            let (dr, ds) = c.color_grad(&eps, &up).expect("length d");
            let d = c.dim();
            let loss = |p: &[f64]| {
                let y = Ar1Cov::new(d, p[0], p[1].exp()).expect("inside domain").color(&eps).expect("length d");
                y.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            finite_diff(loss, &[c.rho(), c.scale().ln()], &[dr, ds], &[], cfg)
        })
        .collect()
}

fn ar1_raw_params(p: &Ar1Posterior) -> Vec<f64> {
    let mut v = p.mu().to_vec();
    v.push(p.scale().ln());
    v.push(p.rho().atanh());
    v
}

fn ar1_from_raw(raw: &[f64]) -> Ar1Posterior {
    let d = raw.len() - 2;
    Ar1Posterior::new(raw[..d].to_vec(), raw[d + 1].tanh(), raw[d].exp()).expect("finite raw parameters")
}

/// KL gradient in `(μ, log s, ρ_raw)` vs differences of `kl_ar1 ∘ (exp, tanh)`.
pub fn kl_grad_reports(kl_ar1: fn(&Ar1Posterior) -> f64, seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for d in [1, 2, 3, 8, 32] {
        for _ in 0..4 {
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = Ar1Posterior::new(mu, rng.random_range(-0.95..0.95), rng.random_range(-2.0f64..2.0).exp()).expect("valid");
            let g = posterior::kl_ar1_grad(&p);
            let mut analytic = g.d_mu.clone();
            analytic.push(g.d_log_s);
            analytic.push(g.d_rho_raw);
            let groups = vec![
                ("mu".to_string(), 0..d),
                ("log_s".to_string(), d..d + 1),
                ("rho_raw".to_string(), d + 1..d + 2),
            ];
            out.push(finite_diff(
                |raw| kl_ar1(&ar1_from_raw(raw)),
                &ar1_raw_params(&p),
                &analytic,
                &groups,
                GradCheckConfig::default(),
            ));
        }
    }
    out
}

/// Pathwise sampler gradient vs differences of `⟨upstream, z⟩` at frozen noise.
pub fn sample_grad_reports(seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut settings = vec![(6usize, 0.3f64, 1.5f64)];
    for d in [1, 2, 5, 16, 40] {
        settings.push((d, rng.random_range(-0.95..0.95), rng.random_range(-2.0f64..2.0).exp()));
    }
    settings
        .into_iter()
        .map(|(d, rho, s)| {
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = Ar1Posterior::new(mu, rho, s).expect("valid");
            let eps = standard_normal(&mut rng, d);
            let up = standard_normal(&mut rng, d);
            let sample = posterior::reparam_ar1(&p, eps.clone()).expect("length d");
            let g = posterior::sample_ar1_grad(&p, &sample, &up).expect("length d");
            let mut analytic = g.d_mu.clone();
            analytic.push(g.d_log_s);
            analytic.push(g.d_rho_raw);
            let groups = vec![
                ("mu".to_string(), 0..d),
                ("log_s".to_string(), d..d + 1),
                ("rho_raw".to_string(), d + 1..d + 2),
            ];
            let loss = |raw: &[f64]| {
                let z = posterior::reparam_ar1(&ar1_from_raw(raw), eps.clone()).expect("length d").z;
                z.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
            };
            finite_diff(loss, &ar1_raw_params(&p), &analytic, &groups, GradCheckConfig::default())
        })
        .collect()
}

/// End-to-end check on a tiny VAE (16 pixels, hidden 8, latent 4, batch 2)
/// with frozen noise: every parameter's gradient of the mean batch loss.
pub fn vae_gradient_report(kind: PosteriorKind, recon: ReconLoss, beta: f64, seed: u64) -> GradCheckReport {
    let spec = VaeSpec {
        input_dim: 16,
        hidden_dim: 8,
        latent_dim: 4,
        posterior: kind,
        output_activation: recon.output_activation(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Vae::new(spec, seed).expect("valid spec");
    // Nudge biases off zero so every unit is exercised.
    let mut nudges = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    model.visit_params(&mut |p, _| {
        if p.len() <= 16 {
            p.iter_mut().for_each(|v| *v = nudges.random_range(-0.3..0.3));
        }
    });
    let images: Vec<Vec<f64>> = (0..2).map(|_| (0..16).map(|_| rng.random::<f64>()).collect()).collect();
    let xs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let eps: Vec<Vec<f64>> = (0..2).map(|_| standard_normal(&mut rng, 4)).collect();

    batch_loss_and_grad(&mut model, &xs, &eps, recon, beta).expect("tiny model evaluates");
    let analytic = model.grads_flat();
    let params = model.params_flat();
    let mut groups = Vec::new();
    let mut offset = 0;
    for (name, values, _) in model.named_tensors() {
        groups.push((name, offset..offset + values.len()));
        offset += values.len();
    }
    let mut probe = model.clone();
    let loss = |p: &[f64]| {
        probe.set_params_flat(p).expect("same shape");
        batch_loss_and_grad(&mut probe, &xs, &eps, recon, beta).expect("evaluates").total
    };
    finite_diff(loss, &params, &analytic, &groups, GradCheckConfig::default())
}

/// Runs every check. Monte-Carlo KL uses 10⁵ draws here to keep the command
/// quick; the acceptance suite uses 10⁶.
pub fn run_checks(subjects: &CheckSubjects) -> CheckReport {
    let mut rows = vec![
        row("cholesky_reconstruction", cholesky_reconstruction_error(), 1e-10),
        row("cholesky_vs_dense", cholesky_vs_dense_error(), 1e-9),
        row("log_det", log_det_error(subjects.log_det), 1e-8),
        row("kl_ar1", kl_oracle_error(subjects.kl_ar1, 31), 1e-9),
        row("kl_ar1_reduction", kl_reduction_error(subjects.kl_ar1, 1000, 32), 1e-12),
        row("kl_nonnegative", kl_negativity(subjects.kl_ar1, 10_000, 33), 1e-12),
        row("color_vs_matvec", color_vs_matvec_error(34), 1e-12),
    ];

    let mc_worst = mc_kl_settings()
        .iter()
        .map(|p| {
            let est = mc_kl_ar1(p, 100_000, 35);
            est.z_score((subjects.kl_ar1)(p))
        })
        .fold(0.0, f64::max);
    rows.push(row("kl_ar1_monte_carlo_sigmas", mc_worst, 4.0));

    let color_cfg = GradCheckConfig {
        step: 1e-5,
        tolerance: 1e-5,
        abs_floor: 1e-9,
    };
    rows.push(grad_row("color_grad", &color_grad_reports(36, color_cfg)));
    rows.push(grad_row("kl_ar1_grad", &kl_grad_reports(subjects.kl_ar1, 37)));
    rows.push(grad_row("sample_ar1_grad", &sample_grad_reports(38)));
    let vae: Vec<GradCheckReport> = [
        (PosteriorKind::Ar1, ReconLoss::Bernoulli, 1.0),
        (PosteriorKind::Diag, ReconLoss::Bernoulli, 1.0),
        (PosteriorKind::Ar1, ReconLoss::Gaussian, 4.0),
    ]
    .into_iter()
    .map(|(k, r, b)| vae_gradient_report(k, r, b, 39))
    .collect();
    rows.push(grad_row("vae_end_to_end_grad", &vae));
    CheckReport { rows }
}

/// The three fixed AR(1) settings used for Monte-Carlo KL checks.
pub fn mc_kl_settings() -> Vec<Ar1Posterior> {
    vec![
        Ar1Posterior::new(vec![0.0; 4], 0.7, 2.0).expect("valid"),
        Ar1Posterior::new(vec![0.5, -1.0, 0.25, 0.0, 1.5, -0.5, 0.0, 0.75], -0.5, 0.3).expect("valid"),
        Ar1Posterior::new(vec![0.2; 16], 0.95, 1.0).expect("valid"),
    ]
}

/// `E_q[log q − log p]` with draws from the production sampler and densities
/// from the dense oracle.
pub fn mc_kl_ar1(p: &Ar1Posterior, draws: usize, seed: u64) -> oracle::McEstimate {
    let chol = oracle::dense_cholesky(&oracle::kms_matrix(p.dim(), p.rho(), p.scale())).expect("positive definite");
    let mu = p.mu().to_vec();
    oracle::mc_kl(
        |rng| posterior::sample_ar1(p, rng).z,
        |z| oracle::gaussian_log_density(z, &mu, &chol),
        oracle::standard_normal_log_density,
        draws,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_size() {
        assert_eq!(grid().count(), 6 * 5 * 3);
    }

    #[test]
    fn rel_err_edge_cases() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-300, 0.0).is_infinite());
        assert!((rel_err(1.1, 1.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn broken_kl_is_reported() {
        fn bad_kl(p: &Ar1Posterior) -> f64 {
            posterior::kl_ar1(p) * 1.001
        }
        let subjects = CheckSubjects {
            kl_ar1: bad_kl,
            ..CheckSubjects::default()
        };
        assert!(kl_oracle_error(subjects.kl_ar1, 1) > 1e-9);
    }
}
