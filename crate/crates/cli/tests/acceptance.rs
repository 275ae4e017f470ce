//! Acceptance suite. Runs every criterion at its stated tolerance and runtime
//! budget, printing one PASS/FAIL line each; exits nonzero if any fails.
//!
//! `cargo test -p ar1vae --test acceptance`

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ar1vae_core::check::{
    grid, kl_grad_reports, mc_kl_ar1, mc_kl_settings, rel_err, sample_grad_reports, vae_gradient_report,
};
use ar1vae_core::data::SynthSpec;
use ar1vae_core::oracle::{dense_cholesky, gaussian_kl_dense, kms_matrix, log_det_from_cholesky, CovarianceAccumulator};
use ar1vae_core::posterior::{kl_ar1, kl_diag, sample_ar1, standard_normal, Ar1Posterior, DiagPosterior};
use ar1vae_core::trainer::train;
use ar1vae_core::{PosteriorKind, ReconLoss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn max_entry_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn cholesky_identity() -> Outcome {
    let (mut recon, mut dense) = (0.0f64, 0.0f64);
    for c in grid() {
        let l = c.cholesky_factor();
        let llt = l.matmul(&l.transpose()).unwrap();
        recon = recon.max(max_entry_rel(llt.entries(), c.materialize().entries()));
        let textbook = dense_cholesky(&kms_matrix(c.dim(), c.rho(), c.scale())).unwrap();
        dense = dense.max(max_entry_rel(l.entries(), textbook.entries()));
    }
    outcome(recon <= 1e-10 && dense <= 1e-9, format!("L·Lᵀ vs C {recon:.2e} (≤1e-10), L vs dense {dense:.2e} (≤1e-9)"))
}

fn determinant_identity() -> Outcome {
    let worst = grid()
        .map(|c| {
            let l = dense_cholesky(&kms_matrix(c.dim(), c.rho(), c.scale())).unwrap();
            rel_err(c.log_det(), log_det_from_cholesky(&l))
        })
        .fold(0.0, f64::max);
    outcome(worst <= 1e-8, format!("log_det vs 2Σlog diag {worst:.2e} (≤1e-8)"))
}

fn kl_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for c in grid() {
        let mu: Vec<f64> = (0..c.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let want = gaussian_kl_dense(&mu, &kms_matrix(c.dim(), c.rho(), c.scale())).unwrap();
        worst = worst.max(rel_err(kl_ar1(&Ar1Posterior::new(mu, c.rho(), c.scale()).unwrap()), want));
    }
    let mut z_max = 0.0f64;
    for (k, p) in mc_kl_settings().iter().enumerate() {
        z_max = z_max.max(mc_kl_ar1(p, 1_000_000, 31 + k as u64).z_score(kl_ar1(p)));
    }
    outcome(worst <= 1e-9 && z_max <= 4.0, format!("vs dense oracle {worst:.2e} (≤1e-9), MC 10⁶ worst {z_max:.2}σ (≤4)"))
}

fn reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=64);
        let s = rng.random_range(-4.6f64..4.6).exp();
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = kl_ar1(&Ar1Posterior::new(mu.clone(), 0.0, s).unwrap());
        let b = kl_diag(&DiagPosterior::new(mu, vec![s; d]).unwrap());
        worst = worst.max((a - b).abs());
    }
    outcome(worst <= 1e-12, format!("|kl_ar1(ρ=0) − kl_diag| {worst:.2e} over 10³ cases (≤1e-12)"))
}

fn sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut matvec = 0.0f64;
    for c in grid() {
        let eps = standard_normal(&mut rng, c.dim());
        let fast = c.color(&eps).unwrap();
        let slow = c.cholesky_factor().matvec(&eps).unwrap();
        matvec = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(matvec, f64::max);
    }
    let (d, rho, s) = (4, 0.7, 2.0);
    let p = Ar1Posterior::new(vec![0.0; d], rho, s).unwrap();
    let mut acc = CovarianceAccumulator::new(d);
    for _ in 0..100_000 {
        acc.push(&sample_ar1(&p, &mut rng).z);
    }
    let (got, want) = (acc.covariance(), kms_matrix(d, rho, s));
    let (mut diag, mut off) = (0.0f64, 0.0f64);
    for i in 0..d {
        for j in 0..d {
            if i == j {
                diag = diag.max(rel_err(got[(i, j)], want[(i, j)]));
            } else {
                off = off.max((got[(i, j)] - want[(i, j)]).abs());
            }
        }
    }
    outcome(
        matvec <= 1e-12 && diag <= 0.05 && off <= 0.05,
        format!("recursion vs L·ε {matvec:.2e} (≤1e-12), cov diag {diag:.3} rel (≤0.05), off-diag {off:.3} abs (≤0.05)"),
    )
}

fn gradients() -> Outcome {
    let kl = kl_grad_reports(kl_ar1, 6);
    let sample = sample_grad_reports(6);
    let worst = |r: &[ar1vae_core::oracle::GradCheckReport]| r.iter().map(|x| x.max_rel_error()).fold(0.0, f64::max);
    let mut e2e = Vec::new();
    for kind in [PosteriorKind::Diag, PosteriorKind::Ar1] {
        for recon in [ReconLoss::Bernoulli, ReconLoss::Gaussian] {
            e2e.push(vae_gradient_report(kind, recon, 1.0, 6));
        }
    }
    let all_ok = kl.iter().chain(&sample).chain(&e2e).all(|r| r.passed && r.tolerance == 1e-4 && r.abs_floor == 1e-6);
    outcome(
        all_ok,
        format!(
            "kl_ar1_grad {:.1e}, sample_ar1_grad {:.1e}, end-to-end {:.1e} (≤1e-4, floor 1e-6)",
            worst(&kl),
            worst(&sample),
            worst(&e2e)
        ),
    )
}

fn paired_ordering() -> Outcome {
    let mut wins = 0;
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let (train_set, test_set) = SynthSpec::default().build(seed).unwrap();
        let cfg = |posterior| TrainConfig {
            posterior,
            recon: ReconLoss::Bernoulli,
            beta: 1.0,
            latent_dim: 8,
            hidden_dim: 64,
            epochs: 10,
            batch_size: 64,
            lr: 1e-3,
            seed,
        };
        let diag = train(&train_set, &test_set, &cfg(PosteriorKind::Diag)).unwrap();
        let ar1 = train(&train_set, &test_set, &cfg(PosteriorKind::Ar1)).unwrap();
        let gap = ar1.stats.last().unwrap().test_loss - diag.stats.last().unwrap().test_loss;
        if gap <= 0.0 {
            wins += 1;
        }
        gaps.push(format!("{gap:+.2e}"));
    }
    outcome(wins >= 4, format!("ar1 ≤ diag in {wins}/5 seeds (need ≥4); ar1 − diag per seed [{}]", gaps.join(", ")))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ar1vae");
    let root = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = root.path().join(name);
        let status = Command::new(bin)
            .args(["train", "--posterior", "ar1", "--data", "synth", "--epochs", "2", "--seed", "7"])
            .args(["--d", "8", "--hidden", "64", "--batch", "64"])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let csv_same = read(&a, "train_log.csv") == read(&b, "train_log.csv");
    let ckpt_same = read(&a, "checkpoint.bin") == read(&b, "checkpoint.bin");
    let rows = String::from_utf8(read(&a, "train_log.csv")).unwrap().lines().count() - 1;
    outcome(csv_same && ckpt_same && rows == 2, format!("csv identical {csv_same}, checkpoint identical {ckpt_same}, {rows} epoch rows"))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (1, "cholesky identity", Duration::from_secs(5), cholesky_identity),
        (2, "determinant identity", Duration::from_secs(1), determinant_identity),
        (3, "kl correctness", Duration::from_secs(60), kl_correctness),
        (4, "reduction at rho=0", Duration::from_secs(1), reduction),
        (5, "sampler equivalence and statistics", Duration::from_secs(30), sampler),
        (6, "gradient suite", Duration::from_secs(60), gradients),
        (7, "paired ordering experiment", Duration::from_secs(600), paired_ordering),
        (8, "determinism", Duration::from_secs(600), determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run));
        let elapsed = started.elapsed();
        let (passed, detail) = match result {
            Ok(o) => (o.passed && elapsed <= budget, o.detail),
            Err(e) => (false, format!("panicked: {}", e.downcast_ref::<String>().cloned().unwrap_or_default())),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "criterion {n} [{}] {name}: {detail}; {:.2}s (budget {}s)",
            if passed { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
