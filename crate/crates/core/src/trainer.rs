//! Negative-ELBO objective, mini-batch training and prior sampling.
//!
//! The per-sample loss is `recon(x, x̂) + β·KL[q(z|x) ‖ N(0, I)]`, where `x̂`
//! decodes a single reparametrized draw. Gradients of a batch are the mean of
//! the per-sample gradients.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nets::{Activation, AdamConfig, AdamState, PosteriorKind, Vae, VaeSpec};
use crate::posterior::standard_normal;

/// Decoder outputs are clamped to `[BCE_CLAMP, 1 − BCE_CLAMP]` inside the
/// Bernoulli log-likelihood.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    /// Cross-entropy against sigmoid outputs.
    Bernoulli,
    /// `½‖x − x̂‖²`, i.e. a unit-variance Gaussian decoder up to a constant.
    Gaussian,
}

impl ReconLoss {
    pub fn output_activation(self) -> Activation {
        match self {
            ReconLoss::Bernoulli => Activation::Sigmoid,
            ReconLoss::Gaussian => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub posterior: PosteriorKind,
    pub recon: ReconLoss,
    pub beta: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            posterior: PosteriorKind::Diag,
            recon: ReconLoss::Bernoulli,
            beta: 1.0,
            latent_dim: 20,
            hidden_dim: 400,
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lr", self.lr)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::InvalidParameter {
                    name,
                    value: v,
                    reason: "must be finite and strictly positive",
                });
            }
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter {
                    name,
                    value: 0.0,
                    reason: "must be a positive integer",
                });
            }
        }
        Ok(())
    }

    pub fn vae_spec(&self, input_dim: usize) -> VaeSpec {
        VaeSpec {
            input_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            posterior: self.posterior,
            output_activation: self.recon.output_activation(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

fn check_pixels(x: &[f64]) -> Result<()> {
    match x.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        Some((index, &value)) => Err(Error::PixelOutOfRange { index, value }),
        None => Ok(()),
    }
}

fn check_same_len(x: &[f64], x_hat: &[f64]) -> Result<()> {
    if x.len() != x_hat.len() {
        return Err(Error::Dimension {
            what: "reconstruction",
            expected: x.len(),
            actual: x_hat.len(),
        });
    }
    Ok(())
}

/// Returns `(recon + β·kl, recon)` for one sample.
pub fn elbo_loss(x: &[f64], x_hat: &[f64], kl: f64, recon: ReconLoss, beta: f64) -> Result<(f64, f64)> {
    check_pixels(x)?;
    check_same_len(x, x_hat)?;
    let r = match recon {
        ReconLoss::Bernoulli => x
            .iter()
            .zip(x_hat)
            .map(|(&t, &p)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum(),
        ReconLoss::Gaussian => 0.5 * x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
    };
    Ok((r + beta * kl, r))
}

/// `∂recon/∂x̂`. Clamped Bernoulli outputs contribute zero.
pub fn recon_grad(x: &[f64], x_hat: &[f64], recon: ReconLoss) -> Vec<f64> {
    x.iter()
        .zip(x_hat)
        .map(|(&t, &p)| match recon {
            ReconLoss::Bernoulli => {
                if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                    0.0
                } else {
                    (1.0 - t) / (1.0 - p) - t / p
                }
            }
            ReconLoss::Gaussian => p - t,
        })
        .collect()
}

/// Batch means of the objective and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Evaluates the mean batch loss for the given noise and accumulates its
/// gradient into `model` (after zeroing the buffers).
pub fn batch_loss_and_grad(model: &mut Vae, xs: &[&[f64]], eps: &[Vec<f64>], recon: ReconLoss, beta: f64) -> Result<LossParts> {
    if xs.len() != eps.len() {
        return Err(Error::Dimension {
            what: "noise vectors per batch",
            expected: xs.len(),
            actual: eps.len(),
        });
    }
    model.zero_grad();
    let scale = 1.0 / xs.len() as f64;
    let mut parts = LossParts::default();
    for (x, e) in xs.iter().zip(eps) {
        let pass = model.encode_cached(x)?;
        let sample = pass.posterior.reparam(e.clone())?;
        let dec = model.decode_cached(&sample.z)?;
        let kl = pass.posterior.kl();
        let (total, r) = elbo_loss(x, dec.output(), kl, recon, beta)?;
        parts.total += total * scale;
        parts.recon += r * scale;
        parts.kl += kl * scale;

        let g_out: Vec<f64> = recon_grad(x, dec.output(), recon).into_iter().map(|g| g * scale).collect();
        let g_z = model.backward_decoder(&dec, &g_out)?;
        let g_post = pass.posterior.backward(&sample, &g_z, beta * scale)?;
        model.backward_encoder(&pass, &g_post)?;
    }
    Ok(parts)
}

/// Mean test loss with one reparametrized draw per image, noise seeded by
/// `noise_seed`. The total is reported as `recon + β·kl` of the means.
pub fn evaluate(model: &Vae, data: &Dataset, recon: ReconLoss, beta: f64, noise_seed: u64) -> Result<LossParts> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation split has no images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let d = model.spec().latent_dim;
    let (mut r_sum, mut kl_sum) = (0.0, 0.0);
    for x in data.iter() {
        let q = model.encode(x)?;
        let sample = q.reparam(standard_normal(&mut rng, d))?;
        let x_hat = model.decode(&sample.z)?;
        let kl = q.kl();
        let (_, r) = elbo_loss(x, &x_hat, kl, recon, beta)?;
        r_sum += r;
        kl_sum += kl;
    }
    let n = data.len() as f64;
    let (r, kl) = (r_sum / n, kl_sum / n);
    Ok(LossParts {
        total: r + beta * kl,
        recon: r,
        kl,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_recon: f64,
    pub test_kl: f64,
    pub seconds: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,test_loss,test_recon,test_kl,seconds";

/// Decimal (never exponent) notation with at least 12 significant digits.
pub fn format_decimal(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0.000000000000".to_string() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (11 - magnitude).clamp(0, 340) as usize;
    format!("{v:.decimals$}")
}

impl EpochStats {
    /// One CSV row. Without `wall_clock` the seconds column is written as
    /// zero, which keeps logs of identical runs byte-identical.
    pub fn csv_row(&self, wall_clock: bool) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            format_decimal(self.train_loss),
            format_decimal(self.test_loss),
            format_decimal(self.test_recon),
            format_decimal(self.test_kl),
            format_decimal(if wall_clock { self.seconds } else { 0.0 }),
        )
    }
}

pub fn stats_to_csv(stats: &[EpochStats], wall_clock: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in stats {
        let _ = writeln!(out, "{}", s.csv_row(wall_clock));
    }
    out
}

/// splitmix64 finalizer over `seed ⊕ salt`, for deriving independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_TRAIN_NOISE: u64 = 0x0074_7261_696e;
const SALT_EVAL_NOISE: u64 = 0x6576_616c;
const SALT_SHUFFLE: u64 = 0x7368_7566;

pub fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    mix_seed(mix_seed(seed, SALT_SHUFFLE), epoch as u64)
}

pub fn eval_noise_seed(seed: u64) -> u64 {
    mix_seed(seed, SALT_EVAL_NOISE)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Vae,
    pub stats: Vec<EpochStats>,
}

pub fn train(train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train_set, test_set, cfg, |_| Ok(()))
}

/// Like [`train`], calling `on_epoch` after each epoch's evaluation.
pub fn train_with<F>(train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split has no images"));
    }
    if test_set.is_empty() {
        return Err(Error::EmptyDataset("test split has no images"));
    }
    if train_set.pixels() != test_set.pixels() {
        return Err(Error::Dimension {
            what: "test image size",
            expected: train_set.pixels(),
            actual: test_set.pixels(),
        });
    }

    let mut model = Vae::new(cfg.vae_spec(train_set.pixels()), cfg.seed)?;
    let mut adam = AdamState::for_model(cfg.adam(), &mut model);
    let mut noise = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SALT_TRAIN_NOISE));
    let d = cfg.latent_dim;
    let mut stats = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut train_sum = 0.0;
        for (b, idx) in batches(train_set.len(), cfg.batch_size, shuffle_seed(cfg.seed, epoch)).into_iter().enumerate() {
            let xs: Vec<&[f64]> = idx.iter().map(|&i| train_set.image(i)).collect();
            let eps: Vec<Vec<f64>> = idx.iter().map(|_| standard_normal(&mut noise, d)).collect();
            let parts = batch_loss_and_grad(&mut model, &xs, &eps, cfg.recon, cfg.beta)?;
            let grads_finite = model.grads_flat().iter().all(|g| g.is_finite());
            if !parts.total.is_finite() || !grads_finite {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    param_norms: model.param_norms(),
                });
            }
            train_sum += parts.total * idx.len() as f64;
            adam.step(&mut model)?;
        }
        let test = evaluate(&model, test_set, cfg.recon, cfg.beta, eval_noise_seed(cfg.seed))?;
        if !test.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                param_norms: model.param_norms(),
            });
        }
        let s = EpochStats {
            epoch,
            train_loss: train_sum / train_set.len() as f64,
            test_loss: test.total,
            test_recon: test.recon,
            test_kl: test.kl,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&s)?;
        stats.push(s);
    }
    Ok(TrainOutcome { model, stats })
}

/// Decodes `count` draws from the prior, clamped to `[0, 1]`.
pub fn generate<R: Rng + ?Sized>(model: &Vae, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let d = model.spec().latent_dim;
    (0..count)
        .map(|_| {
            let z = standard_normal(rng, d);
            Ok(model.decode(&z)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
        })
        .collect()
}

/// [`generate`] with a ChaCha8 stream seeded from `seed`.
pub fn generate_seeded(model: &Vae, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    generate(model, count, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_correlated, Split};

    #[test]
    fn perfect_reconstruction() {
        let x = [0.0, 1.0, 1.0, 0.0];
        let (total, r) = elbo_loss(&x, &x, 0.0, ReconLoss::Bernoulli, 1.0).unwrap();
        assert!(total < 1e-6 && total == r, "{total}");
        let x = [0.2, 0.7];
        assert_eq!(elbo_loss(&x, &x, 0.0, ReconLoss::Gaussian, 1.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn bernoulli_half() {
        let (total, r) = elbo_loss(&[1.0], &[0.5], 0.0, ReconLoss::Bernoulli, 1.0).unwrap();
        assert!((r - 2f64.ln()).abs() < 1e-15);
        assert_eq!(total, r);
        let (total, _) = elbo_loss(&[1.0], &[0.5], 0.25, ReconLoss::Bernoulli, 4.0).unwrap();
        assert!((total - 2f64.ln() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elbo_rejects_bad_pixels() {
        assert!(matches!(
            elbo_loss(&[1.2], &[0.5], 0.0, ReconLoss::Gaussian, 1.0),
            Err(Error::PixelOutOfRange { .. })
        ));
        assert!(elbo_loss(&[0.2, 0.3], &[0.5], 0.0, ReconLoss::Gaussian, 1.0).is_err());
    }

    #[test]
    fn beta_strictly_increases_loss_when_kl_positive() {
        let x = [0.3, 0.9];
        let xh = [0.4, 0.6];
        let mut prev = f64::NEG_INFINITY;
        for beta in [0.5, 1.0, 2.0, 4.0] {
            let (total, _) = elbo_loss(&x, &xh, 0.3, ReconLoss::Bernoulli, beta).unwrap();
            assert!(total > prev);
            prev = total;
        }
    }

    #[test]
    fn recon_grad_matches_differences() {
        let x = [0.0, 0.3, 1.0];
        let xh = [0.2, 0.5, 0.9];
        for kind in [ReconLoss::Bernoulli, ReconLoss::Gaussian] {
            let g = recon_grad(&x, &xh, kind);
            for i in 0..3 {
                let h = 1e-6;
                let mut a = xh;
                let mut b = xh;
                a[i] += h;
                b[i] -= h;
                let fd = (elbo_loss(&x, &a, 0.0, kind, 1.0).unwrap().1 - elbo_loss(&x, &b, 0.0, kind, 1.0).unwrap().1) / (2.0 * h);
                assert!((g[i] - fd).abs() < 1e-6, "{kind:?} {i}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.beta = -1.0;
        assert!(matches!(c.validate(), Err(Error::InvalidParameter { name: "beta", .. })));
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(0.0), "0.000000000000");
        assert_eq!(format_decimal(123.456), "123.456000000");
        assert_eq!(format_decimal(0.00125), "0.00125000000000");
        assert!(!format_decimal(1e-12).contains('e'));
        assert!(!format_decimal(3.5e20).contains('e'));
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            latent_dim: 3,
            hidden_dim: 8,
            epochs: 2,
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_initial_model() {
        let data = synth_correlated(20, 3, 0.5, 1, Split::Train).unwrap().data;
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&data, &data, &cfg).unwrap();
        assert!(out.stats.is_empty());
        let fresh = Vae::new(cfg.vae_spec(9), cfg.seed).unwrap();
        assert_eq!(out.model.params_flat(), fresh.params_flat());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = synth_correlated(20, 3, 0.5, 1, Split::Train).unwrap().data;
        let empty = data.take(0);
        assert!(matches!(train(&empty, &data, &tiny_cfg()), Err(Error::EmptyDataset(_))));
        assert!(matches!(train(&data, &empty, &tiny_cfg()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn nan_aborts_with_diagnostic() {
        let data = synth_correlated(16, 3, 0.5, 1, Split::Train).unwrap().data;
        let cfg = TrainConfig { lr: 1e300, epochs: 50, ..tiny_cfg() };
        match train(&data, &data, &cfg) {
            Err(e @ Error::NonFiniteLoss { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("batch") && msg.contains("encoder.0.weight="), "{msg}");
            }
            other => panic!("expected NaN abort, got {:?}", other.map(|o| o.stats)),
        }
    }

    #[test]
    fn recorded_totals_decompose() {
        let data = synth_correlated(40, 3, 0.5, 2, Split::Train).unwrap().data;
        for posterior in [PosteriorKind::Diag, PosteriorKind::Ar1] {
            let cfg = TrainConfig {
                posterior,
                beta: 2.5,
                ..tiny_cfg()
            };
            let out = train(&data, &data, &cfg).unwrap();
            assert_eq!(out.stats.len(), 2);
            for s in &out.stats {
                assert!((s.test_loss - (s.test_recon + cfg.beta * s.test_kl)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generate_edge_cases() {
        let spec = tiny_cfg().vae_spec(9);
        let zero = Vae::zeroed(spec).unwrap();
        assert!(generate(&zero, 0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap().is_empty());
        let imgs = generate(&zero, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(imgs.iter().all(|im| im == &imgs[0]));
        assert_eq!(imgs[0], vec![0.5; 9]);

        let vae = Vae::new(spec, 3).unwrap();
        let a = generate(&vae, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = generate(&vae, 4, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
