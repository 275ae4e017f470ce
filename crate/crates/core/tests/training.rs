use ar1vae_core::check::vae_gradient_report;
use ar1vae_core::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use ar1vae_core::data::{batches, read_idx_images, synth_correlated, write_idx_images, Dataset, Split};
use ar1vae_core::trainer::{batch_loss_and_grad, stats_to_csv, train, ReconLoss, TrainConfig};
use ar1vae_core::{PosteriorKind, Vae};
use proptest::prelude::*;

fn small_config(kind: PosteriorKind, seed: u64) -> TrainConfig {
    TrainConfig {
        posterior: kind,
        latent_dim: 4,
        hidden_dim: 16,
        epochs: 2,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

fn synth(count: usize, seed: u64, split: Split) -> Dataset {
    synth_correlated(count, 6, 0.8, seed, split).unwrap().data
}

#[test]
fn training_is_deterministic() {
    let (tr, te) = (synth(64, 1, Split::Train), synth(32, 2, Split::Test));
    for kind in [PosteriorKind::Diag, PosteriorKind::Ar1] {
        let a = train(&tr, &te, &small_config(kind, 7)).unwrap();
        let b = train(&tr, &te, &small_config(kind, 7)).unwrap();
        assert_eq!(stats_to_csv(&a.stats, false), stats_to_csv(&b.stats, false));
        assert_eq!(a.model.params_flat(), b.model.params_flat());
        let c = train(&tr, &te, &small_config(kind, 8)).unwrap();
        assert_ne!(a.model.params_flat(), c.model.params_flat());
    }
}

#[test]
fn posterior_swap_leaves_shared_initialization_alone() {
    let cfg = small_config(PosteriorKind::Diag, 3);
    let diag = Vae::new(cfg.vae_spec(36), 3).unwrap();
    let ar1 = Vae::new(small_config(PosteriorKind::Ar1, 3).vae_spec(36), 3).unwrap();
    let shared = |v: &Vae| {
        v.named_tensors()
            .into_iter()
            .filter(|(n, _, _)| !n.contains("log_var") && !n.contains("log_s") && !n.contains("rho_raw"))
            .map(|(n, p, _)| (n, p.to_vec()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shared(&diag), shared(&ar1));
}

#[test]
fn gaussian_single_sample_overfits() {
    let x: Vec<f64> = (0..16).map(|i| (i as f64 / 15.0).powi(2)).collect();
    let data = Dataset::new(x, 4, 4, Split::Train).unwrap();
    for kind in [PosteriorKind::Diag, PosteriorKind::Ar1] {
        let cfg = TrainConfig {
            posterior: kind,
            recon: ReconLoss::Gaussian,
            latent_dim: 2,
            hidden_dim: 16,
            epochs: 300,
            batch_size: 1,
            lr: 1e-2,
            beta: 1.0,
            seed: 11,
        };
        let out = train(&data, &data, &cfg).unwrap();
        let first = out.stats.first().unwrap().test_recon;
        let last = out.stats.last().unwrap().test_recon;
        assert!(last < 0.1 * first, "{kind}: recon {first} -> {last}");
    }
}

#[test]
fn end_to_end_gradients_pass_for_every_configuration() {
    for kind in [PosteriorKind::Diag, PosteriorKind::Ar1] {
        for recon in [ReconLoss::Bernoulli, ReconLoss::Gaussian] {
            for beta in [0.0, 1.0, 4.0] {
                let report = vae_gradient_report(kind, recon, beta, 17);
                assert!(report.passed, "{kind} {recon:?} β={beta}: {report:?}");
            }
        }
    }
}

#[test]
fn batch_loss_is_mean_of_single_losses() {
    let spec = small_config(PosteriorKind::Ar1, 0).vae_spec(36);
    let mut model = Vae::new(spec, 5).unwrap();
    let data = synth(3, 4, Split::Train);
    let eps: Vec<Vec<f64>> = (0..3).map(|k| vec![0.1 * k as f64 - 0.1; 4]).collect();
    let xs: Vec<&[f64]> = data.iter().collect();
    let whole = batch_loss_and_grad(&mut model, &xs, &eps, ReconLoss::Bernoulli, 1.0).unwrap();
    let mut sum = 0.0;
    for k in 0..3 {
        sum += batch_loss_and_grad(&mut model, &xs[k..k + 1], &eps[k..k + 1], ReconLoss::Bernoulli, 1.0).unwrap().total;
    }
    assert!((whole.total - sum / 3.0).abs() < 1e-12);
}

#[test]
fn checkpoint_of_trained_model_roundtrips() {
    let (tr, te) = (synth(32, 1, Split::Train), synth(16, 2, Split::Test));
    let cfg = small_config(PosteriorKind::Ar1, 1);
    let out = train(&tr, &te, &cfg).unwrap();
    let meta = CheckpointMeta {
        spec: *out.model.spec(),
        image_rows: 6,
        image_cols: 6,
        config: Some(cfg),
    };
    let bytes = write_checkpoint(&out.model, &meta);
    let (back, _) = read_checkpoint(&bytes).unwrap();
    let x = te.image(0);
    assert_eq!(back.encode(x).unwrap().mu(), out.model.encode(x).unwrap().mu());
}

proptest! {
    #[test]
    fn idx_roundtrip_preserves_bytes(
        rows in 1usize..6,
        cols in 1usize..6,
        pixels in prop::collection::vec(any::<u8>(), 0..200),
    ) {
        let n = rows * cols;
        let count = pixels.len() / n;
        let images: Vec<f64> = pixels[..count * n].iter().map(|&p| p as f64 / 255.0).collect();
        let data = Dataset::new(images, rows, cols, Split::Test).unwrap();
        let bytes = write_idx_images(&data);
        let back = read_idx_images(&bytes, Split::Test).unwrap();
        prop_assert_eq!(back.len(), count);
        prop_assert_eq!(back.images(), data.images());
        prop_assert_eq!(write_idx_images(&back), bytes);
    }

    #[test]
    fn batches_cover_every_index_once(count in 0usize..300, size in 1usize..70, seed in any::<u64>()) {
        let b = batches(count, size, seed);
        let mut seen: Vec<usize> = b.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..count).collect::<Vec<_>>());
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= size));
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == size));
    }
}
