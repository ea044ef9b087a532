use bridgeout::optim::{train, MaxNorm, TrainConfig};
use bridgeout::regularizer::{expected_perturbation, perturb, perturb_bridgeout, sample_mask};
use bridgeout::{Activation, Loss, Matrix, Network, RegularizerConfig, RngStream};
use proptest::prelude::*;

/// Per-entry running mean and variance of perturbed weights over `n` draws.
fn monte_carlo(cfg: &RegularizerConfig, w: &Matrix, n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = RngStream::new(seed, 5);
    let mut sum = vec![0.0; w.len()];
    let mut sq = vec![0.0; w.len()];
    for _ in 0..n {
        let mask = sample_mask(cfg, w.rows(), w.cols(), &mut rng).unwrap().unwrap();
        let wt = perturb(cfg, w, &mask).unwrap();
        for ((s, q), &v) in sum.iter_mut().zip(&mut sq).zip(wt.as_slice()) {
            *s += v;
            *q += v * v;
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let stderr = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / nf - m * m).max(0.0) * nf / (nf - 1.0) / nf).sqrt())
        .collect();
    (mean, stderr)
}

fn weights() -> Matrix {
    Matrix::from_rows(&[vec![0.8, -0.3, 0.05], vec![-1.7, 0.0, 2.4]]).unwrap()
}

fn assert_within_four_stderr(cfg: &RegularizerConfig, expected: &Matrix, n: usize) {
    let (mean, se) = monte_carlo(cfg, &weights(), n, 17);
    for ((m, s), e) in mean.iter().zip(&se).zip(expected.as_slice()) {
        assert!(
            (m - e).abs() <= 4.0 * s + 1e-15,
            "{}: mean {m} expected {e} stderr {s}",
            cfg.label()
        );
    }
}

#[test]
fn bridgeout_and_dropout_noise_is_zero_mean() {
    for cfg in [
        RegularizerConfig::bridgeout(0.5, 1.0).unwrap(),
        RegularizerConfig::bridgeout(0.3, 0.5).unwrap(),
        RegularizerConfig::bridgeout(0.8, 2.0).unwrap(),
        RegularizerConfig::dropout(0.5).unwrap(),
        RegularizerConfig::dropout(0.7).unwrap(),
    ] {
        assert_within_four_stderr(&cfg, &weights(), 100_000);
    }
}

#[test]
fn shakeout_mean_matches_closed_form() {
    let (p, c) = (0.6, 0.3);
    let w = weights();
    let sgn = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let biased = w.map(|x| x + c * sgn(x) * (p / (1.0 - p) - (1.0 - p)));
    let cfg = RegularizerConfig::shakeout(p, c).unwrap();
    let closed = expected_perturbation(&cfg, &w).unwrap();
    assert!(closed.sub(&biased).unwrap().max_abs() < 1e-12);
    assert_within_four_stderr(&cfg, &biased, 1_000_000);
    let unbiased = cfg.with_unbiased_shakeout(true);
    assert_within_four_stderr(&unbiased, &w, 1_000_000);
}

#[test]
fn monte_carlo_error_shrinks_with_draws() {
    let cfg = RegularizerConfig::bridgeout(0.5, 1.0).unwrap();
    let err = |n: usize| {
        let (mean, _) = monte_carlo(&cfg, &weights(), n, 3);
        mean.iter()
            .zip(weights().as_slice())
            .map(|(m, w)| (m - w).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let small = err(1_000);
    let large = err(100_000);
    assert!(large < small, "{large} !< {small}");
}

proptest! {
    #[test]
    fn full_retention_bridgeout_is_identity(
        data in prop::collection::vec(-4.0f64..4.0, 6),
        q in 0.1f64..3.0,
    ) {
        let w = Matrix::from_vec(2, 3, data).unwrap();
        let ones = Matrix::filled(2, 3, 1.0);
        prop_assert_eq!(perturb_bridgeout(&w, &ones, 1.0, q).unwrap(), w);
    }

    #[test]
    fn zero_weights_are_fixed_points(
        p in 0.05f64..0.95,
        q in 0.1f64..3.0,
        c in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let w = Matrix::zeros(3, 4);
        let mut rng = RngStream::new(seed, 3);
        for cfg in [
            RegularizerConfig::bridgeout(p, q).unwrap(),
            RegularizerConfig::dropout(p).unwrap(),
            RegularizerConfig::shakeout(p, c).unwrap(),
        ] {
            let mask = sample_mask(&cfg, 3, 4, &mut rng).unwrap().unwrap();
            prop_assert_eq!(perturb(&cfg, &w, &mask).unwrap().max_abs(), 0.0);
        }
    }

    // full batch, so the callback sees every step
    #[test]
    fn max_norm_holds_after_every_step(
        threshold in 0.05f64..1.0,
        lr in 0.1f64..5.0,
        seed in 0u64..1000,
    ) {
        let mut rng = RngStream::new(seed, 2);
        let mut net = Network::xavier(&[4, 6, 2], &[Activation::Sigmoid, Activation::Identity], Loss::Mse, &mut rng).unwrap()
            .with_hidden_regularizer(RegularizerConfig::bridgeout(0.5, 1.0).unwrap()).unwrap();
        let x = Matrix::from_vec(8, 4, (0..32).map(|_| 3.0 * rng.standard_normal()).collect()).unwrap();
        let y = Matrix::from_vec(8, 2, (0..16).map(|_| 10.0 * rng.standard_normal()).collect()).unwrap();
        let cfg = TrainConfig {
            learning_rate: lr,
            max_norm: Some(MaxNorm::per_weight(threshold)),
            epochs: 20,
            ..TrainConfig::default()
        };
        let mut worst = 0.0f64;
        let mut check = |n: &Network, _: &bridgeout::optim::EpochMetrics| -> bridgeout::Result<()> {
            for l in n.layers() {
                worst = worst.max(l.weights.max_abs());
            }
            Ok(())
        };
        train(&mut net, &x, &y, &cfg, &mut RngStream::new(seed, 3), &mut check).unwrap();
        prop_assert!(worst <= threshold);
    }
}
