use bridgeout::data::gen_linear_regression;
use bridgeout::network::{forward, Mode};
use bridgeout::optim::{no_callback, train, TrainConfig};
use bridgeout::{Activation, Loss, Matrix, Network, RngStream};

fn mse(net: &Network, x: &Matrix, y: &Matrix) -> f64 {
    let out = forward(net, x, Mode::Eval, &mut RngStream::new(0, 0)).unwrap().into_output();
    out.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

#[test]
fn exactly_solvable_regression_fits() {
    let (data, truth) = gen_linear_regression(60, 8, 3, 0.0, &mut RngStream::new(4, 1)).unwrap();
    let mut net = Network::xavier(&[8, 3], &[Activation::Identity], Loss::Mse, &mut RngStream::new(4, 2)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 5000,
        ..TrainConfig::default()
    };
    train(
        &mut net,
        &data.inputs,
        &data.targets,
        &cfg,
        &mut RngStream::new(4, 3),
        &mut no_callback,
    )
    .unwrap();
    assert!(mse(&net, &data.inputs, &data.targets) < 1e-4);
    let learned = net.layers()[0].weights.transpose();
    for (a, b) in learned.as_slice().iter().zip(truth.as_slice()) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn training_is_reproducible_per_seed() {
    let (data, _) = gen_linear_regression(32, 5, 2, 0.1, &mut RngStream::new(1, 1)).unwrap();
    let run = |seed: u64| {
        let mut net = Network::xavier(
            &[5, 4, 2],
            &[Activation::Relu, Activation::Identity],
            Loss::Mse,
            &mut RngStream::new(seed, 2),
        )
        .unwrap()
        .with_hidden_regularizer(bridgeout::RegularizerConfig::bridgeout(0.5, 1.0).unwrap())
        .unwrap();
        let cfg = TrainConfig {
            batch_size: Some(8),
            epochs: 10,
            shuffle_seed: seed,
            ..TrainConfig::default()
        };
        let report = train(
            &mut net,
            &data.inputs,
            &data.targets,
            &cfg,
            &mut RngStream::new(seed, 3),
            &mut no_callback,
        )
        .unwrap();
        (net, report)
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5).0, run(6).0);
}
