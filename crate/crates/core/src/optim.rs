//! Gradient-descent updates, weight clipping and the minibatch training loop.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::network::{avg_layer_gradient, backward, forward, loss, GradientSummary, Gradients, Mode, Network};
use crate::rng::{streams, RngStream};
use crate::tensor::Matrix;

/// The "clamp each weight" threshold used for perturbation-regularized runs.
pub const DEFAULT_MAX_NORM: f64 = 3.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxNormMode {
    /// Clamp every weight into `[-t, t]`.
    PerWeight,
    /// Rescale each unit's incoming weight row to L2 norm at most `t`.
    RowNorm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxNorm {
    pub threshold: f64,
    pub mode: MaxNormMode,
}

impl MaxNorm {
    pub fn per_weight(threshold: f64) -> Self {
        Self {
            threshold,
            mode: MaxNormMode::PerWeight,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub max_norm: Option<MaxNorm>,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Keep the epoch-averaged gradient matrices in the report.
    pub keep_gradient_snapshots: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.01,
            max_norm: None,
            batch_size: None,
            epochs: 1,
            shuffle_seed: 0,
            keep_gradient_snapshots: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if let OptimizerKind::Adam(a) = self.optimizer {
            for (name, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(format!("adam {name} must lie in [0, 1), got {b}")));
                }
            }
            if !(a.eps > 0.0) {
                return Err(Error::config(format!("adam eps must be > 0, got {}", a.eps)));
            }
        }
        if let Some(m) = self.max_norm {
            if !(m.threshold > 0.0) {
                return Err(Error::config(format!("max-norm threshold must be > 0, got {}", m.threshold)));
            }
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

fn check_same_len(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            left: (a, 1),
            right: (b, 1),
        });
    }
    Ok(())
}

/// `w ← w - μ·g` on flat buffers.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_same_len(params.len(), grads.len(), "sgd_update")?;
    for (w, g) in params.iter_mut().zip(grads) {
        *w -= lr * g;
    }
    Ok(())
}

pub fn sgd_step(weights: &mut Matrix, grads: &Matrix, lr: f64) -> Result<()> {
    if weights.shape() != grads.shape() {
        return Err(Error::Shape {
            op: "sgd_step",
            left: weights.shape(),
            right: grads.shape(),
        });
    }
    sgd_update(weights.as_mut_slice(), grads.as_slice(), lr)
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], cfg: &AdamConfig, lr: f64) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::contract(format!(
            "adam state sized for {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    check_same_len(params.len(), grads.len(), "adam_step")?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Clamps every weight into `[-t, t]`.
pub fn max_norm_clip(weights: &mut Matrix, t: f64) {
    for w in weights.as_mut_slice() {
        *w = w.clamp(-t, t);
    }
}

/// Rescales rows whose L2 norm exceeds `t`.
pub fn max_row_norm_clip(weights: &mut Matrix, t: f64) {
    for r in 0..weights.rows() {
        let row = weights.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > t {
            let s = t / norm;
            row.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub fn apply_max_norm(weights: &mut Matrix, max_norm: &MaxNorm) {
    match max_norm.mode {
        MaxNormMode::PerWeight => max_norm_clip(weights, max_norm.threshold),
        MaxNormMode::RowNorm => max_row_norm_clip(weights, max_norm.threshold),
    }
}

enum OptimizerState {
    Sgd,
    Adam(AdamConfig, Vec<(AdamState, AdamState)>),
}

impl OptimizerState {
    fn new(kind: OptimizerKind, net: &Network) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam(cfg) => OptimizerState::Adam(
                cfg,
                net.layers()
                    .iter()
                    .map(|l| (AdamState::new(l.weights.len()), AdamState::new(l.bias.len())))
                    .collect(),
            ),
        }
    }

    fn step(&mut self, net: &mut Network, grads: &Gradients, lr: f64) -> Result<()> {
        for (i, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
            match self {
                OptimizerState::Sgd => {
                    sgd_step(&mut layer.weights, &g.weights, lr)?;
                    sgd_update(&mut layer.bias, &g.bias, lr)?;
                }
                OptimizerState::Adam(cfg, states) => {
                    let (sw, sb) = &mut states[i];
                    adam_step(sw, layer.weights.as_mut_slice(), g.weights.as_slice(), cfg, lr)?;
                    adam_step(sb, &mut layer.bias, &g.bias, cfg, lr)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Example-weighted mean of the perturbed minibatch losses.
    pub train_loss: f64,
    /// Per-layer summary of the epoch-averaged weight gradient.
    pub gradients: Vec<GradientSummary>,
    pub gradient_snapshot: Option<Gradients>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

/// Observer invoked after every epoch with the updated network.
pub trait EpochCallback {
    fn on_epoch(&mut self, net: &Network, metrics: &EpochMetrics) -> Result<()>;
}

impl<F> EpochCallback for F
where
    F: FnMut(&Network, &EpochMetrics) -> Result<()>,
{
    fn on_epoch(&mut self, net: &Network, metrics: &EpochMetrics) -> Result<()> {
        self(net, metrics)
    }
}

/// No-op callback.
pub fn no_callback(_: &Network, _: &EpochMetrics) -> Result<()> {
    Ok(())
}

/// Minibatch training: per epoch, shuffle, then for every batch run a
/// train-mode forward pass, backpropagate, take an optimizer step and apply
/// max-norm clipping.
///
/// `rng` supplies the regularizer masks; shuffling uses its own stream
/// derived from `cfg.shuffle_seed`.
pub fn train(
    net: &mut Network,
    inputs: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
    rng: &mut RngStream,
    callback: &mut dyn EpochCallback,
) -> Result<TrainReport> {
    cfg.validate()?;
    if inputs.rows() != targets.rows() {
        return Err(Error::Shape {
            op: "train",
            left: inputs.shape(),
            right: targets.shape(),
        });
    }
    if inputs.cols() != net.input_dim() || targets.cols() != net.output_dim() {
        return Err(Error::Shape {
            op: "train",
            left: (inputs.cols(), targets.cols()),
            right: (net.input_dim(), net.output_dim()),
        });
    }
    let n = inputs.rows();
    let batch_size = cfg.batch_size.unwrap_or(n).min(n);
    let full_batch = batch_size == n;
    let mut shuffle_rng = RngStream::new(cfg.shuffle_seed, streams::SHUFFLE);
    let mut optimizer = OptimizerState::new(cfg.optimizer, net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        if !full_batch {
            shuffle_rng.shuffle(&mut order);
        }
        let mut epoch_grads = Gradients::zeros_like(net);
        let mut loss_sum = 0.0;
        let batches = order.chunks(batch_size).count();
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let (xb, yb): (Cow<'_, Matrix>, Cow<'_, Matrix>) = if full_batch {
                (Cow::Borrowed(inputs), Cow::Borrowed(targets))
            } else {
                (Cow::Owned(inputs.select_rows(chunk)), Cow::Owned(targets.select_rows(chunk)))
            };
            let trace = forward(net, &xb, Mode::Train, rng)?;
            let batch_loss = loss(net, &trace, &yb)?;
            let grads = backward(net, &trace, &yb)?;
            let grads_finite = grads
                .layers
                .iter()
                .all(|g| g.weights.is_finite() && g.bias.iter().all(|x| x.is_finite()));
            if !batch_loss.is_finite() || !grads_finite {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            epoch_grads.accumulate(&grads, 1.0 / batches as f64);
            optimizer.step(net, &grads, cfg.learning_rate)?;
            if let Some(m) = &cfg.max_norm {
                for layer in net.layers_mut() {
                    apply_max_norm(&mut layer.weights, m);
                }
            }
        }
        let gradients = (0..net.layers().len())
            .map(|l| avg_layer_gradient(&epoch_grads, l))
            .collect::<Result<Vec<_>>>()?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            gradients,
            gradient_snapshot: cfg.keep_gradient_snapshots.then_some(epoch_grads),
        };
        callback.on_epoch(net, &metrics)?;
        report.epochs.push(metrics);
    }
    Ok(report)
}
