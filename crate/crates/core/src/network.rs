//! Dense feedforward networks whose forward and backward passes thread the
//! perturbed weights of each layer's regularizer.
//!
//! Activations are stored batch-major: a batch is an `n × d` matrix with one
//! example per row, and a layer with weights `W` (`k × d`) maps it to
//! `ν = a·W̃ᵀ + b` of shape `n × k`.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::regularizer::{perturb, sample_mask, weight_grad_factor, MaskSet, RegularizerConfig, RegularizerKind};
use crate::rng::RngStream;
use crate::tensor::{matmul, matmul_nt, matmul_tn, sample_bernoulli, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::Identity => "identity",
        }
    }

    fn apply(self, pre: &Matrix) -> Matrix {
        match self {
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Relu => pre.map(|x| if x > 0.0 { x } else { 0.0 }),
            Activation::Identity => pre.clone(),
            Activation::Softmax => {
                let mut out = pre.clone();
                for r in 0..out.rows() {
                    softmax_in_place(out.row_mut(r));
                }
                out
            }
        }
    }

    /// `dJ/dν` given `dJ/da`, the pre-activations and the activations.
    fn backprop(self, grad_out: &Matrix, pre: &Matrix, act: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Sigmoid => grad_out.zip_map(act, "sigmoid'", |g, a| g * a * (1.0 - a)),
            Activation::Relu => grad_out.zip_map(pre, "relu'", |g, v| if v > 0.0 { g } else { 0.0 }),
            Activation::Identity => Ok(grad_out.clone()),
            Activation::Softmax => {
                let mut out = grad_out.clone();
                for r in 0..out.rows() {
                    let y = act.row(r);
                    let dot: f64 = grad_out.row(r).iter().zip(y).map(|(g, y)| g * y).sum();
                    for (o, &yi) in out.row_mut(r).iter_mut().zip(y) {
                        *o = yi * (*o - dot);
                    }
                }
                Ok(out)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            "softmax" => Ok(Activation::Softmax),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Categorical cross-entropy after softmax, or per-output binary
    /// cross-entropy after sigmoid.
    CrossEntropy,
    /// Mean over all entries of `(y - t)²`.
    Mse,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::CrossEntropy => "cross_entropy",
            Loss::Mse => "mse",
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cross_entropy" | "crossentropy" | "ce" => Ok(Loss::CrossEntropy),
            "mse" => Ok(Loss::Mse),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `k × d`: one row per output unit.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub regularizer: RegularizerConfig,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape {
                op: "Layer::new",
                left: weights.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self {
            weights,
            bias,
            activation,
            regularizer: RegularizerConfig::none(),
        })
    }

    /// Xavier/Glorot uniform initialization on `±sqrt(6 / (fan_in + fan_out))`
    /// with zero bias.
    pub fn xavier(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
        Self {
            weights: Matrix::from_vec(fan_out, fan_in, data).expect("positive fan sizes"),
            bias: vec![0.0; fan_out],
            activation,
            regularizer: RegularizerConfig::none(),
        }
    }

    pub fn with_regularizer(mut self, regularizer: RegularizerConfig) -> Self {
        self.regularizer = regularizer;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    loss: Loss,
}

impl Network {
    pub fn new(layers: Vec<Layer>, loss: Loss) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("a network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::Shape {
                    op: "Network::new",
                    left: pair[0].weights.shape(),
                    right: pair[1].weights.shape(),
                });
            }
            if pair[0].activation == Activation::Softmax {
                return Err(Error::config(format!("softmax is only allowed on the final layer (layer {i})")));
            }
        }
        for l in &layers {
            l.regularizer.validate()?;
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape {
                    op: "Network::new",
                    left: l.weights.shape(),
                    right: (1, l.bias.len()),
                });
            }
        }
        Ok(Self { layers, loss })
    }

    /// Xavier-initialized network over `sizes` (input first). `activations`
    /// has one entry per layer.
    pub fn xavier(sizes: &[usize], activations: &[Activation], loss: Loss, rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(Error::config(format!(
                "need one activation per layer: {} sizes, {} activations",
                sizes.len(),
                activations.len()
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::config("layer sizes must be positive"));
        }
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| Layer::xavier(w[0], w[1], act, rng))
            .collect();
        Self::new(layers, loss)
    }

    /// Sets the regularizer on every layer except the output layer.
    pub fn with_hidden_regularizer(mut self, cfg: RegularizerConfig) -> Result<Self> {
        cfg.validate()?;
        let n = self.layers.len();
        for l in &mut self.layers[..n - 1] {
            l.regularizer = cfg;
        }
        Ok(self)
    }

    pub fn set_regularizer(&mut self, layer: usize, cfg: RegularizerConfig) -> Result<()> {
        cfg.validate()?;
        let n = self.layers.len();
        self.layers
            .get_mut(layer)
            .ok_or_else(|| Error::config(format!("layer {layer} out of range for {n} layers")))?
            .regularizer = cfg;
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn loss_kind(&self) -> Loss {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Eval-mode outputs.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        let trace = forward_with_masks(self, inputs, &vec![LayerMask::None; self.layers.len()])?;
        Ok(trace.into_output())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Mask consumed by one layer in one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerMask {
    None,
    /// Per-example `{0,1}` input-unit mask (`n × d`), used by Dropout.
    Activation(Matrix),
    /// Weight-space mask shared by the whole batch.
    Weight(MaskSet),
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub mask: LayerMask,
    /// `a^{l-1}` as seen by the layer (after Dropout masking, if any).
    pub input: Matrix,
    /// `W̃^l`; `None` when the layer used its weights unchanged.
    pub perturbed_weights: Option<Matrix>,
    pub pre_activation: Matrix,
    pub activation: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        &self.layers[self.layers.len() - 1].activation
    }

    pub fn into_output(mut self) -> Matrix {
        self.layers.pop().expect("non-empty trace").activation
    }

    pub fn masks(&self) -> Vec<LayerMask> {
        self.layers.iter().map(|l| l.mask.clone()).collect()
    }

    pub fn batch_size(&self) -> usize {
        self.layers[0].input.rows()
    }
}

/// Draws one mask per regularized layer for a batch of `batch_rows` examples.
pub fn sample_layer_masks(net: &Network, batch_rows: usize, rng: &mut RngStream) -> Result<Vec<LayerMask>> {
    net.layers
        .iter()
        .map(|layer| {
            let cfg = &layer.regularizer;
            Ok(match cfg.kind {
                RegularizerKind::None => LayerMask::None,
                RegularizerKind::Dropout => LayerMask::Activation(sample_bernoulli(batch_rows, layer.input_dim(), cfg.p, rng)?),
                RegularizerKind::Shakeout | RegularizerKind::Bridgeout => {
                    let (k, d) = layer.weights.shape();
                    LayerMask::Weight(sample_mask(cfg, k, d, rng)?.expect("active regularizer"))
                }
            })
        })
        .collect()
}

/// Forward pass. Train mode draws fresh masks for every regularized layer;
/// eval mode uses the unperturbed weights.
pub fn forward(net: &Network, batch: &Matrix, mode: Mode, rng: &mut RngStream) -> Result<ForwardTrace> {
    let masks = match mode {
        Mode::Train => sample_layer_masks(net, batch.rows(), rng)?,
        Mode::Eval => vec![LayerMask::None; net.layers.len()],
    };
    forward_with_masks(net, batch, &masks)
}

/// Forward pass with caller-supplied masks, one per layer.
pub fn forward_with_masks(net: &Network, batch: &Matrix, masks: &[LayerMask]) -> Result<ForwardTrace> {
    if masks.len() != net.layers.len() {
        return Err(Error::contract(format!(
            "{} masks supplied for {} layers",
            masks.len(),
            net.layers.len()
        )));
    }
    let mut traces = Vec::with_capacity(net.layers.len());
    let mut current = batch.clone();
    for (layer, mask) in net.layers.iter().zip(masks) {
        if current.cols() != layer.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left: current.shape(),
                right: layer.weights.shape(),
            });
        }
        let (input, perturbed) = match mask {
            LayerMask::None => (current, None),
            LayerMask::Activation(m) => {
                if layer.regularizer.kind != RegularizerKind::Dropout {
                    return Err(Error::contract("activation mask supplied to a non-dropout layer"));
                }
                let p = layer.regularizer.p;
                (current.zip_map(m, "dropout mask", |a, m| a * m / p)?, None)
            }
            LayerMask::Weight(ms) => (current, Some(perturb(&layer.regularizer, &layer.weights, ms)?)),
        };
        let w = perturbed.as_ref().unwrap_or(&layer.weights);
        let mut pre = matmul_nt(&input, w)?;
        pre.add_row_broadcast(&layer.bias)?;
        let act = layer.activation.apply(&pre);
        current = act.clone();
        traces.push(LayerTrace {
            mask: mask.clone(),
            input,
            perturbed_weights: perturbed,
            pre_activation: pre,
            activation: act,
        });
    }
    Ok(ForwardTrace { layers: traces })
}

fn check_targets(net: &Network, trace: &ForwardTrace, targets: &Matrix) -> Result<()> {
    let out = trace.output();
    if out.shape() != targets.shape() {
        return Err(Error::Shape {
            op: "loss targets",
            left: out.shape(),
            right: targets.shape(),
        });
    }
    if net.loss == Loss::CrossEntropy {
        let act = net.layers[net.layers.len() - 1].activation;
        if !matches!(act, Activation::Softmax | Activation::Sigmoid) {
            return Err(Error::contract(format!(
                "cross-entropy needs probability outputs, final activation is {act}"
            )));
        }
        if targets.as_slice().iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::contract("cross-entropy targets must lie in [0, 1]"));
        }
        if act == Activation::Softmax {
            for r in 0..targets.rows() {
                let s: f64 = targets.row(r).iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::contract(format!("target row {r} sums to {s}, not 1")));
                }
            }
        }
    }
    Ok(())
}

/// Mean loss over the batch held in `trace`.
pub fn loss(net: &Network, trace: &ForwardTrace, targets: &Matrix) -> Result<f64> {
    check_targets(net, trace, targets)?;
    let last = &trace.layers[trace.layers.len() - 1];
    let n = targets.rows() as f64;
    let value = match net.loss {
        Loss::Mse => {
            let out = &last.activation;
            let sq: f64 = out.as_slice().iter().zip(targets.as_slice()).map(|(y, t)| (y - t) * (y - t)).sum();
            sq / out.len() as f64
        }
        Loss::CrossEntropy => {
            let pre = &last.pre_activation;
            let mut total = 0.0;
            match net.layers[net.layers.len() - 1].activation {
                Activation::Softmax => {
                    for r in 0..pre.rows() {
                        let lse = log_sum_exp(pre.row(r));
                        total += pre.row(r).iter().zip(targets.row(r)).map(|(v, t)| t * (lse - v)).sum::<f64>();
                    }
                }
                _ => {
                    total = pre
                        .as_slice()
                        .iter()
                        .zip(targets.as_slice())
                        .map(|(&v, &t)| softplus(v) - t * v)
                        .sum();
                }
            }
            total / n
        }
    };
    Ok(value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// `self += other * scale`.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y * scale;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y * scale;
            }
        }
    }
}

/// `∂J/∂ν` at the output layer.
fn output_delta(net: &Network, trace: &ForwardTrace, targets: &Matrix) -> Result<Matrix> {
    let last = &trace.layers[trace.layers.len() - 1];
    let act = net.layers[net.layers.len() - 1].activation;
    let out = &last.activation;
    match net.loss {
        Loss::CrossEntropy => {
            // fused softmax/sigmoid + cross-entropy
            let n = targets.rows() as f64;
            out.zip_map(targets, "output delta", |y, t| (y - t) / n)
        }
        Loss::Mse => {
            let scale = 2.0 / out.len() as f64;
            let grad_out = out.zip_map(targets, "output delta", |y, t| scale * (y - t))?;
            act.backprop(&grad_out, &last.pre_activation, out)
        }
    }
}

/// Backpropagation through the trace. Input-side chaining uses `W̃`; the
/// weight gradient is `(∂J/∂W̃) ⊙ ∂W̃/∂W` for weight-space regularizers.
pub fn backward(net: &Network, trace: &ForwardTrace, targets: &Matrix) -> Result<Gradients> {
    if trace.layers.len() != net.layers.len() {
        return Err(Error::contract("trace does not belong to this network"));
    }
    if targets.rows() != trace.batch_size() {
        return Err(Error::Shape {
            op: "backward",
            left: (trace.batch_size(), net.output_dim()),
            right: targets.shape(),
        });
    }
    check_targets(net, trace, targets)?;
    let mut delta = output_delta(net, trace, targets)?;
    let mut grads = Vec::with_capacity(net.layers.len());
    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let lt = &trace.layers[l];
        let d_perturbed = matmul_tn(&delta, &lt.input)?;
        let d_weights = match &lt.mask {
            LayerMask::Weight(ms) => d_perturbed.hadamard(&weight_grad_factor(&layer.regularizer, &layer.weights, ms)?)?,
            _ => d_perturbed,
        };
        let d_bias = delta.column_sums();
        grads.push(LayerGradient {
            weights: d_weights,
            bias: d_bias,
        });
        if l == 0 {
            break;
        }
        let w = lt.perturbed_weights.as_ref().unwrap_or(&layer.weights);
        let mut d_input = matmul(&delta, w)?;
        if let LayerMask::Activation(m) = &lt.mask {
            let p = layer.regularizer.p;
            d_input = d_input.zip_map(m, "dropout mask", |g, m| g * m / p)?;
        }
        let prev = &trace.layers[l - 1];
        delta = net.layers[l - 1]
            .activation
            .backprop(&d_input, &prev.pre_activation, &prev.activation)?;
    }
    grads.reverse();
    Ok(Gradients { layers: grads })
}

/// Central-difference gradient of the batch loss with every mask frozen.
pub fn finite_diff_grad(net: &Network, batch: &Matrix, targets: &Matrix, masks: &[LayerMask], h: f64) -> Result<Gradients> {
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |n: &Network| -> Result<f64> {
        let trace = forward_with_masks(n, batch, masks)?;
        loss(n, &trace, targets)
    };
    let mut work = net.clone();
    let mut out = Gradients::zeros_like(net);
    for l in 0..net.layers.len() {
        for i in 0..net.layers[l].weights.len() {
            let orig = net.layers[l].weights.as_slice()[i];
            work.layers[l].weights.as_mut_slice()[i] = orig + h;
            let plus = eval(&work)?;
            work.layers[l].weights.as_mut_slice()[i] = orig - h;
            let minus = eval(&work)?;
            work.layers[l].weights.as_mut_slice()[i] = orig;
            out.layers[l].weights.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
        }
        for i in 0..net.layers[l].bias.len() {
            let orig = net.layers[l].bias[i];
            work.layers[l].bias[i] = orig + h;
            let plus = eval(&work)?;
            work.layers[l].bias[i] = orig - h;
            let minus = eval(&work)?;
            work.layers[l].bias[i] = orig;
            out.layers[l].bias[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Signed and absolute mean of one layer's weight gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientSummary {
    pub mean: f64,
    pub mean_abs: f64,
}

pub fn avg_layer_gradient(grads: &Gradients, layer: usize) -> Result<GradientSummary> {
    let g = grads
        .layers
        .get(layer)
        .ok_or_else(|| Error::config(format!("layer {layer} out of range for {} layers", grads.layers.len())))?;
    let n = g.weights.len() as f64;
    let (sum, sum_abs) = g.weights.as_slice().iter().fold((0.0, 0.0), |(s, a), &x| (s + x, a + x.abs()));
    Ok(GradientSummary {
        mean: sum / n,
        mean_abs: sum_abs / n,
    })
}

/// Writes every layer's weight matrix as CSV: a `layer,<index>,<rows>,<cols>`
/// header line followed by the matrix rows.
pub fn export_weights_csv(net: &Network, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for (l, layer) in net.layers.iter().enumerate() {
            let (rows, cols) = layer.weights.shape();
            writeln!(w, "layer,{l},{rows},{cols}")?;
            for r in 0..rows {
                let line: Vec<String> = layer.weights.row(r).iter().map(|x| format!("{x:?}")).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads matrices written by [`export_weights_csv`].
pub fn import_weights_csv(path: &Path) -> Result<Vec<Matrix>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut out = Vec::new();
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    while let Some(header) = lines.next() {
        let header = header.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 4 || fields[0] != "layer" {
            return Err(bad(format!("expected layer header, got '{header}'")));
        }
        let rows: usize = fields[2].parse().map_err(|_| bad(format!("bad row count '{}'", fields[2])))?;
        let cols: usize = fields[3].parse().map_err(|_| bad(format!("bad column count '{}'", fields[3])))?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| bad("truncated matrix".into()))?
                .map_err(|e| Error::io(path, e))?;
            for v in line.split(',') {
                data.push(v.parse::<f64>().map_err(|_| bad(format!("bad value '{v}'")))?);
            }
        }
        out.push(Matrix::from_vec(rows, cols, data)?);
    }
    Ok(out)
}
