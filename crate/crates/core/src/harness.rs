//! Experiment harness: flat `key=value` configs, single trials, multi-seed
//! aggregation, grid sweeps, and the histogram and gradient-log exporters.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use crate::data::{
    gen_linear_regression, gen_sparse_logit, load_mnist_dir, normalize_and_split, sparse_logit_samples, Dataset, MnistRaw, Split,
    MNIST_VALIDATION_ROWS, SPARSE_LOGIT_DIM,
};
use crate::error::{Error, Result};
use crate::glm::{bridge_penalty_closed_form, dropout_ridge_penalty, mc_marginalized_regularizer, random_problem, Family, PenaltyReport};
use crate::network::{
    self, finite_diff_grad, forward_with_masks, sample_layer_masks, Activation, GradientSummary, LayerMask, Loss, Network,
};
use crate::optim::{train, AdamConfig, EpochMetrics, MaxNorm, MaxNormMode, OptimizerKind, TrainConfig, DEFAULT_MAX_NORM};
use crate::regularizer::{RegularizerConfig, RegularizerKind};
use crate::rng::{streams, RngStream};
use crate::tensor::Matrix;

/// Weights with magnitude below this count as near zero.
pub const NEAR_ZERO_THRESHOLD: f64 = 0.01;

const LINREG_FEATURES: usize = 100;
const LINREG_OUTPUTS: usize = 10;
const MNIST_PIXELS: usize = 784;
const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentKind {
    /// Sparse logistic regression on 20 binary predictors.
    Table1,
    /// Linear regression, 100 inputs to 10 outputs.
    SparsityHist,
    /// MNIST autoencoder with a regularized encoder.
    AutoencoderHist,
    /// MNIST subset classifier.
    MnistDnn,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Table1 => "table1",
            ExperimentKind::SparsityHist => "sparsity_hist",
            ExperimentKind::AutoencoderHist => "autoencoder_hist",
            ExperimentKind::MnistDnn => "mnist_dnn",
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, ExperimentKind::Table1 | ExperimentKind::MnistDnn)
    }

    pub fn uses_mnist(self) -> bool {
        matches!(self, ExperimentKind::AutoencoderHist | ExperimentKind::MnistDnn)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "table1" => Ok(ExperimentKind::Table1),
            "sparsity_hist" | "sparsity" => Ok(ExperimentKind::SparsityHist),
            "autoencoder_hist" | "autoencoder" => Ok(ExperimentKind::AutoencoderHist),
            "mnist_dnn" | "mnist" => Ok(ExperimentKind::MnistDnn),
            other => Err(Error::Config(format!("unknown experiment kind '{other}'"))),
        }
    }
}

/// Fully resolved description of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub regularizer: RegularizerConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub max_norm: Option<MaxNorm>,
    /// Hidden layer widths (MNIST kinds only).
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// MNIST training rows drawn from the 50000-row pool.
    pub subset_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise_sigma: f64,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub bins: usize,
    /// Shuffle test targets before evaluation. Used to show that sweep
    /// selection never reads test data.
    pub poison_test_labels: bool,
    pub jobs: usize,
    pub p_grid: Vec<f64>,
    pub q_grid: Vec<f64>,
    pub c_grid: Vec<f64>,
}

/// Keys read by the GLM check and accepted, unused, by experiment configs.
const GLM_ONLY_KEYS: [&str; 5] = ["glm_family", "glm_n", "glm_d", "glm_beta_scale", "mc_samples"];
/// Keys read by the gradient check and accepted, unused, by experiment configs.
const GRADCHECK_ONLY_KEYS: [&str; 3] = ["sizes", "fd_step", "batch_rows"];

pub const DEFAULT_P_GRID: [f64; 5] = [0.3, 0.4, 0.5, 0.6, 0.7];
pub const DEFAULT_Q_GRID: [f64; 7] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];
pub const DEFAULT_C_GRID: [f64; 4] = [0.05, 0.1, 0.3, 0.5];

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let base = Self {
            kind,
            regularizer: RegularizerConfig {
                kind: RegularizerKind::Bridgeout,
                p: 0.5,
                q: 1.0,
                c: 0.3,
                ..RegularizerConfig::none()
            },
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.001,
            epochs: 1,
            batch_size: None,
            max_norm: Some(MaxNorm::per_weight(DEFAULT_MAX_NORM)),
            hidden: Vec::new(),
            activation: Activation::Sigmoid,
            subset_size: 3000,
            n_train: 400,
            n_val: 1000,
            n_test: 3000,
            noise_sigma: 0.0,
            seeds: vec![1],
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs"),
            bins: 50,
            poison_test_labels: false,
            jobs: 1,
            p_grid: DEFAULT_P_GRID.to_vec(),
            q_grid: DEFAULT_Q_GRID.to_vec(),
            c_grid: DEFAULT_C_GRID.to_vec(),
        };
        match kind {
            ExperimentKind::Table1 => Self {
                epochs: 8000,
                seeds: (1..=20).collect(),
                ..base
            },
            ExperimentKind::SparsityHist => Self {
                regularizer: RegularizerConfig {
                    p: 0.8,
                    ..base.regularizer
                },
                learning_rate: 0.0005,
                epochs: 5000,
                n_val: 400,
                n_test: 400,
                ..base
            },
            ExperimentKind::AutoencoderHist => Self {
                optimizer: OptimizerKind::Adam(AdamConfig::default()),
                epochs: 20,
                batch_size: Some(64),
                hidden: vec![256],
                subset_size: 5000,
                ..base
            },
            ExperimentKind::MnistDnn => Self {
                optimizer: OptimizerKind::Adam(AdamConfig::default()),
                epochs: mnist_default_epochs(base.subset_size),
                batch_size: Some(64),
                hidden: vec![200, 200, 200],
                seeds: vec![1, 2, 3],
                ..base
            },
        }
    }

    /// Builds a config from ordered `key=value` pairs; later pairs win.
    /// Keys absent from the pairs keep the per-kind defaults.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let map: BTreeMap<&str, &str> = pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let kind = match map.get("kind") {
            Some(v) => v.parse()?,
            None => ExperimentKind::Table1,
        };
        let mut cfg = Self::defaults(kind);
        let mut adam = AdamConfig::default();
        let mut optimizer_name = match cfg.optimizer {
            OptimizerKind::Sgd => "sgd".to_string(),
            OptimizerKind::Adam(a) => {
                adam = a;
                "adam".to_string()
            }
        };
        let mut max_norm_mode = MaxNormMode::PerWeight;
        let mut max_norm_value = cfg.max_norm.map(|m| m.threshold);
        for (key, value) in pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())) {
            match key {
                "kind" => {}
                "regularizer" => cfg.regularizer.kind = value.parse()?,
                "p" => cfg.regularizer.p = parse_num(key, value)?,
                "q" => cfg.regularizer.q = parse_num(key, value)?,
                "c" => cfg.regularizer.c = parse_num(key, value)?,
                "unbiased_shakeout" => cfg.regularizer.unbiased_shakeout = parse_bool(key, value)?,
                "eps" => cfg.regularizer.eps = parse_num(key, value)?,
                "optimizer" => optimizer_name = value.to_ascii_lowercase(),
                "adam_beta1" => adam.beta1 = parse_num(key, value)?,
                "adam_beta2" => adam.beta2 = parse_num(key, value)?,
                "adam_eps" => adam.eps = parse_num(key, value)?,
                "lr" | "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => {
                    cfg.batch_size = match value {
                        "full" | "0" => None,
                        v => Some(parse_num(key, v)?),
                    }
                }
                "max_norm" => {
                    max_norm_value = match value {
                        "none" | "off" => None,
                        v => Some(parse_num(key, v)?),
                    }
                }
                "max_norm_mode" => {
                    max_norm_mode = match value {
                        "per_weight" | "weight" => MaxNormMode::PerWeight,
                        "row" | "row_norm" => MaxNormMode::RowNorm,
                        other => return Err(Error::Config(format!("unknown max_norm_mode '{other}'"))),
                    }
                }
                "hidden" => cfg.hidden = parse_list(key, value)?,
                "activation" => cfg.activation = value.parse()?,
                "subset_size" => cfg.subset_size = parse_num(key, value)?,
                "n_train" => cfg.n_train = parse_num(key, value)?,
                "n_val" => cfg.n_val = parse_num(key, value)?,
                "n_test" => cfg.n_test = parse_num(key, value)?,
                "noise_sigma" => cfg.noise_sigma = parse_num(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "seed" => cfg.seeds = vec![parse_num(key, value)?],
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "bins" => cfg.bins = parse_num(key, value)?,
                "poison_test_labels" => cfg.poison_test_labels = parse_bool(key, value)?,
                "jobs" => cfg.jobs = parse_num(key, value)?,
                "p_grid" => cfg.p_grid = parse_list(key, value)?,
                "q_grid" => cfg.q_grid = parse_list(key, value)?,
                "c_grid" => cfg.c_grid = parse_list(key, value)?,
                k if GLM_ONLY_KEYS.contains(&k) || GRADCHECK_ONLY_KEYS.contains(&k) => {}
                other => return Err(Error::Config(format!("unknown config key '{other}'"))),
            }
        }
        cfg.optimizer = match optimizer_name.as_str() {
            "sgd" | "gd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam(adam),
            other => return Err(Error::Config(format!("unknown optimizer '{other}'"))),
        };
        cfg.max_norm = max_norm_value.map(|threshold| MaxNorm {
            threshold,
            mode: max_norm_mode,
        });
        if kind == ExperimentKind::MnistDnn && !map.contains_key("epochs") {
            cfg.epochs = mnist_default_epochs(cfg.subset_size);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every setting as `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let r = &self.regularizer;
        let (optimizer, adam) = match self.optimizer {
            OptimizerKind::Sgd => ("sgd", AdamConfig::default()),
            OptimizerKind::Adam(a) => ("adam", a),
        };
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("kind", self.kind.name().into()),
            ("regularizer", r.kind.name().into()),
            ("p", r.p.to_string()),
            ("q", r.q.to_string()),
            ("c", r.c.to_string()),
            ("unbiased_shakeout", r.unbiased_shakeout.to_string()),
            ("eps", r.eps.to_string()),
            ("optimizer", optimizer.into()),
            ("adam_beta1", adam.beta1.to_string()),
            ("adam_beta2", adam.beta2.to_string()),
            ("adam_eps", adam.eps.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.map_or("full".into(), |b| b.to_string())),
            ("max_norm", self.max_norm.map_or("none".into(), |m| m.threshold.to_string())),
            (
                "max_norm_mode",
                match self.max_norm.map(|m| m.mode) {
                    Some(MaxNormMode::RowNorm) => "row".into(),
                    _ => "per_weight".into(),
                },
            ),
            ("hidden", self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")),
            ("activation", self.activation.name().into()),
            ("subset_size", self.subset_size.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_val", self.n_val.to_string()),
            ("n_test", self.n_test.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("bins", self.bins.to_string()),
            ("poison_test_labels", self.poison_test_labels.to_string()),
            ("jobs", self.jobs.to_string()),
            ("p_grid", join(&self.p_grid)),
            ("q_grid", join(&self.q_grid)),
            ("c_grid", join(&self.c_grid)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Settings that can change a trial's numbers, for the result echo.
    /// Output location, parallelism, the seed list and the sweep grids are
    /// left out so that a trial file depends only on what it computed.
    pub fn echo_pairs(&self) -> Vec<(String, String)> {
        const SKIP: [&str; 6] = ["out_dir", "jobs", "seeds", "p_grid", "q_grid", "c_grid"];
        self.to_pairs().into_iter().filter(|(k, _)| !SKIP.contains(&k.as_str())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        self.train_config(0).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("seeds must be distinct, got {:?}", self.seeds)));
        }
        if self.bins < 10 {
            return Err(Error::Config(format!("histograms need at least 10 bins, got {}", self.bins)));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.kind == ExperimentKind::AutoencoderHist && self.hidden.is_empty() {
            return Err(Error::Config("the autoencoder needs at least one hidden layer".into()));
        }
        if self.activation == Activation::Softmax {
            return Err(Error::Config("softmax is reserved for the output layer".into()));
        }
        let sizes = match self.kind {
            ExperimentKind::Table1 | ExperimentKind::SparsityHist => [self.n_train, self.n_val, self.n_test],
            _ => [self.subset_size, 1, 1],
        };
        if sizes.contains(&0) {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            learning_rate: self.learning_rate,
            max_norm: self.max_norm,
            batch_size: self.batch_size,
            epochs: self.epochs,
            shuffle_seed: seed,
            keep_gradient_snapshots: false,
        }
    }

    /// Layer widths, activations and loss for this kind.
    pub fn architecture(&self) -> (Vec<usize>, Vec<Activation>, Loss) {
        match self.kind {
            ExperimentKind::Table1 => (vec![SPARSE_LOGIT_DIM, 1], vec![Activation::Sigmoid], Loss::CrossEntropy),
            ExperimentKind::SparsityHist => (vec![LINREG_FEATURES, LINREG_OUTPUTS], vec![Activation::Identity], Loss::Mse),
            ExperimentKind::AutoencoderHist | ExperimentKind::MnistDnn => {
                let (out, out_act, loss) = if self.kind == ExperimentKind::MnistDnn {
                    (MNIST_CLASSES, Activation::Softmax, Loss::CrossEntropy)
                } else {
                    (MNIST_PIXELS, Activation::Sigmoid, Loss::Mse)
                };
                let mut sizes = vec![MNIST_PIXELS];
                sizes.extend(&self.hidden);
                sizes.push(out);
                let mut acts = vec![self.activation; self.hidden.len()];
                acts.push(out_act);
                (sizes, acts, loss)
            }
        }
    }

    pub fn with_regularizer(&self, regularizer: RegularizerConfig) -> Self {
        Self {
            regularizer,
            ..self.clone()
        }
    }
}

fn mnist_default_epochs(subset_size: usize) -> usize {
    if subset_size <= 8000 {
        30
    } else {
        15
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value '{value}' for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// Parses a flat config file: one `key = value` per line, `#` comments.
/// Dashes in keys are read as underscores.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", i + 1)))?;
        pairs.push((k.trim().replace('-', "_"), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config_text(&text)
}

/// One epoch of a trial's log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Percent misclassified; classification kinds only.
    pub val_error: Option<f64>,
    pub gradients: Vec<GradientSummary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    pub validation_loss: f64,
    pub validation_error: Option<f64>,
    pub test_loss: f64,
    /// Percent misclassified on the test split; classification kinds only.
    pub test_error: Option<f64>,
    /// Share of weights below [`NEAR_ZERO_THRESHOLD`], per layer.
    pub near_zero_fraction: Vec<f64>,
    pub wall_time_secs: f64,
    pub network: Network,
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "none".into(), |x| format!("{x:?}"))
}

impl TrialResult {
    /// Test error for classifiers, test loss otherwise.
    pub fn metric(&self) -> f64 {
        self.test_error.unwrap_or(self.test_loss)
    }

    /// Validation error for classifiers, validation loss otherwise.
    pub fn validation_metric(&self) -> f64 {
        self.validation_error.unwrap_or(self.validation_loss)
    }

    /// Deterministic text form. Wall time is excluded; see
    /// [`write_trial`] for where it goes.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let nz: Vec<String> = self.near_zero_fraction.iter().map(|f| format!("{f:?}")).collect();
        writeln!(s, "seed={}", self.seed).unwrap();
        writeln!(s, "test_error={}", opt_num(self.test_error)).unwrap();
        writeln!(s, "test_loss={:?}", self.test_loss).unwrap();
        writeln!(s, "validation_error={}", opt_num(self.validation_error)).unwrap();
        writeln!(s, "validation_loss={:?}", self.validation_loss).unwrap();
        writeln!(s, "near_zero_fraction={}", nz.join(",")).unwrap();
        s.push_str("[config]\n");
        for (k, v) in &self.config {
            writeln!(s, "{k}={v}").unwrap();
        }
        s.push_str("[epochs]\n");
        s.push_str(&self.epoch_csv());
        s.push_str("[gradients]\n");
        s.push_str(&self.gradient_csv());
        s
    }

    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_error\n");
        for e in &self.epochs {
            writeln!(s, "{},{:?},{:?},{}", e.epoch, e.train_loss, e.val_loss, opt_num(e.val_error)).unwrap();
        }
        s
    }

    pub fn gradient_csv(&self) -> String {
        let mut s = String::from("epoch,layer,mean_grad,mean_abs_grad\n");
        for e in &self.epochs {
            for (l, g) in e.gradients.iter().enumerate() {
                writeln!(s, "{},{},{:?},{:?}", e.epoch, l, g.mean, g.mean_abs).unwrap();
            }
        }
        s
    }
}

/// Training, validation and test splits for one trial.
#[derive(Clone, Debug)]
pub struct TrialData {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn mnist_raw(dir: &Path) -> Result<Arc<MnistRaw>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<MnistRaw>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(raw) = cache.lock().expect("mnist cache").get(dir) {
        return Ok(Arc::clone(raw));
    }
    let raw = Arc::new(load_mnist_dir(dir)?);
    cache.lock().expect("mnist cache").insert(dir.to_path_buf(), Arc::clone(&raw));
    Ok(raw)
}

fn regression_holdout(w: &Matrix, n: usize, noise_sigma: f64, split: Split, rng: &mut RngStream) -> Result<Dataset> {
    let d = w.rows();
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect())?;
    let mut y = x.matmul(w)?;
    if noise_sigma > 0.0 {
        y.as_mut_slice().iter_mut().for_each(|v| *v += noise_sigma * rng.standard_normal());
    }
    Dataset::new("linear_regression", split, x, y)
}

/// Builds the splits for `seed`. Validation and test draws come from their
/// own sub-streams, so changing one split's size leaves the others intact.
pub fn build_data(cfg: &ExperimentConfig, seed: u64) -> Result<TrialData> {
    let mut rng = RngStream::new(seed, streams::DATA);
    let mut data = match cfg.kind {
        ExperimentKind::Table1 => {
            let splits = gen_sparse_logit(cfg.n_train, cfg.n_test, &mut rng)?;
            let validation = sparse_logit_samples(cfg.n_val, Split::Validation, &mut rng.split(1))?;
            TrialData {
                train: splits.train,
                validation,
                test: splits.test,
            }
        }
        ExperimentKind::SparsityHist => {
            let (train, w) = gen_linear_regression(cfg.n_train, LINREG_FEATURES, LINREG_OUTPUTS, cfg.noise_sigma, &mut rng)?;
            TrialData {
                train,
                validation: regression_holdout(&w, cfg.n_val, cfg.noise_sigma, Split::Validation, &mut rng.split(1))?,
                test: regression_holdout(&w, cfg.n_test, cfg.noise_sigma, Split::Test, &mut rng.split(2))?,
            }
        }
        ExperimentKind::MnistDnn | ExperimentKind::AutoencoderHist => {
            let raw = mnist_raw(&cfg.data_dir)?;
            let splits = normalize_and_split(&raw, cfg.subset_size, MNIST_VALIDATION_ROWS, &mut rng)?;
            let validation = splits.validation.expect("mnist split has validation rows");
            let mut data = TrialData {
                train: splits.train,
                validation,
                test: splits.test,
            };
            if cfg.kind == ExperimentKind::AutoencoderHist {
                for ds in [&mut data.train, &mut data.validation, &mut data.test] {
                    ds.targets = ds.inputs.clone();
                }
            }
            data
        }
    };
    if cfg.poison_test_labels {
        let mut perm: Vec<usize> = (0..data.test.len()).collect();
        rng.split(99).shuffle(&mut perm);
        data.test.targets = data.test.targets.select_rows(&perm);
    }
    Ok(data)
}

/// Xavier-initialized network for `cfg`. A single-layer model has its only
/// layer regularized; deeper models regularize every layer but the output.
pub fn build_network(cfg: &ExperimentConfig, seed: u64) -> Result<Network> {
    let (sizes, acts, loss) = cfg.architecture();
    let net = Network::xavier(&sizes, &acts, loss, &mut RngStream::new(seed, streams::INIT))?;
    if net.layers().len() == 1 {
        let mut net = net;
        net.set_regularizer(0, cfg.regularizer)?;
        Ok(net)
    } else {
        net.with_hidden_regularizer(cfg.regularizer)
    }
}

/// Percent of rows whose predicted class differs from the target's. A
/// single output column is thresholded at 0.5; wider outputs use argmax.
pub fn classification_error(outputs: &Matrix, targets: &Matrix) -> f64 {
    let argmax = |r: &[f64]| {
        r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let wrong = (0..outputs.rows())
        .filter(|&i| {
            if outputs.cols() == 1 {
                (outputs[(i, 0)] > 0.5) != (targets[(i, 0)] > 0.5)
            } else {
                argmax(outputs.row(i)) != argmax(targets.row(i))
            }
        })
        .count();
    100.0 * wrong as f64 / outputs.rows() as f64
}

/// Eval-mode loss and, when `classify` is set, percent error.
pub fn evaluate(net: &Network, data: &Dataset, classify: bool) -> Result<(f64, Option<f64>)> {
    let masks = vec![LayerMask::None; net.layers().len()];
    let trace = forward_with_masks(net, &data.inputs, &masks)?;
    let loss = network::loss(net, &trace, &data.targets)?;
    let error = classify.then(|| classification_error(trace.output(), &data.targets));
    Ok((loss, error))
}

pub fn near_zero_fraction(w: &Matrix, threshold: f64) -> f64 {
    w.as_slice().iter().filter(|x| x.abs() < threshold).count() as f64 / w.len() as f64
}

/// Builds the data and network for `seed`, trains, and evaluates on the
/// validation set after every epoch and on the test set at the end.
pub fn run_trial(cfg: &ExperimentConfig, seed: u64) -> Result<TrialResult> {
    cfg.validate()?;
    let start = Instant::now();
    let data = build_data(cfg, seed)?;
    let mut net = build_network(cfg, seed)?;
    let classify = cfg.kind.is_classification();
    let mut records = Vec::with_capacity(cfg.epochs);
    {
        let validation = &data.validation;
        let mut on_epoch = |n: &Network, m: &EpochMetrics| -> Result<()> {
            let (val_loss, val_error) = evaluate(n, validation, classify)?;
            records.push(EpochRecord {
                epoch: m.epoch,
                train_loss: m.train_loss,
                val_loss,
                val_error,
                gradients: m.gradients.clone(),
            });
            Ok(())
        };
        let mut mask_rng = RngStream::new(seed, streams::MASKS);
        train(
            &mut net,
            &data.train.inputs,
            &data.train.targets,
            &cfg.train_config(seed),
            &mut mask_rng,
            &mut on_epoch,
        )?;
    }
    let (validation_loss, validation_error) = evaluate(&net, &data.validation, classify)?;
    let (test_loss, test_error) = evaluate(&net, &data.test, classify)?;
    let near_zero = net
        .layers()
        .iter()
        .map(|l| near_zero_fraction(&l.weights, NEAR_ZERO_THRESHOLD))
        .collect();
    Ok(TrialResult {
        seed,
        config: cfg.echo_pairs(),
        epochs: records,
        validation_loss,
        validation_error,
        test_loss,
        test_error,
        near_zero_fraction: near_zero,
        wall_time_secs: start.elapsed().as_secs_f64(),
        network: net,
    })
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let f = &f;
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot").expect("every slot filled"))
        .collect()
}

/// One trial per configured seed.
pub fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    parallel_map(&cfg.seeds, cfg.jobs, |&seed| run_trial(cfg, seed))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation over `√n`.
    pub stderr: f64,
    pub n: usize,
}

pub fn mean_stderr(values: &[f64]) -> Result<Aggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!("aggregation needs at least 2 results, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(Aggregate {
        mean,
        stderr: (var / n as f64).sqrt(),
        n,
    })
}

/// Mean and standard error of the trials' headline metric
/// ([`TrialResult::metric`]).
pub fn aggregate(results: &[TrialResult]) -> Result<Aggregate> {
    mean_stderr(&results.iter().map(TrialResult::metric).collect::<Vec<_>>())
}

/// Results for one regularizer across seeds.
#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub regularizer: RegularizerConfig,
    pub trials: Vec<TrialResult>,
}

impl MethodSummary {
    pub fn mean_metric(&self) -> f64 {
        self.trials.iter().map(TrialResult::metric).sum::<f64>() / self.trials.len() as f64
    }

    pub fn aggregate(&self) -> Result<Aggregate> {
        aggregate(&self.trials)
    }
}

/// Runs every regularizer in `methods` over the configured seeds.
pub fn compare_methods(cfg: &ExperimentConfig, methods: &[RegularizerConfig]) -> Result<Vec<MethodSummary>> {
    let jobs: Vec<(usize, u64)> = (0..methods.len()).flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    let mut results = parallel_map(&jobs, cfg.jobs, |&(m, seed)| run_trial(&cfg.with_regularizer(methods[m]), seed))?.into_iter();
    Ok(methods
        .iter()
        .map(|&regularizer| MethodSummary {
            regularizer,
            trials: results.by_ref().take(cfg.seeds.len()).collect(),
        })
        .collect())
}

/// Plain training, Dropout, Shakeout and Bridgeout with the config's
/// `p`, `c` and `q`.
pub fn table1_methods(cfg: &ExperimentConfig) -> Result<Vec<RegularizerConfig>> {
    let r = cfg.regularizer;
    Ok(vec![
        RegularizerConfig::none(),
        RegularizerConfig::dropout(r.p)?,
        RegularizerConfig::shakeout(r.p, r.c)?.with_unbiased_shakeout(r.unbiased_shakeout),
        RegularizerConfig::bridgeout(r.p, r.q)?,
    ])
}

/// Plain training, Dropout, and Bridgeout at q = 2, 1.5, 1, 0.5.
pub fn histogram_panel(p: f64) -> Result<Vec<RegularizerConfig>> {
    let mut v = vec![RegularizerConfig::none(), RegularizerConfig::dropout(p)?];
    for q in [2.0, 1.5, 1.0, 0.5] {
        v.push(RegularizerConfig::bridgeout(p, q)?);
    }
    Ok(v)
}

/// Grid for [`sweep`]: retention probabilities and, for Bridgeout or
/// Shakeout, the `q` or `c` values.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub kind: RegularizerKind,
    pub p: Vec<f64>,
    pub second: Vec<f64>,
}

impl SweepGrid {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let kind = cfg.regularizer.kind;
        let second = match kind {
            RegularizerKind::Bridgeout => cfg.q_grid.clone(),
            RegularizerKind::Shakeout => cfg.c_grid.clone(),
            RegularizerKind::Dropout => Vec::new(),
            RegularizerKind::None => return Err(Error::Config("nothing to sweep without a regularizer".into())),
        };
        let grid = Self {
            kind,
            p: cfg.p_grid.clone(),
            second,
        };
        if grid.p.is_empty() || (kind != RegularizerKind::Dropout && grid.second.is_empty()) {
            return Err(Error::Config("sweep grids must be nonempty".into()));
        }
        Ok(grid)
    }

    pub fn points(&self) -> Vec<(f64, Option<f64>)> {
        if self.second.is_empty() {
            self.p.iter().map(|&p| (p, None)).collect()
        } else {
            self.p
                .iter()
                .flat_map(|&p| self.second.iter().map(move |&s| (p, Some(s))))
                .collect()
        }
    }

    fn regularizer(&self, base: &RegularizerConfig, p: f64, second: Option<f64>) -> Result<RegularizerConfig> {
        let mut r = RegularizerConfig {
            kind: self.kind,
            p,
            ..*base
        };
        match self.kind {
            RegularizerKind::Bridgeout => r.q = second.unwrap_or(r.q),
            RegularizerKind::Shakeout => r.c = second.unwrap_or(r.c),
            _ => {}
        }
        r.validated()
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub p: f64,
    /// `q` for Bridgeout, `c` for Shakeout.
    pub second: Option<f64>,
    pub mean_validation: f64,
    pub trials: Vec<TrialResult>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub kind: RegularizerKind,
    pub points: Vec<SweepPoint>,
    pub best: usize,
}

impl SweepResult {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }

    pub fn to_csv(&self) -> String {
        let second = match self.kind {
            RegularizerKind::Shakeout => "c",
            _ => "q",
        };
        let mut s = format!("p,{second},mean_validation,mean_test\n");
        for pt in &self.points {
            let mean_test = pt.trials.iter().map(TrialResult::metric).sum::<f64>() / pt.trials.len() as f64;
            writeln!(
                s,
                "{},{},{:?},{:?}",
                pt.p,
                pt.second.map_or(String::new(), |v| v.to_string()),
                pt.mean_validation,
                mean_test
            )
            .unwrap();
        }
        s
    }
}

/// Lowest mean validation metric wins; ties go to the larger `p`, then
/// the larger second coordinate.
pub fn select_best(points: &[(f64, Option<f64>, f64)]) -> Option<usize> {
    let rank = |a: &(f64, Option<f64>, f64), b: &(f64, Option<f64>, f64)| {
        a.2.total_cmp(&b.2)
            .then_with(|| b.0.total_cmp(&a.0))
            .then_with(|| b.1.unwrap_or(0.0).total_cmp(&a.1.unwrap_or(0.0)))
    };
    (0..points.len()).min_by(|&i, &j| match rank(&points[i], &points[j]) {
        Ordering::Equal => i.cmp(&j),
        o => o,
    })
}

/// Trains every grid point over the configured seeds and picks the point
/// with the lowest mean validation metric. Test results are recorded for
/// reporting only.
pub fn sweep(cfg: &ExperimentConfig, grid: &SweepGrid) -> Result<SweepResult> {
    let points = grid.points();
    let configs = points
        .iter()
        .map(|&(p, s)| Ok(cfg.with_regularizer(grid.regularizer(&cfg.regularizer, p, s)?)))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let mut results = parallel_map(&jobs, cfg.jobs, |&(i, seed)| run_trial(&configs[i], seed))?.into_iter();
    let points: Vec<SweepPoint> = points
        .iter()
        .map(|&(p, second)| {
            let trials: Vec<TrialResult> = results.by_ref().take(cfg.seeds.len()).collect();
            let mean_validation = trials.iter().map(TrialResult::validation_metric).sum::<f64>() / trials.len() as f64;
            SweepPoint {
                p,
                second,
                mean_validation,
                trials,
            }
        })
        .collect();
    let keys: Vec<_> = points.iter().map(|pt| (pt.p, pt.second, pt.mean_validation)).collect();
    let best = select_best(&keys).expect("nonempty grid");
    Ok(SweepResult {
        kind: grid.kind,
        points,
        best,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub layer: usize,
    pub centers: Vec<f64>,
    /// Bin counts over the total; sums to 1.
    pub density: Vec<f64>,
    pub near_zero_fraction: f64,
}

/// Normalized histogram over `[-max|w|, max|w|]`. All-zero weights fall in
/// the bin holding zero of a unit-width range.
pub fn weight_histogram(layer: usize, w: &Matrix, bins: usize) -> Result<Histogram> {
    if bins < 10 {
        return Err(Error::Config(format!("histograms need at least 10 bins, got {bins}")));
    }
    let m = match w.max_abs() {
        m if m > 0.0 => m,
        _ => 1.0,
    };
    let width = 2.0 * m / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in w.as_slice() {
        let i = (((x + m) / width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    let total = w.len() as f64;
    Ok(Histogram {
        layer,
        centers: (0..bins).map(|i| -m + (i as f64 + 0.5) * width).collect(),
        density: counts.iter().map(|&c| c as f64 / total).collect(),
        near_zero_fraction: near_zero_fraction(w, NEAR_ZERO_THRESHOLD),
    })
}

/// Sibling path for the near-zero summary: `hist.csv` → `hist_near_zero.csv`.
pub fn near_zero_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_near_zero.csv"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `layer,bin_center,density` rows to `path` and the per-layer
/// near-zero fractions to [`near_zero_path`].
pub fn export_weight_histogram(net: &Network, bins: usize, path: &Path) -> Result<Vec<Histogram>> {
    let hists = net
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| weight_histogram(l, &layer.weights, bins))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("layer,bin_center,density\n");
    let mut nz = String::from("layer,threshold,near_zero_fraction\n");
    for h in &hists {
        for (c, d) in h.centers.iter().zip(&h.density) {
            writeln!(csv, "{},{:?},{:?}", h.layer, c, d).unwrap();
        }
        writeln!(nz, "{},{},{:?}", h.layer, NEAR_ZERO_THRESHOLD, h.near_zero_fraction).unwrap();
    }
    write_file(path, &csv)?;
    write_file(&near_zero_path(path), &nz)?;
    Ok(hists)
}

/// Writes `epoch,layer,mean_grad,mean_abs_grad` rows.
pub fn export_gradient_log(trial: &TrialResult, path: &Path) -> Result<()> {
    write_file(path, &trial.gradient_csv())
}

/// Writes `result.txt`, `epochs.csv`, `gradients.csv` and `weights.csv`
/// under `dir`, plus the wall time in `timing.txt`.
pub fn write_trial(trial: &TrialResult, dir: &Path) -> Result<()> {
    write_file(&dir.join("result.txt"), &trial.to_text())?;
    write_file(&dir.join("epochs.csv"), &trial.epoch_csv())?;
    export_gradient_log(trial, &dir.join("gradients.csv"))?;
    network::export_weights_csv(&trial.network, &dir.join("weights.csv"))?;
    write_file(&dir.join("timing.txt"), &format!("wall_time_secs={:.3}\n", trial.wall_time_secs))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}

/// Settings for the GLM penalty check.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmCheckConfig {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    pub beta_scale: f64,
    pub p: f64,
    pub q: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for GlmCheckConfig {
    fn default() -> Self {
        Self {
            family: Family::Logistic,
            n: 50,
            d: 5,
            beta_scale: 0.1,
            p: 0.5,
            q: 1.0,
            samples: 20_000,
            seed: 1,
        }
    }
}

impl GlmCheckConfig {
    /// Reads the `glm_*`, `mc_samples`, `p`, `q` and `seed` keys and
    /// ignores the rest.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            match k.as_str() {
                "glm_family" => cfg.family = v.parse()?,
                "glm_n" => cfg.n = parse_num(k, v)?,
                "glm_d" => cfg.d = parse_num(k, v)?,
                "glm_beta_scale" => cfg.beta_scale = parse_num(k, v)?,
                "mc_samples" => cfg.samples = parse_num(k, v)?,
                "p" => cfg.p = parse_num(k, v)?,
                "q" => cfg.q = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                _ => {}
            }
        }
        if cfg.n == 0 || cfg.d == 0 {
            return Err(Error::Config("glm problem dimensions must be positive".into()));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmCheckReport {
    pub report: PenaltyReport,
    /// Closed form at `q = 2` and the Dropout ridge penalty, same problem.
    pub closed_form_q2: f64,
    pub ridge: f64,
}

pub fn run_glm_check(cfg: &GlmCheckConfig) -> Result<GlmCheckReport> {
    let prob = random_problem(
        cfg.n,
        cfg.d,
        cfg.family,
        cfg.beta_scale,
        &mut RngStream::new(cfg.seed, streams::DATA),
    )?;
    let mut mc_rng = RngStream::new(cfg.seed, streams::MONTE_CARLO);
    let report = mc_marginalized_regularizer(&prob, cfg.p, cfg.q, cfg.samples, &mut mc_rng)?;
    Ok(GlmCheckReport {
        report,
        closed_form_q2: bridge_penalty_closed_form(&prob, cfg.p, 2.0)?.value,
        ridge: dropout_ridge_penalty(&prob, cfg.p)?,
    })
}

/// Settings for the analytic-vs-numerical gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub regularizer: RegularizerConfig,
    pub batch_rows: usize,
    pub fd_step: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self {
            sizes: vec![5, 4, 3],
            activation: Activation::Sigmoid,
            regularizer: RegularizerConfig {
                p: 0.5,
                q: 1.5,
                c: 0.3,
                ..RegularizerConfig::none()
            },
            batch_rows: 4,
            fd_step: 1e-5,
            seed: 1,
        };
        for (k, v) in pairs {
            match k.as_str() {
                "sizes" => cfg.sizes = parse_list(k, v)?,
                "activation" => cfg.activation = v.parse()?,
                "regularizer" => cfg.regularizer.kind = v.parse()?,
                "p" => cfg.regularizer.p = parse_num(k, v)?,
                "q" => cfg.regularizer.q = parse_num(k, v)?,
                "c" => cfg.regularizer.c = parse_num(k, v)?,
                "batch_rows" => cfg.batch_rows = parse_num(k, v)?,
                "fd_step" => cfg.fd_step = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                _ => {}
            }
        }
        cfg.regularizer.validate()?;
        if cfg.sizes.len() < 2 || cfg.sizes.contains(&0) || cfg.batch_rows == 0 || !(cfg.fd_step > 0.0) {
            return Err(Error::Config(
                "gradcheck needs >= 2 positive sizes, batch_rows > 0 and fd_step > 0".into(),
            ));
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Relative error with a floor on the denominator so that two tiny values
/// compare by absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random MSE network with random biases and fixed masks; compares backprop against central
/// differences. Bridgeout weights below 1e-3 in magnitude are skipped when
/// `q < 2`, where the perturbation is not smooth at the scale of the step.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(cfg.seed, streams::INIT);
    let layers = cfg.sizes.len() - 1;
    let acts = vec![cfg.activation; layers];
    let mut net = Network::xavier(&cfg.sizes, &acts, Loss::Mse, &mut rng)?;
    for l in 0..layers {
        net.set_regularizer(l, cfg.regularizer)?;
        // nonzero biases keep ReLU pre-activations off the kink when a
        // whole input row is dropped
        for b in &mut net.layers_mut()[l].bias {
            *b = rng.uniform_range(-0.5, 0.5);
        }
    }
    let d = cfg.sizes[0];
    let k = cfg.sizes[layers];
    let x = Matrix::from_vec(cfg.batch_rows, d, (0..cfg.batch_rows * d).map(|_| rng.standard_normal()).collect())?;
    let t = Matrix::from_vec(cfg.batch_rows, k, (0..cfg.batch_rows * k).map(|_| rng.uniform()).collect())?;
    let masks = sample_layer_masks(&net, cfg.batch_rows, &mut RngStream::new(cfg.seed, streams::MASKS))?;
    let trace = forward_with_masks(&net, &x, &masks)?;
    let analytic = network::backward(&net, &trace, &t)?;
    let numeric = finite_diff_grad(&net, &x, &t, &masks, cfg.fd_step)?;
    let skip_small = cfg.regularizer.kind == RegularizerKind::Bridgeout && cfg.regularizer.q < 2.0;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (l, layer) in net.layers().iter().enumerate() {
        let (a, n) = (&analytic.layers[l], &numeric.layers[l]);
        for ((&w, &ga), &gn) in layer.weights.as_slice().iter().zip(a.weights.as_slice()).zip(n.weights.as_slice()) {
            if skip_small && w.abs() < 1e-3 {
                report.skipped += 1;
                continue;
            }
            report.max_rel_error = report.max_rel_error.max(relative_error(ga, gn));
            report.checked += 1;
        }
        for (&ga, &gn) in a.bias.iter().zip(&n.bias) {
            report.max_rel_error = report.max_rel_error.max(relative_error(ga, gn));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn tiny_regression() -> ExperimentConfig {
        ExperimentConfig::from_pairs(&pairs(&[
            ("kind", "sparsity_hist"),
            ("n_train", "40"),
            ("n_val", "20"),
            ("n_test", "20"),
            ("epochs", "5"),
            ("lr", "0.01"),
        ]))
        .unwrap()
    }

    #[test]
    fn config_pairs_round_trip() {
        for kind in [ExperimentKind::Table1, ExperimentKind::SparsityHist, ExperimentKind::MnistDnn] {
            let cfg = ExperimentConfig::defaults(kind);
            assert_eq!(ExperimentConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
        }
    }

    #[test]
    fn later_pairs_override_earlier_ones() {
        let cfg = ExperimentConfig::from_pairs(&pairs(&[("kind", "table1"), ("epochs", "10"), ("seed", "4"), ("epochs", "3")])).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seeds, vec![4]);
        let cfg = ExperimentConfig::from_pairs(&pairs(&[("seeds", "1,2"), ("seed", "9")])).unwrap();
        assert_eq!(cfg.seeds, vec![9]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_pairs(&pairs(&[("learning_rat", "0.1")])).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(ExperimentConfig::from_pairs(&pairs(&[("mc_samples", "100")])).is_ok());
    }

    #[test]
    fn config_text_skips_comments_and_normalizes_dashes() {
        let parsed = parse_config_text("# comment\nkind = sparsity\n\nbatch-size=full\n").unwrap();
        assert_eq!(parsed, pairs(&[("kind", "sparsity"), ("batch_size", "full")]));
        assert!(parse_config_text("no equals sign").is_err());
    }

    #[test]
    fn aggregate_examples() {
        let a = mean_stderr(&[1.0, 3.0]).unwrap();
        assert_eq!((a.mean, a.stderr, a.n), (2.0, 1.0, 2));
        let a = mean_stderr(&[0.7; 5]).unwrap();
        assert!((a.mean - 0.7).abs() < 1e-15);
        assert_eq!(a.stderr, 0.0);
        assert!(mean_stderr(&[1.0]).is_err());
        assert!(mean_stderr(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_matches_two_pass_formula(values in prop::collection::vec(-100.0f64..100.0, 2..40)) {
            let a = mean_stderr(&values).unwrap();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let mut ss = 0.0;
            for v in &values {
                ss += (v - mean).powi(2);
            }
            let se = (ss / (n - 1.0) / n).sqrt();
            prop_assert!((a.mean - mean).abs() < 1e-9);
            prop_assert!((a.stderr - se).abs() < 1e-9);
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a.mean >= lo - 1e-9 && a.mean <= hi + 1e-9);
        }

        #[test]
        fn selection_ignores_enumeration_order(
            vals in prop::collection::vec(0u8..4, 1..12),
            seed in any::<u64>(),
        ) {
            let points: Vec<(f64, Option<f64>, f64)> = vals
                .iter()
                .enumerate()
                .map(|(i, &v)| (0.1 * (1 + i % 5) as f64, Some(0.5 * (1 + i / 5) as f64), v as f64))
                .collect();
            let best = points[select_best(&points).unwrap()];
            let mut shuffled = points.clone();
            RngStream::new(seed, 0).shuffle(&mut shuffled);
            let again = shuffled[select_best(&shuffled).unwrap()];
            prop_assert_eq!(best, again);
        }

        #[test]
        fn histogram_density_sums_to_one(
            data in prop::collection::vec(-5.0f64..5.0, 1..200),
            bins in 10usize..80,
        ) {
            let w = Matrix::from_vec(1, data.len(), data).unwrap();
            let h = weight_histogram(0, &w, bins).unwrap();
            prop_assert_eq!(h.density.len(), bins);
            prop_assert!((h.density.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn select_best_single_point_and_ties() {
        assert_eq!(select_best(&[]), None);
        assert_eq!(select_best(&[(0.5, Some(1.0), 3.0)]), Some(0));
        let pts = [
            (0.3, Some(1.0), 1.0),
            (0.5, Some(0.5), 1.0),
            (0.5, Some(2.0), 1.0),
            (0.7, Some(1.0), 2.0),
        ];
        assert_eq!(select_best(&pts), Some(2));
        assert_eq!(select_best(&[(0.4, None, 0.2), (0.6, None, 0.3)]), Some(0));
    }

    #[test]
    fn all_zero_weights_histogram() {
        let h = weight_histogram(3, &Matrix::zeros(4, 5), 10).unwrap();
        assert_eq!(h.density.iter().filter(|&&d| d > 0.0).count(), 1);
        assert_eq!(h.near_zero_fraction, 1.0);
        assert_eq!(h.layer, 3);
        assert!(weight_histogram(0, &Matrix::zeros(2, 2), 9).is_err());
    }

    #[test]
    fn near_zero_summary_path() {
        assert_eq!(near_zero_path(Path::new("out/hist.csv")), PathBuf::from("out/hist_near_zero.csv"));
    }

    #[test]
    fn gradient_log_has_one_row_per_epoch_and_layer() {
        let trial = run_trial(&tiny_regression(), 3).unwrap();
        let csv = trial.gradient_csv();
        let layers = trial.network.layers().len();
        assert_eq!(csv.lines().count(), 1 + 5 * layers);
        let empty = TrialResult {
            epochs: Vec::new(),
            ..trial
        };
        assert_eq!(empty.gradient_csv(), "epoch,layer,mean_grad,mean_abs_grad\n");
    }

    #[test]
    fn zero_epochs_evaluates_the_initial_network() {
        let cfg = ExperimentConfig {
            epochs: 0,
            ..tiny_regression()
        };
        let trial = run_trial(&cfg, 5).unwrap();
        let data = build_data(&cfg, 5).unwrap();
        let net = build_network(&cfg, 5).unwrap();
        let (loss, _) = evaluate(&net, &data.test, false).unwrap();
        assert!(trial.epochs.is_empty());
        assert_eq!(trial.test_loss, loss);
        assert_eq!(trial.network, net);
    }

    #[test]
    fn trials_are_deterministic() {
        let cfg = tiny_regression();
        let a = run_trial(&cfg, 11).unwrap();
        let b = run_trial(&cfg, 11).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_ne!(a.to_text(), run_trial(&cfg, 12).unwrap().to_text());
    }

    #[test]
    fn parallel_seeds_match_serial() {
        let cfg = ExperimentConfig {
            seeds: vec![1, 2, 3],
            ..tiny_regression()
        };
        let serial = run_seeds(&cfg).unwrap();
        let parallel = run_seeds(&ExperimentConfig { jobs: 3, ..cfg }).unwrap();
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.to_text(), b.to_text());
        }
    }

    #[test]
    fn poisoned_test_labels_leave_selection_unchanged() {
        let cfg = ExperimentConfig {
            p_grid: vec![0.5, 0.8],
            q_grid: vec![1.0, 2.0],
            ..tiny_regression()
        };
        let grid = SweepGrid::from_config(&cfg).unwrap();
        let clean = sweep(&cfg, &grid).unwrap();
        let poisoned = sweep(
            &ExperimentConfig {
                poison_test_labels: true,
                ..cfg
            },
            &grid,
        )
        .unwrap();
        assert_eq!(clean.best, poisoned.best);
        let (a, b) = (&clean.points[0].trials[0], &poisoned.points[0].trials[0]);
        assert_eq!(a.validation_loss, b.validation_loss);
        assert_ne!(a.test_loss, b.test_loss);
    }

    #[test]
    fn sweep_needs_a_regularizer() {
        let cfg = tiny_regression().with_regularizer(RegularizerConfig::none());
        assert!(SweepGrid::from_config(&cfg).is_err());
    }

    #[test]
    fn classification_error_threshold_and_argmax() {
        let out = Matrix::from_rows(&[vec![0.6], vec![0.4], vec![0.9]]).unwrap();
        let tgt = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![0.0]]).unwrap();
        assert!((classification_error(&out, &tgt) - 200.0 / 3.0).abs() < 1e-12);
        let out = Matrix::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.5, 0.3, 0.2]]).unwrap();
        let tgt = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(classification_error(&out, &tgt), 50.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 0.0), 1e-3);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }
}
