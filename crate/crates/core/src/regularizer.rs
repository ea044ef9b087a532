//! Weight-perturbation regularizers: Dropout, Shakeout and Bridgeout.
//!
//! Each regularizer replaces a weight matrix `W` (shape `k × d`, outputs by
//! inputs) with a random `W̃` during training. Dropout and Shakeout draw one
//! Bernoulli value per input unit (column); Bridgeout draws one per weight.
//! All masks here are raw `{0, 1}` draws; the `1/p` scaling lives in the
//! perturbation rules.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{abs_pow, check_probability, sample_bernoulli, sgn, Matrix, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegularizerKind {
    None,
    Dropout,
    Shakeout,
    Bridgeout,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::None => "none",
            RegularizerKind::Dropout => "dropout",
            RegularizerKind::Shakeout => "shakeout",
            RegularizerKind::Bridgeout => "bridgeout",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "backprop" | "gd" => Ok(RegularizerKind::None),
            "dropout" => Ok(RegularizerKind::Dropout),
            "shakeout" => Ok(RegularizerKind::Shakeout),
            "bridgeout" => Ok(RegularizerKind::Bridgeout),
            other => Err(Error::config(format!("unknown regularizer '{other}'"))),
        }
    }
}

/// Regularizer choice plus its hyperparameters.
///
/// `p` is the retention probability, `q` the Bridgeout norm power and `c`
/// the Shakeout L1 strength. Fields that a kind does not use are ignored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    pub p: f64,
    pub q: f64,
    pub c: f64,
    pub unbiased_shakeout: bool,
    pub eps: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            p: 1.0,
            q: 2.0,
            c: 0.0,
            unbiased_shakeout: false,
            eps: DEFAULT_EPS,
        }
    }

    pub fn dropout(p: f64) -> Result<Self> {
        Self {
            kind: RegularizerKind::Dropout,
            p,
            ..Self::none()
        }
        .validated()
    }

    pub fn shakeout(p: f64, c: f64) -> Result<Self> {
        Self {
            kind: RegularizerKind::Shakeout,
            p,
            c,
            ..Self::none()
        }
        .validated()
    }

    pub fn bridgeout(p: f64, q: f64) -> Result<Self> {
        Self {
            kind: RegularizerKind::Bridgeout,
            p,
            q,
            ..Self::none()
        }
        .validated()
    }

    pub fn with_unbiased_shakeout(mut self, unbiased: bool) -> Self {
        self.unbiased_shakeout = unbiased;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        self.eps = eps;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        match self.kind {
            RegularizerKind::None => Ok(()),
            RegularizerKind::Dropout => check_probability(self.p),
            RegularizerKind::Shakeout => {
                check_open_probability(self.p)?;
                if !(self.c >= 0.0) || !self.c.is_finite() {
                    return Err(Error::config(format!("shakeout c must be >= 0, got {}", self.c)));
                }
                Ok(())
            }
            RegularizerKind::Bridgeout => {
                check_probability(self.p)?;
                if !(self.q > 0.0) || !self.q.is_finite() {
                    return Err(Error::config(format!("bridgeout q must be > 0, got {}", self.q)));
                }
                Ok(())
            }
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != RegularizerKind::None
    }

    /// Short human-readable label, e.g. `bridgeout(p=0.5,q=1)`.
    pub fn label(&self) -> String {
        match self.kind {
            RegularizerKind::None => "none".into(),
            RegularizerKind::Dropout => format!("dropout(p={})", self.p),
            RegularizerKind::Shakeout => format!("shakeout(p={},c={})", self.p, self.c),
            RegularizerKind::Bridgeout => format!("bridgeout(p={},q={})", self.p, self.q),
        }
    }
}

fn check_open_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("probability must lie in (0, 1), got {p}")))
    }
}

/// Mask drawn for one layer and one minibatch.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSet {
    /// One `{0,1}` value per input unit (column of `W`).
    Unit(Vec<f64>),
    /// One `{0,1}` value per weight, shaped like `W`.
    Weight(Matrix),
}

impl MaskSet {
    pub fn unit(&self) -> Option<&[f64]> {
        match self {
            MaskSet::Unit(m) => Some(m),
            MaskSet::Weight(_) => None,
        }
    }

    pub fn weight(&self) -> Option<&Matrix> {
        match self {
            MaskSet::Weight(m) => Some(m),
            MaskSet::Unit(_) => None,
        }
    }
}

/// Draws the weight-space mask for a `rows × cols` weight matrix, or `None`
/// when the regularizer does not perturb weights.
pub fn sample_mask(cfg: &RegularizerConfig, rows: usize, cols: usize, rng: &mut RngStream) -> Result<Option<MaskSet>> {
    cfg.validate()?;
    Ok(match cfg.kind {
        RegularizerKind::None => None,
        RegularizerKind::Dropout | RegularizerKind::Shakeout => {
            let m = sample_bernoulli(1, cols, cfg.p, rng)?;
            Some(MaskSet::Unit(m.into_vec()))
        }
        RegularizerKind::Bridgeout => Some(MaskSet::Weight(sample_bernoulli(rows, cols, cfg.p, rng)?)),
    })
}

fn check_unit_mask(w: &Matrix, unit_mask: &[f64], op: &'static str) -> Result<()> {
    if unit_mask.len() != w.cols() {
        return Err(Error::Shape {
            op,
            left: w.shape(),
            right: (1, unit_mask.len()),
        });
    }
    Ok(())
}

fn check_weight_mask(w: &Matrix, mask: &Matrix, op: &'static str) -> Result<()> {
    if mask.shape() != w.shape() {
        return Err(Error::Shape {
            op,
            left: w.shape(),
            right: mask.shape(),
        });
    }
    Ok(())
}

/// Column `j` becomes zero when `m_j = 0` and `W[:, j] / p` otherwise.
pub fn perturb_dropout(w: &Matrix, unit_mask: &[f64], p: f64) -> Result<Matrix> {
    check_unit_mask(w, unit_mask, "perturb_dropout")?;
    check_probability(p)?;
    let mut out = w.clone();
    for r in 0..w.rows() {
        for (x, &m) in out.row_mut(r).iter_mut().zip(unit_mask) {
            *x = if m == 0.0 { 0.0 } else { *x / p };
        }
    }
    Ok(out)
}

/// Shakeout: `-c·sgn(w)` on dropped columns; `w/p + c·k·sgn(w)` on kept
/// ones, with `k = 1/(1-p)` as usually printed or `k = (1-p)/p` for the
/// zero-mean variant.
pub fn perturb_shakeout(w: &Matrix, unit_mask: &[f64], p: f64, c: f64, unbiased: bool) -> Result<Matrix> {
    check_unit_mask(w, unit_mask, "perturb_shakeout")?;
    check_open_probability(p)?;
    if !(c >= 0.0) {
        return Err(Error::config(format!("shakeout c must be >= 0, got {c}")));
    }
    let kept_gain = shakeout_kept_gain(p, unbiased);
    let mut out = w.clone();
    for r in 0..w.rows() {
        for (x, &m) in out.row_mut(r).iter_mut().zip(unit_mask) {
            let s = sgn(*x);
            *x = if m == 0.0 { -c * s } else { *x / p + c * kept_gain * s };
        }
    }
    Ok(out)
}

fn shakeout_kept_gain(p: f64, unbiased: bool) -> f64 {
    if unbiased {
        (1.0 - p) / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Bridgeout: `w - |w|^(q/2)` where `M = 0`, `w + |w|^(q/2)·(1-p)/p` where
/// `M = 1`. Equivalently `w + |w|^(q/2)·(M/p - 1)`.
pub fn perturb_bridgeout(w: &Matrix, weight_mask: &Matrix, p: f64, q: f64) -> Result<Matrix> {
    check_weight_mask(w, weight_mask, "perturb_bridgeout")?;
    check_probability(p)?;
    let half_q = q / 2.0;
    w.zip_map(weight_mask, "perturb_bridgeout", |x, m| {
        x + abs_pow(x, half_q, DEFAULT_EPS) * (m / p - 1.0)
    })
}

/// `∂W̃/∂W` for Bridgeout with the mask held fixed:
/// `1 + (q/2)·max(|w|, eps)^(q/2 - 1)·(M/p - 1)·sgn(w)`.
pub fn bridgeout_weight_grad_factor(w: &Matrix, weight_mask: &Matrix, p: f64, q: f64, eps: f64) -> Result<Matrix> {
    check_weight_mask(w, weight_mask, "bridgeout_weight_grad_factor")?;
    check_probability(p)?;
    let half_q = q / 2.0;
    w.zip_map(weight_mask, "bridgeout_weight_grad_factor", |x, m| {
        1.0 + half_q * abs_pow(x, half_q - 1.0, eps) * (m / p - 1.0) * sgn(x)
    })
}

/// `∂W̃/∂W` for the column-masked rules: `1/p` on kept columns, `0` on
/// dropped ones. `sgn(w)` is treated as locally constant.
pub fn unit_mask_grad_factor(w: &Matrix, unit_mask: &[f64], p: f64) -> Result<Matrix> {
    check_unit_mask(w, unit_mask, "unit_mask_grad_factor")?;
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for r in 0..w.rows() {
        for (x, &m) in out.row_mut(r).iter_mut().zip(unit_mask) {
            *x = if m == 0.0 { 0.0 } else { 1.0 / p };
        }
    }
    Ok(out)
}

/// Applies the configured perturbation with an already drawn mask.
pub fn perturb(cfg: &RegularizerConfig, w: &Matrix, mask: &MaskSet) -> Result<Matrix> {
    match (cfg.kind, mask) {
        (RegularizerKind::Dropout, MaskSet::Unit(m)) => perturb_dropout(w, m, cfg.p),
        (RegularizerKind::Shakeout, MaskSet::Unit(m)) => perturb_shakeout(w, m, cfg.p, cfg.c, cfg.unbiased_shakeout),
        (RegularizerKind::Bridgeout, MaskSet::Weight(m)) => perturb_bridgeout(w, m, cfg.p, cfg.q),
        (kind, _) => Err(Error::contract(format!("mask kind does not match regularizer {kind}"))),
    }
}

/// Elementwise `∂W̃/∂W` matching [`perturb`].
pub fn weight_grad_factor(cfg: &RegularizerConfig, w: &Matrix, mask: &MaskSet) -> Result<Matrix> {
    match (cfg.kind, mask) {
        (RegularizerKind::Dropout | RegularizerKind::Shakeout, MaskSet::Unit(m)) => unit_mask_grad_factor(w, m, cfg.p),
        (RegularizerKind::Bridgeout, MaskSet::Weight(m)) => bridgeout_weight_grad_factor(w, m, cfg.p, cfg.q, cfg.eps),
        (kind, _) => Err(Error::contract(format!("mask kind does not match regularizer {kind}"))),
    }
}

/// Closed-form `E[W̃]` under the mask distribution.
pub fn expected_perturbation(cfg: &RegularizerConfig, w: &Matrix) -> Result<Matrix> {
    cfg.validate()?;
    Ok(match cfg.kind {
        RegularizerKind::None | RegularizerKind::Dropout | RegularizerKind::Bridgeout => w.clone(),
        RegularizerKind::Shakeout => {
            let p = cfg.p;
            // p·(w/p + c·k·s) + (1-p)·(-c·s)
            let bias = cfg.c * (p * shakeout_kept_gain(p, cfg.unbiased_shakeout) - (1.0 - p));
            w.map(|x| x + bias * sgn(x))
        }
    })
}
