//! Bridgeout noise on generalized linear models.
//!
//! For a GLM with log-partition `A`, marginalizing the Bridgeout feature
//! noise out of the negative log-likelihood leaves the regularizer
//! `R(β) = Σᵢ E[A(x̃ᵢ·β)] − A(xᵢ·β)`. Its second-order Taylor estimate is
//!
//! ```text
//! R̂(β) = Σᵢ A″(xᵢ·β)/2 · Var[x̃ᵢ·β]
//!      = (1−p)/(2p) · Σⱼ (Γⱼ·|βⱼ|)^q,   Γⱼ = (XᵀDX)ⱼⱼ^{1/q},  D = diag(A″(xᵢ·β))
//! ```
//!
//! an L_q penalty. This module evaluates both forms and a Monte-Carlo
//! estimate of `R(β)` to check them against.

use std::fmt;

use crate::error::{Error, Result};
use crate::network::{sigmoid, softplus};
use crate::rng::RngStream;
use crate::tensor::{abs_pow, sgn, Matrix, DEFAULT_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Linear,
    Logistic,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "gaussian" => Ok(Family::Linear),
            "logistic" | "bernoulli" => Ok(Family::Logistic),
            other => Err(Error::config(format!("unknown GLM family '{other}'"))),
        }
    }
}

/// `A(η)` and its first two derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogPartition {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

pub fn log_partition(family: Family, eta: f64) -> LogPartition {
    match family {
        Family::Linear => LogPartition {
            value: eta * eta / 2.0,
            first: eta,
            second: 1.0,
        },
        Family::Logistic => {
            let s = sigmoid(eta);
            LogPartition {
                value: softplus(eta),
                first: s,
                second: s * (1.0 - s),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlmProblem {
    /// `n × d` design matrix.
    pub x: Matrix,
    pub y: Vec<f64>,
    pub beta: Vec<f64>,
    pub family: Family,
}

impl GlmProblem {
    pub fn new(x: Matrix, y: Vec<f64>, beta: Vec<f64>, family: Family) -> Result<Self> {
        if y.len() != x.rows() || beta.len() != x.cols() {
            return Err(Error::Shape {
                op: "GlmProblem::new",
                left: x.shape(),
                right: (y.len(), beta.len()),
            });
        }
        if family == Family::Logistic && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::config("logistic responses must be 0 or 1"));
        }
        Ok(Self { x, y, beta, family })
    }

    fn linear_predictor(&self, row: usize) -> f64 {
        dot(self.x.row(row), &self.beta)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_open_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("retention probability must lie in (0, 1), got {p}")))
    }
}

/// `Var[x̃·β] = Σⱼ (1−p)/p · |βⱼ|^q · xⱼ²`.
pub fn noise_variance(x: &[f64], beta: &[f64], p: f64, q: f64) -> f64 {
    let gain = (1.0 - p) / p;
    x.iter()
        .zip(beta)
        .map(|(&xj, &bj)| gain * abs_pow(bj, q, DEFAULT_EPS) * xj * xj)
        .sum()
}

/// One draw of `x̃·β` with Bridgeout feature noise
/// `x̃ⱼ = xⱼ·[1 + |βⱼ|^{(q−2)/2}·sgn(βⱼ)·(mⱼ − 1)]`, where `mⱼ` is `1/p` with
/// probability `p` and `0` otherwise.
pub fn noisy_dot(x: &[f64], beta: &[f64], p: f64, q: f64, rng: &mut RngStream) -> f64 {
    x.iter()
        .zip(beta)
        .map(|(&xj, &bj)| {
            let m = if rng.bernoulli(p) { 1.0 / p } else { 0.0 };
            feature_noise(xj, bj, m, q) * bj
        })
        .sum()
}

/// `x̃ⱼ` for a given scaled mask value `m`. `βⱼ = 0` leaves the feature
/// untouched (the `sgn` factor vanishes).
pub fn feature_noise(xj: f64, bj: f64, m: f64, q: f64) -> f64 {
    if bj == 0.0 {
        return xj;
    }
    xj * (1.0 + bj.abs().powf((q - 2.0) / 2.0) * sgn(bj) * (m - 1.0))
}

/// Closed-form quadratic penalty and the diagonal of `Γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedFormPenalty {
    pub value: f64,
    pub gamma_diag: Vec<f64>,
}

/// `R̂(β)` accumulated sample by sample, plus `Γⱼ = (XᵀDX)ⱼⱼ^{1/q}`.
pub fn bridge_penalty_closed_form(prob: &GlmProblem, p: f64, q: f64) -> Result<ClosedFormPenalty> {
    check_open_p(p)?;
    if !(q > 0.0) {
        return Err(Error::config(format!("q must be > 0, got {q}")));
    }
    let mut value = 0.0;
    let mut xtdx_diag = vec![0.0; prob.x.cols()];
    for i in 0..prob.x.rows() {
        let row = prob.x.row(i);
        let a2 = log_partition(prob.family, prob.linear_predictor(i)).second;
        value += a2 / 2.0 * noise_variance(row, &prob.beta, p, q);
        for (g, &xj) in xtdx_diag.iter_mut().zip(row) {
            *g += a2 * xj * xj;
        }
    }
    let gamma_diag = xtdx_diag.iter().map(|d| d.powf(1.0 / q)).collect();
    Ok(ClosedFormPenalty { value, gamma_diag })
}

/// `(1−p)/(2p)·‖Γβ‖_q^q` with diagonal `Γ`.
pub fn gamma_form_penalty(gamma_diag: &[f64], beta: &[f64], p: f64, q: f64) -> f64 {
    let norm: f64 = gamma_diag.iter().zip(beta).map(|(g, b)| abs_pow(g * b, q, DEFAULT_EPS)).sum();
    (1.0 - p) / (2.0 * p) * norm
}

/// Quadratic Dropout penalty for GLMs: `(1−p)/(2p)·Σⱼ βⱼ²·(XᵀDX)ⱼⱼ`.
pub fn dropout_ridge_penalty(prob: &GlmProblem, p: f64) -> Result<f64> {
    check_open_p(p)?;
    let d = prob.x.cols();
    let mut diag = vec![0.0; d];
    for i in 0..prob.x.rows() {
        let a2 = log_partition(prob.family, prob.linear_predictor(i)).second;
        for (g, &xj) in diag.iter_mut().zip(prob.x.row(i)) {
            *g += a2 * xj * xj;
        }
    }
    let ridge: f64 = diag.iter().zip(&prob.beta).map(|(g, b)| g * b * b).sum();
    Ok((1.0 - p) / (2.0 * p) * ridge)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyReport {
    pub closed_form: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub n_samples: usize,
    pub gamma_diag: Vec<f64>,
}

impl PenaltyReport {
    /// `|mc − closed| / stderr`, or infinity when the stderr vanishes and
    /// the two differ.
    pub fn z_score(&self) -> f64 {
        let diff = (self.mc_estimate - self.closed_form).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.mc_stderr
        }
    }

    /// Single-line `key=value` record.
    pub fn to_record(&self) -> String {
        let gamma: Vec<String> = self.gamma_diag.iter().map(|g| format!("{g:?}")).collect();
        format!(
            "closed_form={:?} mc_estimate={:?} mc_stderr={:?} n_samples={} gamma_diag={}",
            self.closed_form,
            self.mc_estimate,
            self.mc_stderr,
            self.n_samples,
            gamma.join(";")
        )
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let mut closed_form = None;
        let mut mc_estimate = None;
        let mut mc_stderr = None;
        let mut n_samples = None;
        let mut gamma_diag = None;
        let bad = |what: &str| Error::Data(format!("malformed penalty record field '{what}'"));
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(field))?;
            match k {
                "closed_form" => closed_form = Some(v.parse::<f64>().map_err(|_| bad(k))?),
                "mc_estimate" => mc_estimate = Some(v.parse::<f64>().map_err(|_| bad(k))?),
                "mc_stderr" => mc_stderr = Some(v.parse::<f64>().map_err(|_| bad(k))?),
                "n_samples" => n_samples = Some(v.parse::<usize>().map_err(|_| bad(k))?),
                "gamma_diag" => {
                    gamma_diag = Some(
                        v.split(';')
                            .filter(|s| !s.is_empty())
                            .map(|s| s.parse::<f64>().map_err(|_| bad(k)))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                _ => return Err(bad(k)),
            }
        }
        Ok(Self {
            closed_form: closed_form.ok_or_else(|| bad("closed_form"))?,
            mc_estimate: mc_estimate.ok_or_else(|| bad("mc_estimate"))?,
            mc_stderr: mc_stderr.ok_or_else(|| bad("mc_stderr"))?,
            n_samples: n_samples.ok_or_else(|| bad("n_samples"))?,
            gamma_diag: gamma_diag.unwrap_or_default(),
        })
    }
}

/// Monte-Carlo estimate of `R(β)`: each of `n_samples` draws resamples the
/// noise for every row and sums `A(x̃ᵢ·β) − A(xᵢ·β)`. The standard error is
/// the sample standard deviation of the draws over `√n_samples`.
pub fn mc_marginalized_regularizer(prob: &GlmProblem, p: f64, q: f64, n_samples: usize, rng: &mut RngStream) -> Result<PenaltyReport> {
    if n_samples < 100 {
        return Err(Error::config(format!("need at least 100 Monte-Carlo draws, got {n_samples}")));
    }
    let closed = bridge_penalty_closed_form(prob, p, q)?;
    let base: Vec<f64> = (0..prob.x.rows())
        .map(|i| log_partition(prob.family, prob.linear_predictor(i)).value)
        .collect();
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..n_samples {
        let mut draw = 0.0;
        for (i, &a0) in base.iter().enumerate() {
            let eta = noisy_dot(prob.x.row(i), &prob.beta, p, q, rng);
            draw += log_partition(prob.family, eta).value - a0;
        }
        // Welford update
        let delta = draw - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (draw - mean);
    }
    let var = m2 / (n_samples - 1) as f64;
    Ok(PenaltyReport {
        closed_form: closed.value,
        mc_estimate: mean,
        mc_stderr: (var / n_samples as f64).sqrt(),
        n_samples,
        gamma_diag: closed.gamma_diag,
    })
}

/// Random problem used by the checks: standard-normal design, `β` uniform
/// on `±beta_scale`, responses drawn from the model.
pub fn random_problem(n: usize, d: usize, family: Family, beta_scale: f64, rng: &mut RngStream) -> Result<GlmProblem> {
    let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.standard_normal()).collect())?;
    let beta: Vec<f64> = (0..d).map(|_| rng.uniform_range(-beta_scale, beta_scale)).collect();
    let y = (0..n)
        .map(|i| {
            let eta = dot(x.row(i), &beta);
            match family {
                Family::Linear => eta + rng.standard_normal(),
                Family::Logistic => {
                    if rng.bernoulli(sigmoid(eta)) {
                        1.0
                    } else {
                        0.0
                    }
                }
            }
        })
        .collect();
    GlmProblem::new(x, y, beta, family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regularizer::perturb_bridgeout;

    #[test]
    fn log_partition_values() {
        let l = log_partition(Family::Logistic, 0.0);
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
        assert_eq!(l.first, 0.5);
        assert_eq!(l.second, 0.25);
        let g = log_partition(Family::Linear, 3.0);
        assert_eq!((g.value, g.first, g.second), (4.5, 3.0, 1.0));
        let big = log_partition(Family::Logistic, 800.0);
        assert!(big.value.is_finite() && big.second >= 0.0);
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let h = 1e-4;
        for family in [Family::Linear, Family::Logistic] {
            for k in -40..=40 {
                let eta = k as f64 * 0.2;
                let fd = (log_partition(family, eta + h).value - 2.0 * log_partition(family, eta).value
                    + log_partition(family, eta - h).value)
                    / (h * h);
                let an = log_partition(family, eta).second;
                assert!((fd - an).abs() < 1e-6, "{family} eta={eta}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn noise_variance_examples() {
        assert_eq!(noise_variance(&[1.0, 1.0], &[2.0, -1.0], 0.5, 1.0), 3.0);
        assert_eq!(noise_variance(&[1.0, 4.0], &[0.0, 0.0], 0.3, 1.5), 0.0);
    }

    #[test]
    fn closed_form_hand_example() {
        let x = Matrix::row_vector(&[1.0, 0.0]).unwrap();
        let prob = GlmProblem::new(x, vec![0.0], vec![3.0, 5.0], Family::Linear).unwrap();
        let r = bridge_penalty_closed_form(&prob, 0.5, 1.0).unwrap();
        assert!((r.value - 1.5).abs() < 1e-15);
        assert!(bridge_penalty_closed_form(&prob, 1.0, 1.0).is_err());
        assert!(bridge_penalty_closed_form(&prob, 0.0, 1.0).is_err());
    }

    #[test]
    fn both_closed_form_paths_agree() {
        let mut rng = RngStream::new(31, 0);
        for family in [Family::Linear, Family::Logistic] {
            for _ in 0..20 {
                let prob = random_problem(15, 6, family, 1.5, &mut rng).unwrap();
                let p = rng.uniform_range(0.1, 0.9);
                let q = rng.uniform_range(0.3, 3.0);
                let r = bridge_penalty_closed_form(&prob, p, q).unwrap();
                let g = gamma_form_penalty(&r.gamma_diag, &prob.beta, p, q);
                assert!((r.value - g).abs() <= 1e-12 * r.value.abs().max(1e-300), "{} vs {}", r.value, g);
            }
        }
    }

    #[test]
    fn penalty_decreases_with_retention() {
        let mut rng = RngStream::new(32, 0);
        let prob = random_problem(20, 4, Family::Logistic, 1.0, &mut rng).unwrap();
        for &q in &[0.5, 1.0, 2.0] {
            let vals: Vec<f64> = (1..20)
                .map(|k| bridge_penalty_closed_form(&prob, k as f64 * 0.05, q).unwrap().value)
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn linear_penalty_scales_as_power_q() {
        let mut rng = RngStream::new(33, 0);
        let prob = random_problem(12, 5, Family::Linear, 2.0, &mut rng).unwrap();
        for &q in &[0.5, 1.0, 1.7, 2.0] {
            let base = bridge_penalty_closed_form(&prob, 0.4, q).unwrap().value;
            for &s in &[0.5, 2.0] {
                let mut scaled = prob.clone();
                scaled.beta.iter_mut().for_each(|b| *b *= s);
                let v = bridge_penalty_closed_form(&scaled, 0.4, q).unwrap().value;
                let expect = s.powf(q) * base;
                assert!((v - expect).abs() <= 1e-12 * expect, "q={q} s={s}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn feature_noise_equals_weight_noise() {
        let mut rng = RngStream::new(34, 0);
        for _ in 0..200 {
            let d = 6;
            let x: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let mut beta: Vec<f64> = (0..d).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
            beta[0] = 0.0;
            let p = rng.uniform_range(0.2, 0.9);
            let q = rng.uniform_range(0.5, 2.5);
            let mask: Vec<f64> = (0..d).map(|_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).collect();
            let b = Matrix::row_vector(&beta).unwrap();
            let m = Matrix::row_vector(&mask).unwrap();
            let bt = perturb_bridgeout(&b, &m, p, q).unwrap();
            let weight_side = dot(&x, bt.as_slice());
            let feature_side: f64 = x
                .iter()
                .zip(&beta)
                .zip(&mask)
                .map(|((&xj, &bj), &mj)| feature_noise(xj, bj, mj / p, q) * bj)
                .sum();
            assert!((weight_side - feature_side).abs() <= 1e-12 * weight_side.abs().max(1.0));
        }
    }

    #[test]
    fn record_round_trip() {
        let r = PenaltyReport {
            closed_form: 1.25,
            mc_estimate: 1.2499,
            mc_stderr: 3e-4,
            n_samples: 1000,
            gamma_diag: vec![0.5, 2.0],
        };
        assert_eq!(PenaltyReport::from_record(&r.to_record()).unwrap(), r);
        assert!(PenaltyReport::from_record("closed_form=x").is_err());
    }

    #[test]
    fn logistic_responses_validated() {
        let x = Matrix::row_vector(&[1.0]).unwrap();
        assert!(GlmProblem::new(x, vec![0.5], vec![1.0], Family::Logistic).is_err());
    }

    #[test]
    fn too_few_draws_rejected() {
        let mut rng = RngStream::new(35, 0);
        let prob = random_problem(3, 2, Family::Linear, 1.0, &mut rng).unwrap();
        assert!(mc_marginalized_regularizer(&prob, 0.5, 1.0, 99, &mut rng).is_err());
    }
}
