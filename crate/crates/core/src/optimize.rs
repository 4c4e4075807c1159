//! Likelihood maximization with estimated derivatives: stochastic gradient
//! ascent on the unbiased score and a Newton method preconditioned by the
//! unbiased Hessian.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate_hessian, estimate_score, EstimatorConfig};
use crate::model::{Model, Observations, Params};
use crate::rng::{derive_seed, tag};

/// Iterate norm beyond which a fit is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

/// Newton step scaling applied while the score norm is small.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallGradientScaling {
    pub threshold: f64,
    pub scale: f64,
}

/// Fitting settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub init: Vec<f64>,
    /// SGD step size.
    pub learning_rate: f64,
    pub max_iter: usize,
    /// Stop when the relative distance to `reference` (or, without a
    /// reference, the score norm) is at most this.
    pub tolerance: f64,
    pub reference: Option<Vec<f64>>,
    /// Newton: zero the off-diagonal Hessian entries.
    pub diagonal_only: bool,
    /// Newton: added to the Hessian diagonal.
    pub ridge: f64,
    pub small_gradient: Option<SmallGradientScaling>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            init: Vec::new(),
            learning_rate: 0.002,
            max_iter: 100,
            tolerance: 0.02,
            reference: None,
            diagonal_only: false,
            ridge: 0.0,
            small_gradient: None,
        }
    }
}

impl FitConfig {
    /// Newton modifications used for each built-in model.
    pub fn preset(model: &str) -> Self {
        match model {
            "mou2d" => FitConfig { ridge: 1e-4, ..Default::default() },
            "fhn" => FitConfig {
                diagonal_only: true,
                ridge: 1e-4,
                small_gradient: Some(SmallGradientScaling { threshold: 0.1, scale: 0.002 }),
                ..Default::default()
            },
            _ => FitConfig::default(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.init.len() != dim {
            return invalid(format!("initial θ has length {}, expected {dim}", self.init.len()));
        }
        if self.reference.as_ref().is_some_and(|r| r.len() != dim) {
            return invalid("reference θ has the wrong length");
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning rate must be positive");
        }
        if !(self.ridge >= 0.0) {
            return invalid("ridge must be non-negative");
        }
        if !(self.tolerance >= 0.0) {
            return invalid("tolerance must be non-negative");
        }
        Ok(())
    }

    fn distance(&self, theta: &[f64]) -> Option<f64> {
        self.reference.as_ref().map(|r| relative_distance(theta, r))
    }
}

/// `‖θ - θ_ref‖ / ‖θ_ref‖`.
pub fn relative_distance(theta: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = theta.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = reference.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One row per evaluated iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub score_norm: f64,
    pub distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    /// Updates applied before convergence or the iteration limit.
    pub iterations: usize,
}

impl FitTrace {
    pub fn final_theta(&self) -> &[f64] {
        &self.rows.last().expect("traces start with the initial iterate").theta
    }
}

/// Newton matrix after the configured modifications.
pub fn modified_hessian(hessian: &[Vec<f64>], config: &FitConfig) -> DMatrix<f64> {
    let p = hessian.len();
    DMatrix::from_fn(p, p, |i, j| {
        let v = if config.diagonal_only && i != j { 0.0 } else { hessian[i][j] };
        if i == j { v + config.ridge } else { v }
    })
}

/// Newton step `Ĥ_mod^{-1} ĝ`, scaled when the score is small.
pub fn newton_step(score: &[f64], hessian: &[Vec<f64>], config: &FitConfig) -> Result<Vec<f64>> {
    let h = modified_hessian(hessian, config);
    let step = h
        .lu()
        .solve(&DVector::from_column_slice(score))
        .ok_or_else(|| Error::Singular("modified Hessian".into()))?;
    if step.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("modified Hessian".into()));
    }
    let scale = match config.small_gradient {
        Some(s) if norm(score) < s.threshold => s.scale,
        _ => 1.0,
    };
    Ok(step.iter().map(|v| v * scale).collect())
}

/// Halvings tried to keep a step inside the parameter domain.
const DOMAIN_HALVINGS: usize = 40;

/// Shared fitting loop. `derivatives(θ, k)` returns the score (and Newton
/// step inputs) at iterate `k`; `step` turns them into an update.
fn iterate<D>(
    config: &FitConfig,
    in_domain: impl Fn(&[f64]) -> bool,
    mut derivatives: impl FnMut(&[f64], usize) -> Result<D>,
    score_of: impl Fn(&D) -> &[f64],
    step: impl Fn(&D) -> Result<Vec<f64>>,
) -> Result<FitTrace> {
    let mut theta = config.init.clone();
    let mut rows = Vec::new();
    for k in 0..=config.max_iter {
        let d = derivatives(&theta, k)?;
        let score_norm = norm(score_of(&d));
        let distance = config.distance(&theta);
        rows.push(TraceRow { iteration: k, theta: theta.clone(), score_norm, distance });
        let done = match distance {
            Some(r) => r <= config.tolerance,
            None => score_norm <= config.tolerance,
        };
        if done {
            return Ok(FitTrace { rows, converged: true, iterations: k });
        }
        if k == config.max_iter {
            break;
        }
        let mut delta = step(&d)?;
        let mut next: Vec<f64> = theta.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let mut halvings = 0;
        while !in_domain(&next) {
            if halvings == DOMAIN_HALVINGS {
                return invalid(format!("no step from {theta:?} stays in the parameter domain"));
            }
            delta.iter_mut().for_each(|v| *v *= 0.5);
            next = theta.iter().zip(&delta).map(|(a, b)| a + b).collect();
            halvings += 1;
        }
        let n = norm(&next);
        if !(n <= DIVERGENCE_NORM) {
            return Err(Error::Divergence { value: n, bound: DIVERGENCE_NORM });
        }
        theta = next;
    }
    Ok(FitTrace { rows, converged: false, iterations: config.max_iter })
}

/// Gradient ascent `θ ← θ + η g(θ)` with a user-supplied score.
pub fn sgd_with(
    config: &FitConfig,
    in_domain: impl Fn(&[f64]) -> bool,
    score: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<FitTrace> {
    let eta = config.learning_rate;
    iterate(config, in_domain, score, |g| g, |g| Ok(g.iter().map(|v| eta * v).collect()))
}

/// Newton ascent `θ ← θ + Ĥ_mod^{-1} g` with user-supplied derivatives
/// `(score, 𝔥)`, where `𝔥` is minus the log-likelihood Hessian.
pub fn newton_with(
    config: &FitConfig,
    in_domain: impl Fn(&[f64]) -> bool,
    derivatives: impl FnMut(&[f64], usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)>,
) -> Result<FitTrace> {
    iterate(config, in_domain, derivatives, |d| &d.0, |d| newton_step(&d.0, &d.1, config))
}

fn iteration_config(est: &EstimatorConfig, k: usize) -> EstimatorConfig {
    EstimatorConfig { seed: derive_seed(est.seed, &[tag::ITERATION, k as u64]), ..est.clone() }
}

/// SGD on the unbiased score estimator, with fresh randomness per iteration.
pub fn sgd_fit<M: Model + ?Sized>(
    model: &M,
    obs: &Observations,
    est: &EstimatorConfig,
    fit: &FitConfig,
) -> Result<FitTrace> {
    fit.validate(model.param_dim())?;
    est.validate()?;
    sgd_with(
        fit,
        |t| model.check_params(t).is_ok(),
        |t, k| {
            let theta = Params::new(model, t.to_vec())?;
            Ok(estimate_score(model, &theta, obs, &iteration_config(est, k))?.mean)
        },
    )
}

/// Newton's method on the unbiased score and Hessian estimators; the score
/// is the main-stream average of the same replicates.
pub fn newton_fit<M: Model + ?Sized>(
    model: &M,
    obs: &Observations,
    est: &EstimatorConfig,
    fit: &FitConfig,
) -> Result<FitTrace> {
    fit.validate(model.param_dim())?;
    est.validate()?;
    newton_with(
        fit,
        |t| model.check_params(t).is_ok(),
        |t, k| {
            let theta = Params::new(model, t.to_vec())?;
            let h = estimate_hessian(model, &theta, obs, &iteration_config(est, k))?;
            Ok((h.score, h.mean))
        },
    )
}
