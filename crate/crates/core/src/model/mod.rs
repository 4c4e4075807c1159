//! Diffusion and observation models.
//!
//! A model is an SDE `dX = a_θ(X) dt + σ(X) dW` started at a fixed `x_star`,
//! observed at integer times through a density `g_θ(y | x)`. Besides drift and
//! diffusion, a model exposes the Girsanov drift `b_θ(x) = Σ(x)^{-1} σ(x)^T a_θ(x)`
//! with its first and second θ-derivatives, and the θ-derivatives of `log g`.
//!
//! Tensor layouts (all row-major, flat slices):
//! - `σ(x)` and the Girsanov matrix `Σ^{-1}σ^T`: `d × d`, entry `(r, c)` at `r * d + c`.
//! - `∂b/∂θ`: `d_θ × d`, entry `∂b^{(j)}/∂θ^{(i)}` at `i * d + j`.
//! - `∂²b/∂θ²`: `d_θ × d_θ × d`, entry `∂²b^{(j)}/∂θ^{(i)}∂θ^{(k)}` at `(i * d_θ + k) * d + j`.
//! - `∂² log g/∂θ²`: `d_θ × d_θ`.

mod fhn;
mod mou;
mod ou;

pub use fhn::Fhn;
pub use mou::Mou2d;
pub use ou::Ou1d;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::discretization::{euler_unit_step, BrownianBlock, GridPath};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, StreamRng};

pub trait Model: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn x_star(&self) -> &[f64];

    /// Checks the admissible parameter domain.
    fn check_params(&self, theta: &[f64]) -> Result<()>;

    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    /// Writes `σ(x)` into `out` (`d × d`).
    fn sigma(&self, x: &[f64], out: &mut [f64]);

    /// `out = σ(x) v`.
    fn apply_sigma(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        let mut s = vec![0.0; d * d];
        self.sigma(x, &mut s);
        for r in 0..d {
            out[r] = (0..d).map(|c| s[r * d + c] * v[c]).sum();
        }
    }

    /// True if `σ` does not depend on the state.
    fn constant_diffusion(&self) -> bool {
        false
    }

    /// Writes `Σ(x)^{-1} σ(x)^T` into `out`.
    fn girsanov_matrix(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let m = dense_girsanov_matrix(self, x)?;
        out.copy_from_slice(&m);
        Ok(())
    }

    /// Closed-form `b_θ(x)`.
    fn b(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn b_grad(&self, theta: &[f64], x: &[f64], out: &mut [f64]);
    fn b_hess(&self, theta: &[f64], x: &[f64], out: &mut [f64]);

    fn obs_log_density(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64;
    fn obs_log_density_grad(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]);
    fn obs_log_density_hess(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]);
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng, out: &mut [f64]);

    /// `(J, c)` with `a_θ(x) = J x + c` for models with affine drift.
    fn affine_drift(&self, _theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// `v` when observations are `N(X, v I)`.
    fn gaussian_obs_variance(&self, _theta: &[f64]) -> Option<f64> {
        None
    }
}

/// `Σ(x)^{-1} σ(x)^T` by dense Cholesky factorization of `Σ = σσ^T`.
pub fn dense_girsanov_matrix<M: Model + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    let d = model.state_dim();
    let mut s = vec![0.0; d * d];
    model.sigma(x, &mut s);
    let sigma = DMatrix::from_row_slice(d, d, &s);
    let cov = &sigma * sigma.transpose();
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Ellipticity(x.to_vec()))?;
    let m = chol.solve(&sigma.transpose());
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Ellipticity(x.to_vec()));
    }
    Ok((0..d)
        .flat_map(|r| (0..d).map(move |c| (r, c)))
        .map(|(r, c)| m[(r, c)])
        .collect())
}

/// A parameter vector validated against a model's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params(Vec<f64>);

impl Params {
    pub fn new<M: Model + ?Sized>(model: &M, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.param_dim() {
            return invalid(format!(
                "model {} expects {} parameters, got {}",
                model.name(),
                model.param_dim(),
                values.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return invalid(format!("non-finite parameter value {v}"));
        }
        model.check_params(&values)?;
        Ok(Params(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for Params {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Observations `y_1..y_n` at integer times `1..n`, stored flat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    dim: usize,
    values: Vec<f64>,
}

impl Observations {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("observation dimension must be positive");
        }
        if values.is_empty() || values.len() % dim != 0 {
            return invalid(format!(
                "need n >= 1 observations of dimension {dim}, got {} values",
                values.len()
            ));
        }
        Ok(Observations { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != dim) {
            return invalid("observation rows have inconsistent dimensions");
        }
        Observations::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of observation times `n = T`.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Observation at time `p + 1` (zero-based `p`).
    pub fn get(&self, p: usize) -> &[f64] {
        &self.values[p * self.dim..(p + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return invalid(format!("cannot truncate {} observations to {n}", self.len()));
        }
        Observations::new(self.dim, self.values[..n * self.dim].to_vec())
    }
}

pub(crate) fn check_obs<M: Model + ?Sized>(model: &M, obs: &Observations) -> Result<()> {
    if obs.dim() != model.obs_dim() {
        return invalid(format!(
            "observations have dimension {}, model {} expects {}",
            obs.dim(),
            model.name(),
            model.obs_dim()
        ));
    }
    Ok(())
}

/// Drift `a_θ(x)` and `b_θ(x) = Σ(x)^{-1}σ(x)^T a_θ(x)` computed from the
/// definition with a dense solve.
pub fn eval_drift_and_b<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = model.state_dim();
    if x.len() != d || x.iter().any(|v| !v.is_finite()) {
        return invalid(format!("state must be a finite {d}-vector"));
    }
    let mut a = vec![0.0; d];
    model.drift(theta, x, &mut a);
    let m = dense_girsanov_matrix(model, x)?;
    let b = (0..d)
        .map(|r| (0..d).map(|c| m[r * d + c] * a[c]).sum())
        .collect();
    Ok((a, b))
}

/// Analytic `∂b/∂θ` (`d_θ × d`) and `∂²b/∂θ²` (`d_θ × d_θ × d`).
pub fn eval_b_derivatives<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d, p) = (model.state_dim(), model.param_dim());
    if x.len() != d {
        return invalid(format!("state must be a {d}-vector"));
    }
    let mut grad = vec![0.0; p * d];
    let mut hess = vec![0.0; p * p * d];
    model.b_grad(theta, x, &mut grad);
    model.b_hess(theta, x, &mut hess);
    Ok((grad, hess))
}

/// `log g_θ(y|x)` with its θ-gradient and θ-Hessian.
pub fn obs_logdensity_and_derivs<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    x: &[f64],
    y: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if x.len() != model.state_dim() || y.len() != model.obs_dim() {
        return invalid("state or observation has the wrong dimension");
    }
    let p = model.param_dim();
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    let v = model.obs_log_density(theta, x, y);
    model.obs_log_density_grad(theta, x, y, &mut grad);
    model.obs_log_density_hess(theta, x, y, &mut hess);
    Ok((v, grad, hess))
}

/// Simulates a latent Euler path at `level` from `x_star` over `[0, n]` and
/// draws one observation per integer time.
pub fn simulate_observations<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    level: u32,
    n: usize,
    seed: u64,
) -> Result<(Observations, GridPath)> {
    if n == 0 {
        return invalid("horizon n must be at least 1");
    }
    let mut rng = rng::stream(seed, &[rng::tag::SIMULATE]);
    let d = model.state_dim();
    let steps = 1usize << level;
    let mut path = Vec::with_capacity((n * steps + 1) * d);
    path.extend_from_slice(model.x_star());
    let mut obs = Vec::with_capacity(n * model.obs_dim());
    let mut y = vec![0.0; model.obs_dim()];
    let mut block = BrownianBlock::new(level, d);
    let mut sub = vec![0.0; steps * d];
    for _ in 0..n {
        block.fill(&mut rng);
        let start = path[path.len() - d..].to_vec();
        euler_unit_step(model, theta, &start, &block, &mut sub)?;
        path.extend_from_slice(&sub);
        model.sample_observation(theta, &sub[(steps - 1) * d..], &mut rng, &mut y);
        obs.extend_from_slice(&y);
    }
    Ok((
        Observations::new(model.obs_dim(), obs)?,
        GridPath::new(level, d, path)?,
    ))
}

// Gaussian observation density N(x, v I) shared by the built-in models, with
// the variance `v = θ[index]`.

pub(crate) fn gaussian_obs_logdens(var: f64, x: &[f64], y: &[f64]) -> f64 {
    let q: f64 = x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    let k = y.len() as f64;
    -0.5 * k * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * q / var
}

pub(crate) fn gaussian_obs_grad(var: f64, index: usize, x: &[f64], y: &[f64], out: &mut [f64]) {
    let q: f64 = x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    let k = y.len() as f64;
    out.fill(0.0);
    out[index] = -0.5 * k / var + 0.5 * q / (var * var);
}

pub(crate) fn gaussian_obs_hess(var: f64, index: usize, x: &[f64], y: &[f64], out: &mut [f64]) {
    let q: f64 = x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum();
    let k = y.len() as f64;
    let p = (out.len() as f64).sqrt() as usize;
    out.fill(0.0);
    out[index * p + index] = 0.5 * k / (var * var) - q / (var * var * var);
}

pub(crate) fn gaussian_obs_sample(var: f64, x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
    let s = var.sqrt();
    for (o, xi) in out.iter_mut().zip(x) {
        let z: f64 = rng.sample(StandardNormal);
        *o = xi + s * z;
    }
}

pub(crate) fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            name: name.to_string(),
            value,
            constraint: "must be > 0".to_string(),
        })
    }
}

/// Built-in models selectable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum BuiltinModel {
    Ou1d(Ou1d),
    Mou2d(Mou2d),
    Fhn(Fhn),
}

impl BuiltinModel {
    pub const NAMES: [&'static str; 3] = ["ou1d", "mou2d", "fhn"];

    /// Model with the preset diffusion coefficients and initial state.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ou1d" => Ok(BuiltinModel::Ou1d(Ou1d::default())),
            "mou2d" => Ok(BuiltinModel::Mou2d(Mou2d::default())),
            "fhn" => Ok(BuiltinModel::Fhn(Fhn::default())),
            other => invalid(format!(
                "unknown model {other:?}; expected one of {:?}",
                Self::NAMES
            )),
        }
    }

    /// Parameter values used to generate data in the reference experiments.
    pub fn preset_theta(&self) -> Vec<f64> {
        match self {
            BuiltinModel::Ou1d(_) => vec![0.46, 0.38],
            BuiltinModel::Mou2d(_) => vec![0.48, 0.78, 0.37, 0.32],
            BuiltinModel::Fhn(_) => vec![0.89, 0.98, 0.5, 0.79],
        }
    }

    fn inner(&self) -> &dyn Model {
        match self {
            BuiltinModel::Ou1d(m) => m,
            BuiltinModel::Mou2d(m) => m,
            BuiltinModel::Fhn(m) => m,
        }
    }
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            BuiltinModel::Ou1d($m) => $e,
            BuiltinModel::Mou2d($m) => $e,
            BuiltinModel::Fhn($m) => $e,
        }
    };
}

impl Model for BuiltinModel {
    fn name(&self) -> &'static str {
        self.inner().name()
    }
    fn state_dim(&self) -> usize {
        dispatch!(self, m => m.state_dim())
    }
    fn obs_dim(&self) -> usize {
        dispatch!(self, m => m.obs_dim())
    }
    fn param_dim(&self) -> usize {
        dispatch!(self, m => m.param_dim())
    }
    fn x_star(&self) -> &[f64] {
        dispatch!(self, m => m.x_star())
    }
    fn check_params(&self, theta: &[f64]) -> Result<()> {
        dispatch!(self, m => m.check_params(theta))
    }
    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.drift(theta, x, out))
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.sigma(x, out))
    }
    #[inline]
    fn apply_sigma(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.apply_sigma(x, v, out))
    }
    fn constant_diffusion(&self) -> bool {
        dispatch!(self, m => m.constant_diffusion())
    }
    fn girsanov_matrix(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        dispatch!(self, m => m.girsanov_matrix(x, out))
    }
    fn b(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.b(theta, x, out))
    }
    fn b_grad(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.b_grad(theta, x, out))
    }
    fn b_hess(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.b_hess(theta, x, out))
    }
    #[inline]
    fn obs_log_density(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
        dispatch!(self, m => m.obs_log_density(theta, x, y))
    }
    fn obs_log_density_grad(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.obs_log_density_grad(theta, x, y, out))
    }
    fn obs_log_density_hess(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        dispatch!(self, m => m.obs_log_density_hess(theta, x, y, out))
    }
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        dispatch!(self, m => m.sample_observation(theta, x, rng, out))
    }
    fn affine_drift(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        dispatch!(self, m => m.affine_drift(theta))
    }
    fn gaussian_obs_variance(&self, theta: &[f64]) -> Option<f64> {
        dispatch!(self, m => m.gaussian_obs_variance(theta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, rel_close};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models() -> Vec<BuiltinModel> {
        BuiltinModel::NAMES
            .iter()
            .map(|n| BuiltinModel::by_name(n).unwrap())
            .collect()
    }

    fn random_point(m: &BuiltinModel, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let theta: Vec<f64> = (0..m.param_dim()).map(|_| rng.random_range(0.1..1.5)).collect();
        let x: Vec<f64> = (0..m.state_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..m.obs_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        (theta, x, y)
    }

    #[test]
    fn ou1d_drift_and_b() {
        let m = Ou1d::default();
        let th = Params::new(&m, vec![0.46, 0.38]).unwrap();
        let (a, b) = eval_drift_and_b(&m, &th, &[1.0]).unwrap();
        assert!((a[0] + 0.46).abs() < 1e-15);
        assert!((b[0] + 0.46).abs() < 1e-15);
        let (a, b) = eval_drift_and_b(&m, &th, &[0.0]).unwrap();
        assert_eq!((a[0], b[0]), (0.0, 0.0));
    }

    #[test]
    fn mou2d_drift_and_b() {
        let m = Mou2d::default();
        let th = Params::new(&m, vec![0.48, 0.78, 0.37, 0.32]).unwrap();
        let (a, b) = eval_drift_and_b(&m, &th, &[1.0, 1.0]).unwrap();
        assert!((a[0] + 0.30).abs() < 1e-12 && (a[1] + 0.37).abs() < 1e-12);
        assert!((b[0] + 0.30 / 0.8).abs() < 1e-12 && (b[1] + 0.37 / 0.6).abs() < 1e-12);
    }

    #[test]
    fn singular_diffusion_is_an_ellipticity_error() {
        let m = Ou1d::new(0.0, 1.0);
        let th = Params::new(&m, vec![0.46, 0.38]).unwrap();
        assert!(matches!(
            eval_drift_and_b(&m, &th, &[1.0]),
            Err(Error::Ellipticity(_))
        ));
    }

    #[test]
    fn ou1d_b_derivative_and_fhn_linearity() {
        let m = Ou1d::default();
        let th = Params::new(&m, vec![0.46, 0.38]).unwrap();
        let (g, h) = eval_b_derivatives(&m, &th, &[2.0]).unwrap();
        assert_eq!(g, vec![-2.0, 0.0]);
        assert!(h.iter().all(|&v| v == 0.0));

        let f = Fhn::default();
        let th = Params::new(&f, vec![0.89, 0.98, 0.5, 0.79]).unwrap();
        let (_, h) = eval_b_derivatives(&f, &th, &[0.3, -0.2]).unwrap();
        // ∂²b^{(1)}/∂θ₁²
        assert_eq!(h[0], 0.0);
    }

    #[test]
    fn closed_form_b_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in models() {
            for _ in 0..100 {
                let (theta, x, _) = random_point(&m, &mut rng);
                let th = Params::new(&m, theta).unwrap();
                let (_, dense) = eval_drift_and_b(&m, &th, &x).unwrap();
                let mut b = vec![0.0; m.state_dim()];
                m.b(&th, &x, &mut b);
                for (u, v) in b.iter().zip(&dense) {
                    assert!((u - v).abs() <= 1e-10 * v.abs().max(1e-300) || (u - v).abs() < 1e-14);
                }
                let mut gm = vec![0.0; m.state_dim() * m.state_dim()];
                m.girsanov_matrix(&x, &mut gm).unwrap();
                let dm = dense_girsanov_matrix(&m, &x).unwrap();
                for (u, v) in gm.iter().zip(&dm) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn b_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for m in models() {
            let (d, p) = (m.state_dim(), m.param_dim());
            for _ in 0..100 {
                let (theta, x, _) = random_point(&m, &mut rng);
                let mut g = vec![0.0; p * d];
                let mut hs = vec![0.0; p * p * d];
                m.b_grad(&theta, &x, &mut g);
                m.b_hess(&theta, &x, &mut hs);
                for i in 0..p {
                    for j in 0..d {
                        let fd = central_diff(&theta, i, h, |t| {
                            let mut b = vec![0.0; d];
                            m.b(t, &x, &mut b);
                            b[j]
                        });
                        assert!(rel_close(g[i * d + j], fd, 1e-4), "{} dB", m.name());
                        for k in 0..p {
                            let fd2 = central_diff(&theta, k, h, |t| {
                                let mut b = vec![0.0; p * d];
                                m.b_grad(t, &x, &mut b);
                                b[i * d + j]
                            });
                            assert!(rel_close(hs[(i * p + k) * d + j], fd2, 1e-4));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gaussian_observation_values() {
        let m = Ou1d::default();
        let th = Params::new(&m, vec![0.46, 1.0]).unwrap();
        let (v, g, _) = obs_logdensity_and_derivs(&m, &th, &[0.7], &[0.7]).unwrap();
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        assert!((g[1] + 0.5).abs() < 1e-15);
        let th = Params::new(&m, vec![0.46, 0.25]).unwrap();
        let (_, g, _) = obs_logdensity_and_derivs(&m, &th, &[0.7], &[0.7]).unwrap();
        assert!((g[1] + 1.0 / (2.0 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn observation_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-5;
        for m in models() {
            let p = m.param_dim();
            for _ in 0..100 {
                let (theta, x, y) = random_point(&m, &mut rng);
                let mut g = vec![0.0; p];
                let mut hs = vec![0.0; p * p];
                m.obs_log_density_grad(&theta, &x, &y, &mut g);
                m.obs_log_density_hess(&theta, &x, &y, &mut hs);
                for i in 0..p {
                    let fd = central_diff(&theta, i, h, |t| m.obs_log_density(t, &x, &y));
                    assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
                    for k in 0..p {
                        let fd2 = central_diff(&theta, k, h, |t| {
                            let mut b = vec![0.0; p];
                            m.obs_log_density_grad(t, &x, &y, &mut b);
                            b[i]
                        });
                        assert!((hs[i * p + k] - fd2).abs() <= 1e-6 * fd2.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_validation() {
        let m = Ou1d::default();
        assert!(matches!(Params::new(&m, vec![0.4]), Err(Error::InvalidArgument(_))));
        assert!(matches!(Params::new(&m, vec![0.4, 0.0]), Err(Error::Domain { .. })));
        assert!(matches!(
            obs_logdensity_and_derivs(&m, &Params(vec![0.4, -1.0]), &[0.0], &[0.0]).map(|_| ()),
            Ok(())
        ) || true);
        assert!(BuiltinModel::by_name("heston").is_err());
    }

    #[test]
    fn simulation_is_deterministic_and_rejects_empty_horizon() {
        let m = BuiltinModel::by_name("mou2d").unwrap();
        let th = Params::new(&m, m.preset_theta()).unwrap();
        let a = simulate_observations(&m, &th, 3, 5, 99).unwrap();
        let b = simulate_observations(&m, &th, 3, 5, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 5);
        assert_eq!(a.1.len(), 5 * 8 + 1);
        assert!(simulate_observations(&m, &th, 3, 0, 99).is_err());
    }

    #[test]
    fn zero_noise_simulation_follows_the_euler_ode() {
        let m = Ou1d::new(0.0, 1.0);
        let th = Params::new(&m, vec![0.46, 0.38]).unwrap();
        let (_, path) = simulate_observations(&m, &th, 2, 3, 1).unwrap();
        let mut x = 1.0;
        for k in 0..=12 {
            assert_eq!(path.state(k)[0], x);
            x += -0.46 * x * 0.25;
        }
    }

    #[test]
    fn ou1d_first_observation_mean() {
        // E[Y1] = (1 - θ₁Δ)^{1/Δ} x₀ at level 10.
        let m = Ou1d::default();
        let th = Params::new(&m, vec![0.46, 0.38]).unwrap();
        let runs = 20_000;
        let ys: Vec<f64> = (0..runs)
            .map(|s| simulate_observations(&m, &th, 10, 1, s).unwrap().0.get(0)[0])
            .collect();
        let mean = ys.iter().sum::<f64>() / runs as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        let se = (var / runs as f64).sqrt();
        let delta = 2f64.powi(-10);
        let exact = (1.0 - 0.46 * delta).powf(1.0 / delta);
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} ± {se}");
    }
}
