use serde::{Deserialize, Serialize};

use super::{gaussian_obs_grad, gaussian_obs_hess, gaussian_obs_logdens, gaussian_obs_sample, positive, Model};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Univariate Ornstein–Uhlenbeck process `dX = -θ₁X dt + σ dW` observed as
/// `Y ~ N(X, θ₂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ou1d {
    pub sigma: f64,
    pub x_star: [f64; 1],
}

impl Ou1d {
    pub fn new(sigma: f64, x_star: f64) -> Self {
        Ou1d { sigma, x_star: [x_star] }
    }
}

impl Default for Ou1d {
    fn default() -> Self {
        Ou1d::new(1.0, 1.0)
    }
}

impl Model for Ou1d {
    fn name(&self) -> &'static str {
        "ou1d"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        positive("theta2", theta[1])
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = -theta[0] * x[0];
    }

    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sigma;
    }

    #[inline]
    fn apply_sigma(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = self.sigma * v[0];
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn girsanov_matrix(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if self.sigma == 0.0 || !self.sigma.is_finite() {
            return Err(Error::Ellipticity(x.to_vec()));
        }
        out[0] = 1.0 / self.sigma;
        Ok(())
    }

    fn b(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = -theta[0] * x[0] / self.sigma;
    }

    fn b_grad(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = -x[0] / self.sigma;
        out[1] = 0.0;
    }

    fn b_hess(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    #[inline]
    fn obs_log_density(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
        gaussian_obs_logdens(theta[1], x, y)
    }
    fn obs_log_density_grad(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        gaussian_obs_grad(theta[1], 1, x, y, out)
    }
    fn obs_log_density_hess(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        gaussian_obs_hess(theta[1], 1, x, y, out)
    }
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        gaussian_obs_sample(theta[1], x, rng, out)
    }

    fn gaussian_obs_variance(&self, theta: &[f64]) -> Option<f64> {
        Some(theta[1])
    }

    fn affine_drift(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![-theta[0]], vec![0.0]))
    }
}
