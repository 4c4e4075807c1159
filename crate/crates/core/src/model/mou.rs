use serde::{Deserialize, Serialize};

use super::{gaussian_obs_grad, gaussian_obs_hess, gaussian_obs_logdens, gaussian_obs_sample, positive, Model};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Two-dimensional OU process with drift `(θ₁ - θ₂x₁, -θ₃x₂)`, diagonal
/// diffusion `diag(σ₁, σ₂)` and observations `Y ~ N₂(X, θ₄ I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mou2d {
    pub sigma: [f64; 2],
    pub x_star: [f64; 2],
}

impl Default for Mou2d {
    fn default() -> Self {
        Mou2d { sigma: [0.8, 0.6], x_star: [1.0, 1.0] }
    }
}

impl Model for Mou2d {
    fn name(&self) -> &'static str {
        "mou2d"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn obs_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        4
    }
    fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    fn check_params(&self, theta: &[f64]) -> Result<()> {
        positive("theta4", theta[3])
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] - theta[1] * x[0];
        out[1] = -theta[2] * x[1];
    }

    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[self.sigma[0], 0.0, 0.0, self.sigma[1]]);
    }

    #[inline]
    fn apply_sigma(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = self.sigma[0] * v[0];
        out[1] = self.sigma[1] * v[1];
    }

    fn constant_diffusion(&self) -> bool {
        true
    }

    fn girsanov_matrix(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        if self.sigma.iter().any(|s| *s == 0.0 || !s.is_finite()) {
            return Err(Error::Ellipticity(x.to_vec()));
        }
        out.copy_from_slice(&[1.0 / self.sigma[0], 0.0, 0.0, 1.0 / self.sigma[1]]);
        Ok(())
    }

    fn b(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = (theta[0] - theta[1] * x[0]) / self.sigma[0];
        out[1] = -theta[2] * x[1] / self.sigma[1];
    }

    fn b_grad(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        let [s1, s2] = self.sigma;
        out.copy_from_slice(&[
            1.0 / s1, 0.0,
            -x[0] / s1, 0.0,
            0.0, -x[1] / s2,
            0.0, 0.0,
        ]);
    }

    fn b_hess(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    #[inline]
    fn obs_log_density(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
        gaussian_obs_logdens(theta[3], x, y)
    }
    fn obs_log_density_grad(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        gaussian_obs_grad(theta[3], 3, x, y, out)
    }
    fn obs_log_density_hess(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        gaussian_obs_hess(theta[3], 3, x, y, out)
    }
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        gaussian_obs_sample(theta[3], x, rng, out)
    }

    fn gaussian_obs_variance(&self, theta: &[f64]) -> Option<f64> {
        Some(theta[3])
    }

    fn affine_drift(&self, theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![-theta[1], 0.0, 0.0, -theta[2]], vec![theta[0], 0.0]))
    }
}
