use serde::{Deserialize, Serialize};

use super::{gaussian_obs_grad, gaussian_obs_hess, gaussian_obs_logdens, gaussian_obs_sample, positive, Model};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Stochastic FitzHugh–Nagumo model with drift
/// `(θ₁(x₁ - x₁³ - x₂), θ₂x₁ - x₂ + θ₃)`, diagonal diffusion and observations
/// `Y ~ N₂(X, θ₄ I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fhn {
    pub sigma: [f64; 2],
    pub x_star: [f64; 2],
}

impl Default for Fhn {
    fn default() -> Self {
        Fhn { sigma: [0.2, 0.4], x_star: [0.0, 0.0] }
    }
}

impl Model for Fhn {
    fn name(&self) -> &'static str {
        "fhn"
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
        positive("theta1", theta[0])?;
        positive("theta4", theta[3])
    }

    #[inline]
    fn drift(&self, theta: &[f64], x: &[f64], out: &mut [f64]) {
        out[0] = theta[0] * (x[0] - x[0] * x[0] * x[0] - x[1]);
        out[1] = theta[1] * x[0] - x[1] + theta[2];
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
        let mut a = [0.0; 2];
        self.drift(theta, x, &mut a);
        out[0] = a[0] / self.sigma[0];
        out[1] = a[1] / self.sigma[1];
    }

    fn b_grad(&self, _theta: &[f64], x: &[f64], out: &mut [f64]) {
        let [s1, s2] = self.sigma;
        let cubic = x[0] - x[0] * x[0] * x[0] - x[1];
        out.copy_from_slice(&[
            cubic / s1, 0.0,
            0.0, x[0] / s2,
            0.0, 1.0 / s2,
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
}
