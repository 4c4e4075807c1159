//! Helpers for unit tests: finite differences, chi-square tests and stub models.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::discretization::GridPath;
use crate::error::Result;
use crate::model::{gaussian_obs_grad, gaussian_obs_hess, gaussian_obs_logdens, gaussian_obs_sample, Model};
use crate::rng::StreamRng;

pub fn central_diff(theta: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut up = theta.to_vec();
    let mut down = theta.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-8)
}

/// Upper-tail p-value of Pearson's statistic; cells with zero expected mass
/// must have zero counts.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 1e-15 {
            assert_eq!(c, 0, "draw in a zero-probability cell");
            continue;
        }
        let e = p * total as f64;
        stat += (c as f64 - e).powi(2) / e;
        cells += 1;
    }
    if cells < 2 {
        return 1.0;
    }
    1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat)
}

pub fn random_path(rng: &mut impl Rng, level: u32, d: usize, n: usize) -> GridPath {
    let states = n * (1 << level) + 1;
    let v = (0..states * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    GridPath::new(level, d, v).unwrap()
}

/// Driftless Brownian motion with unit diffusion. With `obs_param` the single
/// parameter is the observation variance; with `flat_obs` the observation
/// density is constant.
#[derive(Debug, Clone)]
pub struct ZeroDrift {
    d: usize,
    x_star: Vec<f64>,
    obs_param: bool,
    pub flat_obs: bool,
}

impl ZeroDrift {
    pub fn new(d: usize) -> Self {
        ZeroDrift { d, x_star: vec![0.0; d], obs_param: false, flat_obs: false }
    }

    pub fn with_obs_param(d: usize) -> Self {
        ZeroDrift { obs_param: true, ..Self::new(d) }
    }

    fn var(&self, theta: &[f64]) -> f64 {
        if self.obs_param { theta[0] } else { 1.0 }
    }
}

impl Model for ZeroDrift {
    fn name(&self) -> &'static str {
        "zero-drift"
    }
    fn state_dim(&self) -> usize {
        self.d
    }
    fn obs_dim(&self) -> usize {
        self.d
    }
    fn param_dim(&self) -> usize {
        usize::from(self.obs_param)
    }
    fn x_star(&self) -> &[f64] {
        &self.x_star
    }
    fn check_params(&self, _theta: &[f64]) -> Result<()> {
        Ok(())
    }
    fn drift(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn sigma(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.d {
            out[j * self.d + j] = 1.0;
        }
    }
    fn apply_sigma(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out.copy_from_slice(v);
    }
    fn constant_diffusion(&self) -> bool {
        true
    }
    fn b(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn b_grad(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn b_hess(&self, _theta: &[f64], _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn obs_log_density(&self, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
        if self.flat_obs {
            return 0.0;
        }
        gaussian_obs_logdens(self.var(theta), x, y)
    }
    fn obs_log_density_grad(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        if self.obs_param && !self.flat_obs {
            gaussian_obs_grad(theta[0], 0, x, y, out)
        } else {
            out.fill(0.0)
        }
    }
    fn obs_log_density_hess(&self, theta: &[f64], x: &[f64], y: &[f64], out: &mut [f64]) {
        if self.obs_param && !self.flat_obs {
            gaussian_obs_hess(theta[0], 0, x, y, out)
        } else {
            out.fill(0.0)
        }
    }
    fn sample_observation(&self, theta: &[f64], x: &[f64], rng: &mut StreamRng, out: &mut [f64]) {
        gaussian_obs_sample(self.var(theta), x, rng, out)
    }
    fn affine_drift(&self, _theta: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0; self.d * self.d], vec![0.0; self.d]))
    }
    fn gaussian_obs_variance(&self, theta: &[f64]) -> Option<f64> {
        (!self.flat_obs).then(|| self.var(theta))
    }
}
