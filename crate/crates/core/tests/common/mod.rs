#![allow(dead_code)]

use ccpf_hessian::model::{simulate_observations, BuiltinModel, Model, Observations, Params};
use ccpf_hessian::GridPath;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Upper-tail p-value of Pearson's statistic; cells with zero expected mass
/// must have zero counts.
pub fn chi_square_p(counts: &[u64], probs: &[f64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&c, &p) in counts.iter().zip(probs) {
        if p <= 1e-15 {
            if c > 0 {
                return 0.0;
            }
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

pub fn central_diff(theta: &[f64], i: usize, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut up = theta.to_vec();
    let mut down = theta.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

pub fn random_path(rng: &mut impl Rng, level: u32, d: usize, n: usize) -> GridPath {
    let states = n * (1 << level) + 1;
    let v = (0..states * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    GridPath::new(level, d, v).unwrap()
}

/// A built-in model at `theta` with `n` observations simulated on a fine grid.
pub fn setup(name: &str, theta: &[f64], n: usize, seed: u64) -> (BuiltinModel, Params, Observations) {
    let model = BuiltinModel::by_name(name).unwrap();
    let theta = Params::new(&model, theta.to_vec()).unwrap();
    let obs = simulate_observations(&model, &theta, 10, n, seed).unwrap().0;
    assert_eq!(obs.dim(), model.state_dim());
    (model, theta, obs)
}

pub const OU_THETA: [f64; 2] = [0.46, 0.38];
pub const MOU_THETA: [f64; 4] = [0.48, 0.78, 0.37, 0.32];
