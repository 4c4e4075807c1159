//! Reference values for linear-Gaussian models and small problems: Kalman
//! log-likelihoods, finite-difference derivatives and brute-force smoothing
//! expectations of the functional bundle.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::discretization::{euler_unit_step, steps_per_unit, BrownianBlock, GridPath};
use crate::error::{invalid, Error, Result};
use crate::functionals::{bundle, log_phi, FunctionalBundle};
use crate::model::{Model, Observations};
use crate::rng;

/// Linear-Gaussian state space model
/// `X_t = A X_{t-1} + c + N(0, Q)`, `Y_t = X_t + N(0, r I)`, `X_0 = x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSpec {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub transition_cov: DMatrix<f64>,
    pub obs_var: f64,
    pub x0: DVector<f64>,
}

/// How the unit-time transition of an affine model is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// The exact law of the SDE over one time unit.
    Exact,
    /// `2^level` composed Euler steps.
    Euler(u32),
}

fn affine_parts<M: Model + ?Sized>(model: &M, theta: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, f64)> {
    let d = model.state_dim();
    let (Some((j, c)), Some(r), true) =
        (model.affine_drift(theta), model.gaussian_obs_variance(theta), model.constant_diffusion())
    else {
        return invalid(format!("model {} has no linear-Gaussian form", model.name()));
    };
    if model.obs_dim() != d {
        return invalid("linear-Gaussian oracle needs the full state observed");
    }
    let mut s = vec![0.0; d * d];
    model.sigma(model.x_star(), &mut s);
    let s = DMatrix::from_row_slice(d, d, &s);
    Ok((DMatrix::from_row_slice(d, d, &j), DVector::from_vec(c), &s * s.transpose(), r))
}

impl LinearGaussianSpec {
    pub fn new(
        transition: DMatrix<f64>,
        offset: DVector<f64>,
        transition_cov: DMatrix<f64>,
        obs_var: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let d = x0.len();
        if transition.shape() != (d, d) || transition_cov.shape() != (d, d) || offset.len() != d {
            return invalid("linear-Gaussian spec has inconsistent dimensions");
        }
        if !(obs_var > 0.0) {
            return Err(Error::Domain { name: "obs_var".into(), value: obs_var, constraint: "> 0".into() });
        }
        if (0..d).any(|i| transition_cov[(i, i)] < 0.0) {
            return invalid("transition covariance has a negative diagonal");
        }
        Ok(LinearGaussianSpec { transition, offset, transition_cov, obs_var, x0 })
    }

    /// Exact unit-time transition of `dX = (J X + c) dt + σ dW`, from the
    /// matrix exponentials `exp([[J, c], [0, 0]])` and
    /// `exp([[-J, σσ^T], [0, J^T]])`.
    pub fn exact<M: Model + ?Sized>(model: &M, theta: &[f64]) -> Result<Self> {
        model.check_params(theta)?;
        let d = model.state_dim();
        let (j, c, s, r) = affine_parts(model, theta)?;
        let mut aug = DMatrix::zeros(d + 1, d + 1);
        aug.view_mut((0, 0), (d, d)).copy_from(&j);
        aug.view_mut((0, d), (d, 1)).copy_from(&c);
        let e = aug.exp();
        let a = e.view((0, 0), (d, d)).into_owned();
        let offset = e.view((0, d), (d, 1)).column(0).into_owned();

        let mut vl = DMatrix::zeros(2 * d, 2 * d);
        vl.view_mut((0, 0), (d, d)).copy_from(&(-&j));
        vl.view_mut((0, d), (d, d)).copy_from(&s);
        vl.view_mut((d, d), (d, d)).copy_from(&j.transpose());
        let e = vl.exp();
        let phi = e.view((d, d), (d, d)).transpose();
        let q = &phi * e.view((0, d), (d, d));
        let q = (&q + q.transpose()) * 0.5;
        Self::new(a, offset, q, r, DVector::from_column_slice(model.x_star()))
    }

    /// Transition of `2^level` Euler steps of size `2^{-level}`.
    pub fn euler<M: Model + ?Sized>(model: &M, theta: &[f64], level: u32) -> Result<Self> {
        model.check_params(theta)?;
        let d = model.state_dim();
        let (j, c, s, r) = affine_parts(model, theta)?;
        let dt = (-(level as f64)).exp2();
        let f = DMatrix::identity(d, d) + &j * dt;
        let (mut a, mut o, mut q) = (DMatrix::identity(d, d), DVector::zeros(d), DMatrix::zeros(d, d));
        for _ in 0..steps_per_unit(level) {
            a = &f * a;
            o = &f * o + &c * dt;
            q = &f * q * f.transpose() + &s * dt;
        }
        Self::new(a, o, q, r, DVector::from_column_slice(model.x_star()))
    }

    pub fn for_model<M: Model + ?Sized>(model: &M, theta: &[f64], transition: Transition) -> Result<Self> {
        match transition {
            Transition::Exact => Self::exact(model, theta),
            Transition::Euler(l) => Self::euler(model, theta, l),
        }
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }
}

/// Exact marginal log-likelihood `log p(y_1..y_n)` by the Kalman filter.
pub fn kalman_loglik(spec: &LinearGaussianSpec, obs: &Observations) -> Result<f64> {
    let d = spec.dim();
    if obs.dim() != d {
        return invalid("observation dimension does not match the state dimension");
    }
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut m = spec.x0.clone();
    let mut p = DMatrix::<f64>::zeros(d, d);
    let mut ll = 0.0;
    for t in 0..obs.len() {
        m = &spec.transition * m + &spec.offset;
        p = &spec.transition * p * spec.transition.transpose() + &spec.transition_cov;
        let s = &p + DMatrix::identity(d, d) * spec.obs_var;
        let chol = s
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("innovation covariance at t = {}", t + 1)))?;
        let v = DVector::from_column_slice(obs.get(t)) - &m;
        let sv = chol.solve(&v);
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        ll -= 0.5 * (d as f64 * ln_2pi + log_det + v.dot(&sv));
        let k = &p * chol.inverse();
        m += &k * v;
        p = (DMatrix::identity(d, d) - &k) * &p;
        p = (&p + p.transpose()) * 0.5;
    }
    Ok(ll)
}

/// Kalman log-likelihood of an affine model's observations.
pub fn model_loglik<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    obs: &Observations,
    transition: Transition,
) -> Result<f64> {
    kalman_loglik(&LinearGaussianSpec::for_model(model, theta, transition)?, obs)
}

/// Central-difference gradient and symmetric Hessian of `f` at `theta`.
pub fn fd_grad_hess(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = theta.len();
    let at = |shifts: &[(usize, f64)]| {
        let mut t = theta.to_vec();
        for &(i, s) in shifts {
            t[i] += s;
        }
        f(&t)
    };
    let f0 = f(theta);
    let mut grad = vec![0.0; p];
    let mut hess = vec![vec![0.0; p]; p];
    for i in 0..p {
        let (up, down) = (at(&[(i, h)]), at(&[(i, -h)]));
        grad[i] = (up - down) / (2.0 * h);
        hess[i][i] = (up - 2.0 * f0 + down) / (h * h);
        for j in 0..i {
            let v = (at(&[(i, h), (j, h)]) - at(&[(i, h), (j, -h)]) - at(&[(i, -h), (j, h)])
                + at(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    (grad, hess)
}

/// Fourth-order central-difference gradient.
pub fn fd_gradient4(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let at = |s: f64| {
                let mut t = theta.to_vec();
                t[i] += s * h;
                f(&t)
            };
            (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h)
        })
        .collect()
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Step of the fourth-order gradient used for likelihood maximization.
pub const FD_GRADIENT_STEP: f64 = 1e-3;

/// Oracle score and Hessian `𝔥 = -∇² log p` of an affine model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleDerivatives {
    pub loglik: f64,
    pub score: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

/// Finite differences of the Kalman log-likelihood: the score from the
/// fourth-order stencil, `𝔥` as minus the central-difference Hessian.
pub fn oracle_derivatives<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    obs: &Observations,
    transition: Transition,
) -> Result<OracleDerivatives> {
    let loglik = model_loglik(model, theta, obs, transition)?;
    // Surface evaluation failures (for example a step leaving the domain)
    // instead of differencing NaNs.
    let failure = std::sync::Mutex::new(None);
    let f = |t: &[f64]| match model_loglik(model, t, obs, transition) {
        Ok(v) => v,
        Err(e) => {
            failure.lock().unwrap().get_or_insert(e);
            f64::NAN
        }
    };
    let (_, h) = fd_grad_hess(f, theta, FD_STEP);
    let score = fd_gradient4(f, theta, FD_GRADIENT_STEP);
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let hessian = h.into_iter().map(|row| row.into_iter().map(|v| -v).collect()).collect();
    Ok(OracleDerivatives { loglik, score, hessian })
}

/// How smoothing expectations are computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentMethod {
    /// Tensor-product Gauss–Hermite quadrature over the Brownian increments,
    /// with `nodes` points per dimension.
    Quadrature { nodes: usize },
    /// Self-normalized importance sampling with prior proposals.
    MonteCarlo { samples: usize, seed: u64 },
}

/// `π^l(G^l)`, `π^l(G^l G^l)` and `π^l(H^l)` in bundle layout, with
/// delta-method standard errors for Monte Carlo.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMoments {
    pub values: FunctionalBundle,
    pub std_err: Option<FunctionalBundle>,
}

/// Gauss–Hermite nodes and weights for the standard normal, by the
/// Golub–Welsch eigenvalue method; weights sum to one.
pub fn gauss_hermite(nodes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = DMatrix::zeros(nodes, nodes);
    for k in 1..nodes {
        let b = (k as f64).sqrt();
        jac[(k - 1, k)] = b;
        jac[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> =
        (0..nodes).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Largest quadrature dimension accepted.
const MAX_QUADRATURE_DIM: usize = 6;

/// Smoothing expectations of the functional bundle under the level-`l`
/// discretized target, by quadrature or importance sampling over prior
/// Euler paths.
pub fn discrete_target_moments<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    obs: &Observations,
    level: u32,
    method: MomentMethod,
) -> Result<TargetMoments> {
    model.check_params(theta)?;
    let (d, n) = (model.state_dim(), obs.len());
    let spu = steps_per_unit(level);
    let dim = n * spu * d;
    let dt = (-(level as f64)).exp2();
    let path_from = |xi: &[f64]| -> Result<GridPath> {
        let mut values = vec![0.0; (n * spu + 1) * d];
        values[..d].copy_from_slice(model.x_star());
        let mut start = vec![0.0; d];
        for k in 0..n {
            let block = BrownianBlock::from_increments(
                level,
                d,
                xi[k * spu * d..(k + 1) * spu * d].iter().map(|z| z * dt.sqrt()).collect(),
            )?;
            start.copy_from_slice(&values[k * spu * d..(k * spu + 1) * d]);
            euler_unit_step(model, theta, &start, &block, &mut values[(k * spu + 1) * d..((k + 1) * spu + 1) * d])?;
        }
        GridPath::new(level, d, values)
    };
    // Weighted samples (log weight, bundle).
    let mut samples: Vec<(f64, FunctionalBundle)> = Vec::new();
    match method {
        MomentMethod::Quadrature { nodes } => {
            if dim > MAX_QUADRATURE_DIM || nodes < 2 {
                return invalid(format!("quadrature over {dim} dimensions with {nodes} nodes is not supported"));
            }
            let (z, w) = gauss_hermite(nodes);
            let total = nodes.pow(dim as u32);
            let mut xi = vec![0.0; dim];
            for idx in 0..total {
                let (mut rest, mut lw) = (idx, 0.0);
                for x in xi.iter_mut() {
                    *x = z[rest % nodes];
                    lw += w[rest % nodes].ln();
                    rest /= nodes;
                }
                let path = path_from(&xi)?;
                samples.push((lw + log_phi(model, theta, &path, obs)?, bundle(model, theta, &path, obs)?));
            }
        }
        MomentMethod::MonteCarlo { samples: count, seed } => {
            if count < 2 {
                return invalid("Monte Carlo moments need at least 2 samples");
            }
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rng::stream(seed, &[]);
            let mut xi = vec![0.0; dim];
            for _ in 0..count {
                xi.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                let path = path_from(&xi)?;
                samples.push((log_phi(model, theta, &path, obs)?, bundle(model, theta, &path, obs)?));
            }
        }
    }
    let max = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = samples.iter().map(|s| (s.0 - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let p = model.param_dim();
    let mut values = FunctionalBundle::zeros(p);
    for (wi, (_, b)) in w.iter().zip(&samples) {
        values.axpy(wi / total, b);
    }
    let std_err = match method {
        MomentMethod::Quadrature { .. } => None,
        MomentMethod::MonteCarlo { .. } => {
            let mut var = vec![0.0; values.len()];
            for (wi, (_, b)) in w.iter().zip(&samples) {
                let wn = wi / total;
                for ((v, x), mu) in var.iter_mut().zip(b.as_slice()).zip(values.as_slice()) {
                    *v += wn * wn * (x - mu) * (x - mu);
                }
            }
            let se: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            Some(FunctionalBundle::from_slice(p, &se))
        }
    };
    Ok(TargetMoments { values, std_err })
}

/// `𝔥^l = π(G)π(G)^T - π(GG) - π(H)` from smoothing moments.
pub fn hessian_from_moments(m: &FunctionalBundle) -> Vec<Vec<f64>> {
    let p = m.params();
    let (g, gg, h) = (m.g(), m.gg(), m.h());
    let mut out = vec![vec![0.0; p]; p];
    let mut idx = 0;
    for i in 0..p {
        for j in i..p {
            let v = g[i] * g[j] - gg[idx] - h[idx];
            out[i][j] = v;
            out[j][i] = v;
            idx += 1;
        }
    }
    out
}
