//! Discretized score and second-derivative functionals along a grid path.
//!
//! For a level-`l` path `x_0, ..., x_S` with observations at the grid indices
//! `p Δ_l^{-1}`:
//!
//! ```text
//! G^(i)  = Σ_p ∂_i log g(y_p | x_p) - Δ/2 Σ_k ∂_i ‖b(x_k)‖² + Σ_k ∂_i b(x_k)ᵀ M(x_k) (x_{k+1} - x_k)
//! H^(ij) = Σ_p ∂_ij log g(y_p | x_p) - Δ/2 Σ_k ∂_ij ‖b(x_k)‖² + Σ_k ∂_ij b(x_k)ᵀ M(x_k) (x_{k+1} - x_k)
//! ```
//!
//! where `M = Σ^{-1}σᵀ` and all b-terms are evaluated at left endpoints.

use serde::{Deserialize, Serialize};

use crate::discretization::{step_size, GridPath};
use crate::error::{invalid, Result};
use crate::model::{Model, Observations};

/// Number of unordered pairs `(i, j)`, `i ≤ j`, over `p` parameters.
pub fn pair_count(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Position of the pair `(i, j)`, `i ≤ j`, in the upper-triangular ordering
/// `(0,0), (0,1), ..., (0,p-1), (1,1), ...`.
pub fn pair_index(p: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * p - i * i.saturating_sub(1) / 2 + (j - i)
}

/// Per-path values of `G`, `G^(i) G^(j)` and `H^(ij)`, stored flat as
/// `[G | GG | H]` with the pair blocks in upper-triangular order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalBundle {
    params: usize,
    values: Vec<f64>,
}

impl FunctionalBundle {
    pub fn zeros(params: usize) -> Self {
        FunctionalBundle { params, values: vec![0.0; params + 2 * pair_count(params)] }
    }

    /// Bundle of a single path from its score and second-derivative values.
    pub fn from_parts(g: &[f64], h_upper: &[f64]) -> Self {
        let p = g.len();
        let mut values = Vec::with_capacity(p + 2 * pair_count(p));
        values.extend_from_slice(g);
        for i in 0..p {
            for j in i..p {
                values.push(g[i] * g[j]);
            }
        }
        values.extend_from_slice(h_upper);
        FunctionalBundle { params: p, values }
    }

    /// Bundle from flat `[G | GG | H]` values.
    pub fn from_slice(params: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), params + 2 * pair_count(params), "bundle length");
        FunctionalBundle { params, values: values.to_vec() }
    }

    pub fn params(&self) -> usize {
        self.params
    }

    pub fn g(&self) -> &[f64] {
        &self.values[..self.params]
    }

    pub fn gg(&self) -> &[f64] {
        let p = self.params;
        &self.values[p..p + pair_count(p)]
    }

    pub fn h(&self) -> &[f64] {
        let p = self.params;
        &self.values[p + pair_count(p)..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &FunctionalBundle) {
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
    }

    /// `self += other - other_bar`.
    pub fn add_difference(&mut self, other: &FunctionalBundle, other_bar: &FunctionalBundle) {
        for ((s, o), b) in self.values.iter_mut().zip(&other.values).zip(&other_bar.values) {
            *s += o - b;
        }
    }
}

fn check_inputs<M: Model + ?Sized>(model: &M, path: &GridPath, obs: &Observations) -> Result<()> {
    if path.dim() != model.state_dim() {
        return invalid("path dimension does not match the model");
    }
    if obs.dim() != model.obs_dim() {
        return invalid("observation dimension does not match the model");
    }
    if path.horizon() != obs.len() {
        return invalid(format!(
            "path covers T = {} but there are n = {} observations",
            path.horizon(),
            obs.len()
        ));
    }
    Ok(())
}

/// Σ_p log g_θ(y_p | x_p).
pub fn log_phi<M: Model + ?Sized>(model: &M, theta: &[f64], path: &GridPath, obs: &Observations) -> Result<f64> {
    check_inputs(model, path, obs)?;
    let spu = 1usize << path.level();
    Ok((0..obs.len())
        .map(|p| model.obs_log_density(theta, path.state((p + 1) * spu), obs.get(p)))
        .sum())
}

/// Discretized log-weight `log φ - Δ/2 Σ_k ‖b(x_k)‖² + Σ_k b(x_k)ᵀ M(x_k)(x_{k+1} - x_k)`;
/// its θ-derivatives are `G` and `H`.
pub fn log_rho<M: Model + ?Sized>(model: &M, theta: &[f64], path: &GridPath, obs: &Observations) -> Result<f64> {
    let mut total = log_phi(model, theta, path, obs)?;
    let d = model.state_dim();
    let dt = step_size(path.level());
    let (mut b, mut m, mut mdx) = (vec![0.0; d], vec![0.0; d * d], vec![0.0; d]);
    for k in 0..path.len() - 1 {
        let (x, xn) = (path.state(k), path.state(k + 1));
        model.b(theta, x, &mut b);
        model.girsanov_matrix(x, &mut m)?;
        apply_to_increment(&m, x, xn, &mut mdx);
        let norm: f64 = b.iter().map(|v| v * v).sum();
        let stoch: f64 = b.iter().zip(&mdx).map(|(u, v)| u * v).sum();
        total += -0.5 * dt * norm + stoch;
    }
    Ok(total)
}

#[inline]
fn apply_to_increment(m: &[f64], x: &[f64], xn: &[f64], out: &mut [f64]) {
    let d = x.len();
    for r in 0..d {
        let mut s = 0.0;
        for c in 0..d {
            s += m[r * d + c] * (xn[c] - x[c]);
        }
        out[r] = s;
    }
}

/// Score functional `G^l` of a path.
pub fn grad_log_rho<M: Model + ?Sized>(model: &M, theta: &[f64], path: &GridPath, obs: &Observations) -> Result<Vec<f64>> {
    Ok(evaluate(model, theta, path, obs, false)?.0)
}

/// Second-derivative functional `H^l` over pairs `i ≤ j`.
pub fn hess_log_rho<M: Model + ?Sized>(model: &M, theta: &[f64], path: &GridPath, obs: &Observations) -> Result<Vec<f64>> {
    Ok(evaluate(model, theta, path, obs, true)?.1)
}

/// All functionals of a path in one pass.
pub fn bundle<M: Model + ?Sized>(model: &M, theta: &[f64], path: &GridPath, obs: &Observations) -> Result<FunctionalBundle> {
    let (g, h) = evaluate(model, theta, path, obs, true)?;
    Ok(FunctionalBundle::from_parts(&g, &h))
}

/// Reusable buffers for [`bundle_into`].
pub(crate) struct Workspace {
    b: Vec<f64>,
    bg: Vec<f64>,
    bh: Vec<f64>,
    m: Vec<f64>,
    mdx: Vec<f64>,
    og: Vec<f64>,
    oh: Vec<f64>,
    g: Vec<f64>,
    h: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(d: usize, p: usize) -> Self {
        Workspace {
            b: vec![0.0; d],
            bg: vec![0.0; p * d],
            bh: vec![0.0; p * p * d],
            m: vec![0.0; d * d],
            mdx: vec![0.0; d],
            og: vec![0.0; p],
            oh: vec![0.0; p * p],
            g: vec![0.0; p],
            h: vec![0.0; p * p],
        }
    }
}

/// Core evaluation over a flat path slice (states `0..=S`) at `level`.
pub(crate) fn bundle_into<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    level: u32,
    states: &[f64],
    obs: &Observations,
    with_h: bool,
    ws: &mut Workspace,
) -> Result<()> {
    let (d, p) = (model.state_dim(), model.param_dim());
    let dt = step_size(level);
    let spu = 1usize << level;
    let steps = states.len() / d - 1;
    ws.g.fill(0.0);
    ws.h.fill(0.0);
    let constant = model.constant_diffusion();
    if constant {
        model.girsanov_matrix(&states[..d], &mut ws.m)?;
    }
    for k in 0..steps {
        let x = &states[k * d..(k + 1) * d];
        let xn = &states[(k + 1) * d..(k + 2) * d];
        if !constant {
            model.girsanov_matrix(x, &mut ws.m)?;
        }
        model.b(theta, x, &mut ws.b);
        model.b_grad(theta, x, &mut ws.bg);
        apply_to_increment(&ws.m, x, xn, &mut ws.mdx);
        for i in 0..p {
            let bgi = &ws.bg[i * d..(i + 1) * d];
            let mut dnorm = 0.0;
            let mut stoch = 0.0;
            for j in 0..d {
                dnorm += ws.b[j] * bgi[j];
                stoch += bgi[j] * ws.mdx[j];
            }
            // ∂_i ‖b‖² = 2 Σ_j b_j ∂_i b_j, so Δ/2 · ∂_i ‖b‖² = Δ Σ_j b_j ∂_i b_j.
            ws.g[i] += -dt * dnorm + stoch;
        }
        if with_h {
            model.b_hess(theta, x, &mut ws.bh);
            for i in 0..p {
                for kk in i..p {
                    let mut second = 0.0;
                    let mut stoch = 0.0;
                    for j in 0..d {
                        let bh = ws.bh[(i * p + kk) * d + j];
                        second += ws.bg[i * d + j] * ws.bg[kk * d + j] + ws.b[j] * bh;
                        stoch += bh * ws.mdx[j];
                    }
                    ws.h[i * p + kk] += -dt * second + stoch;
                }
            }
        }
    }
    for t in 0..obs.len() {
        let x = &states[(t + 1) * spu * d..((t + 1) * spu + 1) * d];
        let y = obs.get(t);
        model.obs_log_density_grad(theta, x, y, &mut ws.og);
        for i in 0..p {
            ws.g[i] += ws.og[i];
        }
        if with_h {
            model.obs_log_density_hess(theta, x, y, &mut ws.oh);
            for i in 0..p {
                for kk in i..p {
                    ws.h[i * p + kk] += ws.oh[i * p + kk];
                }
            }
        }
    }
    Ok(())
}

impl Workspace {
    pub(crate) fn h_upper(&self) -> Vec<f64> {
        let p = self.g.len();
        (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).map(|(i, j)| self.h[i * p + j]).collect()
    }
}

fn evaluate<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    path: &GridPath,
    obs: &Observations,
    with_h: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_inputs(model, path, obs)?;
    let mut ws = Workspace::new(model.state_dim(), model.param_dim());
    bundle_into(model, theta, path.level(), path.as_slice(), obs, with_h, &mut ws)?;
    Ok((ws.g.clone(), ws.h_upper()))
}
