//! Conditional particle filter kernels and the coupled chains built on them.
//!
//! Ensembles store, for each observation time, one unit-time block of grid
//! states per particle plus the ancestor index of that particle; trajectories
//! are recovered by following ancestors backwards. The conditioned trajectory
//! always occupies the last slot and is its own ancestor.

use rand::Rng;

use crate::coupling::{cumulative, invert_cumulative, CheckMeasure, PairCoupling, Pmf, PreparedCoupling4, PreparedPair};
use crate::discretization::{
    euler_unit_step, euler_with_increments, fine_coarse_step, step_size, steps_per_unit, BrownianBlock, GridPath,
};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, Observations};
use crate::rng::StreamRng;

/// Particle filter settings shared by all kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub particles: usize,
    pub coupling: PairCoupling,
    pub check_measure: CheckMeasure,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { particles: 32, coupling: PairCoupling::Inversion, check_measure: CheckMeasure::Joint }
    }
}

/// Work counters: Euler steps simulated and resampling indices drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Cost {
    pub euler_steps: u64,
    pub resampling_draws: u64,
}

impl Cost {
    pub fn total(&self) -> u64 {
        self.euler_steps + self.resampling_draws
    }

    pub fn add(&mut self, other: Cost) {
        self.euler_steps += other.euler_steps;
        self.resampling_draws += other.resampling_draws;
    }
}

/// A pair of same-level trajectories driven towards each other.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub x: GridPath,
    pub x_bar: GridPath,
}

impl CoupledPair {
    /// True iff the two trajectories are bit-identical.
    pub fn met(&self) -> bool {
        self.x.as_slice().iter().zip(self.x_bar.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Coupled pairs at levels `l` and `l-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledLevels {
    pub fine: CoupledPair,
    pub coarse: CoupledPair,
}

struct Ensemble {
    d: usize,
    spu: usize,
    np: usize,
    blocks: Vec<f64>,
    anc: Vec<u32>,
}

impl Ensemble {
    fn new(level: u32, d: usize, n: usize, np: usize) -> Self {
        let spu = steps_per_unit(level);
        Ensemble { d, spu, np, blocks: vec![0.0; n * np * spu * d], anc: vec![0; n * np] }
    }

    fn block_len(&self) -> usize {
        self.spu * self.d
    }

    fn block_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let b = self.block_len();
        let off = (k * self.np + i) * b;
        &mut self.blocks[off..off + b]
    }

    fn endpoint(&self, k: usize, i: usize) -> &[f64] {
        let b = self.block_len();
        let off = (k * self.np + i) * b + b - self.d;
        &self.blocks[off..off + self.d]
    }

    /// Start state of particle `i` at time `k`: `x_star` or its ancestor's endpoint.
    fn start<'a>(&'a self, k: usize, i: usize, x_star: &'a [f64]) -> &'a [f64] {
        if k == 0 {
            x_star
        } else {
            self.endpoint(k - 1, self.anc[k * self.np + i] as usize)
        }
    }

    fn set_ancestor(&mut self, k: usize, i: usize, a: usize) {
        self.anc[k * self.np + i] = a as u32;
    }

    fn freeze(&mut self, k: usize, path: &GridPath) {
        let (b, last) = (self.block_len(), self.np - 1);
        let src = &path.as_slice()[(k * self.spu + 1) * self.d..(k * self.spu + 1) * self.d + b];
        self.block_mut(k, last).copy_from_slice(src);
        self.set_ancestor(k, last, last);
    }

    fn extract(&self, level: u32, n: usize, i: usize, x_star: &[f64]) -> GridPath {
        let b = self.block_len();
        let mut values = vec![0.0; n * b + self.d];
        values[..self.d].copy_from_slice(x_star);
        let mut idx = i;
        for k in (0..n).rev() {
            let off = (k * self.np + idx) * b;
            values[self.d + k * b..self.d + (k + 1) * b].copy_from_slice(&self.blocks[off..off + b]);
            idx = self.anc[k * self.np + idx] as usize;
        }
        GridPath::new(level, self.d, values).expect("ensemble paths have grid length")
    }
}

/// The kernels for one `(model, θ, observations)` triple.
pub struct Filter<'a, M: Model + ?Sized> {
    model: &'a M,
    theta: &'a [f64],
    obs: &'a Observations,
    config: FilterConfig,
    cost: Cost,
    log_w: Vec<f64>,
}

impl<'a, M: Model + ?Sized> Filter<'a, M> {
    pub fn new(model: &'a M, theta: &'a [f64], obs: &'a Observations, config: FilterConfig) -> Result<Self> {
        if config.particles < 2 {
            return invalid(format!("need at least 2 particles, got {}", config.particles));
        }
        if obs.dim() != model.obs_dim() {
            return invalid("observation dimension does not match the model");
        }
        if theta.len() != model.param_dim() {
            return invalid("parameter vector has the wrong length");
        }
        Ok(Filter { model, theta, obs, config, cost: Cost::default(), log_w: Vec::new() })
    }

    pub fn cost(&self) -> Cost {
        self.cost
    }

    fn n(&self) -> usize {
        self.obs.len()
    }

    fn check_path(&self, path: &GridPath, level: u32) -> Result<()> {
        if path.level() != level || path.dim() != self.model.state_dim() || path.horizon() != self.n() {
            return invalid(format!(
                "input path must be a level-{level} path over T = {} in dimension {}",
                self.n(),
                self.model.state_dim()
            ));
        }
        Ok(())
    }

    fn weights(&mut self, ens: &Ensemble, k: usize) -> Result<Vec<f64>> {
        self.log_w.clear();
        let y = self.obs.get(k);
        for i in 0..ens.np {
            let x = ens.endpoint(k, i);
            self.log_w.push(if x[0].is_nan() { f64::NEG_INFINITY } else { self.model.obs_log_density(self.theta, x, y) });
        }
        let mut w = Vec::with_capacity(ens.np);
        Pmf::normalize_log_into(&self.log_w, &mut w)?;
        Ok(w)
    }

    /// One application of the conditional particle filter at `level`.
    pub fn cpf_kernel(&mut self, input: &GridPath, level: u32, rng: &mut StreamRng) -> Result<GridPath> {
        self.check_path(input, level)?;
        let (d, n, np) = (self.model.state_dim(), self.n(), self.config.particles);
        let x_star = self.model.x_star();
        let mut ens = Ensemble::new(level, d, n, np);
        let mut block = BrownianBlock::new(level, d);
        let mut start = vec![0.0; d];
        for k in 0..n {
            for i in 0..np - 1 {
                start.copy_from_slice(ens.start(k, i, x_star));
                block.fill(rng);
                advance(self.model, self.theta, &start, block.increments(), step_size(level), ens.block_mut(k, i))?;
            }
            self.cost.euler_steps += ((np - 1) * ens.spu) as u64;
            ens.freeze(k, input);
            let w = self.weights(&ens, k)?;
            if k + 1 < n {
                let cum = cumulative(w.iter().copied());
                for i in 0..np - 1 {
                    ens.set_ancestor(k + 1, i, draw(&cum, rng));
                }
                self.cost.resampling_draws += (np - 1) as u64;
            } else {
                let i = draw(&cumulative(w.iter().copied()), rng);
                self.cost.resampling_draws += 1;
                return Ok(ens.extract(level, n, i, x_star));
            }
        }
        unreachable!("observation sequences are non-empty")
    }

    /// Coupled conditional particle filter on a pair of same-level paths.
    pub fn ccpf_kernel0(&mut self, state: &CoupledPair, level: u32, rng: &mut StreamRng) -> Result<CoupledPair> {
        self.check_path(&state.x, level)?;
        self.check_path(&state.x_bar, level)?;
        let (d, n, np) = (self.model.state_dim(), self.n(), self.config.particles);
        let x_star = self.model.x_star();
        let mut e = Ensemble::new(level, d, n, np);
        let mut eb = Ensemble::new(level, d, n, np);
        let mut block = BrownianBlock::new(level, d);
        let (mut s, mut sb) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..n {
            for i in 0..np - 1 {
                s.copy_from_slice(e.start(k, i, x_star));
                sb.copy_from_slice(eb.start(k, i, x_star));
                block.fill(rng);
                let dt = step_size(level);
                advance(self.model, self.theta, &s, block.increments(), dt, e.block_mut(k, i))?;
                advance(self.model, self.theta, &sb, block.increments(), dt, eb.block_mut(k, i))?;
            }
            self.cost.euler_steps += (2 * (np - 1) * e.spu) as u64;
            e.freeze(k, &state.x);
            eb.freeze(k, &state.x_bar);
            let pair = PreparedPair::from_weights(self.weights(&e, k)?, self.weights(&eb, k)?, self.config.coupling);
            if k + 1 < n {
                for i in 0..np - 1 {
                    let (a, ab) = pair.sample(rng);
                    e.set_ancestor(k + 1, i, a);
                    eb.set_ancestor(k + 1, i, ab);
                }
                self.cost.resampling_draws += (np - 1) as u64;
            } else {
                let (i, j) = pair.sample(rng);
                self.cost.resampling_draws += 1;
                return Ok(CoupledPair { x: e.extract(level, n, i, x_star), x_bar: eb.extract(level, n, j, x_star) });
            }
        }
        unreachable!("observation sequences are non-empty")
    }

    /// Coupled conditional particle filter across levels `l` and `l-1`:
    /// returns one fine and one coarse path.
    pub fn coupled_cpf_levels(
        &mut self,
        fine: &GridPath,
        coarse: &GridPath,
        level: u32,
        rng: &mut StreamRng,
    ) -> Result<(GridPath, GridPath)> {
        if level == 0 {
            return invalid("the cross-level filter needs level >= 1");
        }
        self.check_path(fine, level)?;
        self.check_path(coarse, level - 1)?;
        let (d, n, np) = (self.model.state_dim(), self.n(), self.config.particles);
        let x_star = self.model.x_star();
        let mut ef = Ensemble::new(level, d, n, np);
        let mut ec = Ensemble::new(level - 1, d, n, np);
        let mut block = BrownianBlock::new(level, d);
        let mut scratch = vec![0.0; ec.block_len()];
        let (mut sf, mut sc) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..n {
            for i in 0..np - 1 {
                sf.copy_from_slice(ef.start(k, i, x_star));
                sc.copy_from_slice(ec.start(k, i, x_star));
                block.fill(rng);
                block.coarse_into(&mut scratch);
                advance(self.model, self.theta, &sf, block.increments(), step_size(level), ef.block_mut(k, i))?;
                advance(self.model, self.theta, &sc, &scratch, step_size(level - 1), ec.block_mut(k, i))?;
            }
            self.cost.euler_steps += ((np - 1) * (ef.spu + ec.spu)) as u64;
            ef.freeze(k, fine);
            ec.freeze(k, coarse);
            let pair = PreparedPair::from_weights(self.weights(&ef, k)?, self.weights(&ec, k)?, self.config.coupling);
            if k + 1 < n {
                for i in 0..np - 1 {
                    let (a, ac) = pair.sample(rng);
                    ef.set_ancestor(k + 1, i, a);
                    ec.set_ancestor(k + 1, i, ac);
                }
                self.cost.resampling_draws += (np - 1) as u64;
            } else {
                let (i, j) = pair.sample(rng);
                self.cost.resampling_draws += 1;
                return Ok((ef.extract(level, n, i, x_star), ec.extract(level - 1, n, j, x_star)));
            }
        }
        unreachable!("observation sequences are non-empty")
    }

    /// The coupled-CCPF kernel on a fine pair at `level` and a coarse pair at
    /// `level - 1`.
    pub fn cccpf_kernel(&mut self, state: &CoupledLevels, level: u32, rng: &mut StreamRng) -> Result<CoupledLevels> {
        if level == 0 {
            return invalid("the coupled-CCPF kernel needs level >= 1");
        }
        self.check_path(&state.fine.x, level)?;
        self.check_path(&state.fine.x_bar, level)?;
        self.check_path(&state.coarse.x, level - 1)?;
        self.check_path(&state.coarse.x_bar, level - 1)?;
        let (d, n, np) = (self.model.state_dim(), self.n(), self.config.particles);
        let x_star = self.model.x_star();
        let mut ef = Ensemble::new(level, d, n, np);
        let mut efb = Ensemble::new(level, d, n, np);
        let mut ec = Ensemble::new(level - 1, d, n, np);
        let mut ecb = Ensemble::new(level - 1, d, n, np);
        let mut block = BrownianBlock::new(level, d);
        let mut scratch = vec![0.0; ec.block_len()];
        let mut starts = vec![0.0; d];
        for k in 0..n {
            for i in 0..np - 1 {
                block.fill(rng);
                block.coarse_into(&mut scratch);
                let (df, dc) = (step_size(level), step_size(level - 1));
                let inc = block.increments();
                starts.copy_from_slice(ef.start(k, i, x_star));
                advance(self.model, self.theta, &starts, inc, df, ef.block_mut(k, i))?;
                starts.copy_from_slice(efb.start(k, i, x_star));
                advance(self.model, self.theta, &starts, inc, df, efb.block_mut(k, i))?;
                starts.copy_from_slice(ec.start(k, i, x_star));
                advance(self.model, self.theta, &starts, &scratch, dc, ec.block_mut(k, i))?;
                starts.copy_from_slice(ecb.start(k, i, x_star));
                advance(self.model, self.theta, &starts, &scratch, dc, ecb.block_mut(k, i))?;
            }
            self.cost.euler_steps += (2 * (np - 1) * (ef.spu + ec.spu)) as u64;
            ef.freeze(k, &state.fine.x);
            efb.freeze(k, &state.fine.x_bar);
            ec.freeze(k, &state.coarse.x);
            ecb.freeze(k, &state.coarse.x_bar);
            let (r1, r2) = (self.weights(&ef, k)?, self.weights(&ec, k)?);
            let (r3, r4) = (self.weights(&efb, k)?, self.weights(&ecb, k)?);
            let four = PreparedCoupling4::from_slices(
                [&r1, &r2, &r3, &r4],
                self.config.coupling,
                self.config.check_measure,
            )?;
            if k + 1 < n {
                for i in 0..np - 1 {
                    let [a1, a2, a3, a4] = four.sample(rng)?;
                    ef.set_ancestor(k + 1, i, a1);
                    ec.set_ancestor(k + 1, i, a2);
                    efb.set_ancestor(k + 1, i, a3);
                    ecb.set_ancestor(k + 1, i, a4);
                }
                self.cost.resampling_draws += (np - 1) as u64;
            } else {
                let [i1, i2, i3, i4] = four.sample(rng)?;
                self.cost.resampling_draws += 1;
                return Ok(CoupledLevels {
                    fine: CoupledPair {
                        x: ef.extract(level, n, i1, x_star),
                        x_bar: efb.extract(level, n, i3, x_star),
                    },
                    coarse: CoupledPair {
                        x: ec.extract(level - 1, n, i2, x_star),
                        x_bar: ecb.extract(level - 1, n, i4, x_star),
                    },
                });
            }
        }
        unreachable!("observation sequences are non-empty")
    }

    /// A level-`l` path drawn from the Euler dynamics started at `x_star`,
    /// conditioned on staying inside the divergence bound: diverged draws are
    /// discarded, up to `PRIOR_ATTEMPTS` times.
    pub fn prior_path(&mut self, level: u32, rng: &mut StreamRng) -> Result<GridPath> {
        retry_divergence(|| self.prior_path_once(level, rng))
    }

    fn prior_path_once(&mut self, level: u32, rng: &mut StreamRng) -> Result<GridPath> {
        let (d, n) = (self.model.state_dim(), self.n());
        let spu = steps_per_unit(level);
        let mut values = vec![0.0; (n * spu + 1) * d];
        values[..d].copy_from_slice(self.model.x_star());
        let mut block = BrownianBlock::new(level, d);
        let mut start = vec![0.0; d];
        for k in 0..n {
            start.copy_from_slice(&values[k * spu * d..(k * spu + 1) * d]);
            block.fill(rng);
            euler_unit_step(self.model, self.theta, &start, &block, &mut values[(k * spu + 1) * d..((k + 1) * spu + 1) * d])?;
        }
        self.cost.euler_steps += (n * spu) as u64;
        GridPath::new(level, d, values)
    }

    /// A fine/coarse pair of prior paths sharing Brownian increments, redrawn
    /// like [`Filter::prior_path`] when either path diverges.
    pub fn prior_pair(&mut self, level: u32, rng: &mut StreamRng) -> Result<(GridPath, GridPath)> {
        if level == 0 {
            return invalid("a fine/coarse prior pair needs level >= 1");
        }
        retry_divergence(|| self.prior_pair_once(level, rng))
    }

    fn prior_pair_once(&mut self, level: u32, rng: &mut StreamRng) -> Result<(GridPath, GridPath)> {
        let (d, n) = (self.model.state_dim(), self.n());
        let (sf, sc) = (steps_per_unit(level), steps_per_unit(level - 1));
        let mut fine = vec![0.0; (n * sf + 1) * d];
        let mut coarse = vec![0.0; (n * sc + 1) * d];
        fine[..d].copy_from_slice(self.model.x_star());
        coarse[..d].copy_from_slice(self.model.x_star());
        let mut block = BrownianBlock::new(level, d);
        let mut scratch = vec![0.0; sc * d];
        let (mut a, mut b) = (vec![0.0; d], vec![0.0; d]);
        for k in 0..n {
            a.copy_from_slice(&fine[k * sf * d..(k * sf + 1) * d]);
            b.copy_from_slice(&coarse[k * sc * d..(k * sc + 1) * d]);
            block.fill(rng);
            let (fo, co) = (
                &mut fine[(k * sf + 1) * d..((k + 1) * sf + 1) * d],
                &mut coarse[(k * sc + 1) * d..((k + 1) * sc + 1) * d],
            );
            fine_coarse_step(self.model, self.theta, &a, &b, &block, &mut scratch, fo, co)?;
        }
        self.cost.euler_steps += (n * (sf + sc)) as u64;
        Ok((GridPath::new(level, d, fine)?, GridPath::new(level - 1, d, coarse)?))
    }

    /// Initial state of the same-level coupled chain: `X(0)` is a CPF move from
    /// one prior path, `X̄(0)` is an independent prior path.
    pub fn init_chain0(&mut self, level: u32, rng: &mut StreamRng) -> Result<CoupledPair> {
        let x_prior = self.prior_path(level, rng)?;
        let x_bar = self.prior_path(level, rng)?;
        let x = self.cpf_kernel(&x_prior, level, rng)?;
        Ok(CoupledPair { x, x_bar })
    }

    /// Initial state of the cross-level coupled chain: the unbarred pair is a
    /// cross-level CPF move from a coupled prior pair, the barred pair is an
    /// independent coupled prior pair.
    pub fn init_chainl(&mut self, level: u32, rng: &mut StreamRng) -> Result<CoupledLevels> {
        let (xf, xc) = self.prior_pair(level, rng)?;
        let (xfb, xcb) = self.prior_pair(level, rng)?;
        let (f, c) = self.coupled_cpf_levels(&xf, &xc, level, rng)?;
        Ok(CoupledLevels { fine: CoupledPair { x: f, x_bar: xfb }, coarse: CoupledPair { x: c, x_bar: xcb } })
    }
}

/// Redraws of a diverged prior path before giving up.
pub const PRIOR_ATTEMPTS: usize = 1000;

fn retry_divergence<T>(mut draw: impl FnMut() -> Result<T>) -> Result<T> {
    let mut last = None;
    for _ in 0..PRIOR_ATTEMPTS {
        match draw() {
            Err(e @ Error::Divergence { .. }) => last = Some(e),
            r => return r,
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Euler recursion for one free particle. A particle that crosses the
/// divergence bound is marked dead (NaN states, zero weight) rather than
/// aborting the sweep: its observation density is zero to working precision.
fn advance<M: Model + ?Sized>(model: &M, theta: &[f64], x0: &[f64], incs: &[f64], dt: f64, out: &mut [f64]) -> Result<()> {
    if x0[0].is_nan() {
        out.fill(f64::NAN);
        return Ok(());
    }
    match euler_with_increments(model, theta, x0, incs, dt, out) {
        Err(Error::Divergence { .. }) => {
            out.fill(f64::NAN);
            Ok(())
        }
        r => r,
    }
}

fn draw<R: Rng + ?Sized>(cum: &[f64], rng: &mut R) -> usize {
    invert_cumulative(cum, rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::grad_log_rho;
    use crate::model::{simulate_observations, BuiltinModel, Ou1d, Params};
    use crate::rng::stream;
    use crate::stats::{batch_means_se, mean};
    use crate::testutil::{chi_square_p, random_path, ZeroDrift};

    const OU_THETA: [f64; 2] = [0.46, 0.38];

    fn ou_data(n: usize, seed: u64) -> Observations {
        simulate_observations(&Ou1d::default(), &Params::new(&Ou1d::default(), OU_THETA.to_vec()).unwrap(), 8, n, seed).unwrap().0
    }

    fn config(particles: usize) -> FilterConfig {
        FilterConfig { particles, ..FilterConfig::default() }
    }

    #[test]
    fn frozen_slot_returns_the_input_path() {
        let mut rng = stream(1, &[]);
        let (level, d, n, np) = (2, 2, 4, 5);
        let input = random_path(&mut rng, level, d, n);
        let mut ens = Ensemble::new(level, d, n, np);
        for (i, v) in ens.blocks.iter_mut().enumerate() {
            *v = i as f64;
        }
        for k in 0..n {
            ens.freeze(k, &input);
            for i in 0..np - 1 {
                ens.set_ancestor(k, i, (i + k) % np);
            }
        }
        let x_star = &input.as_slice()[..d];
        assert_eq!(ens.extract(level, n, np - 1, x_star), input);
    }

    #[test]
    fn too_few_particles_is_an_error() {
        let model = Ou1d::default();
        let obs = ou_data(2, 0);
        assert!(Filter::new(&model, &OU_THETA, &obs, config(1)).is_err());
    }

    #[test]
    fn flat_observations_select_uniformly() {
        let mut model = ZeroDrift::new(1);
        model.flat_obs = true;
        let obs = Observations::new(1, vec![0.0]).unwrap();
        let np = 5;
        let mut filter = Filter::new(&model, &[], &obs, config(np)).unwrap();
        let mut rng = stream(2, &[]);
        let input = filter.prior_path(3, &mut rng).unwrap();
        let trials = 20_000;
        let mut kept = 0u64;
        for _ in 0..trials {
            let out = filter.cpf_kernel(&input, 3, &mut rng).unwrap();
            assert_eq!(out.as_slice()[0], 0.0);
            if out == input {
                kept += 1;
            }
        }
        let p = 1.0 / np as f64;
        let p_value = chi_square_p(&[kept, trials - kept], &[p, 1.0 - p]);
        assert!(p_value > 1e-3, "frozen slot chosen {kept} / {trials} times");
    }

    #[test]
    fn exploding_particles_get_zero_weight() {
        let model = BuiltinModel::by_name("fhn").unwrap();
        let preset = Params::new(&model, model.preset_theta()).unwrap();
        let mut th = model.preset_theta();
        th[0] *= 4.0;
        let theta = Params::new(&model, th).unwrap();
        let obs = Observations::new(2, vec![0.0; 2 * 8]).unwrap();
        let mut rng = stream(4, &[]);
        let mut start = Filter::new(&model, &preset, &obs, config(32)).unwrap();
        let mut x = start.prior_path(2, &mut rng).unwrap();
        let mut xb = start.prior_path(2, &mut rng).unwrap();
        let mut filter = Filter::new(&model, &theta, &obs, config(32)).unwrap();
        for _ in 0..200 {
            x = filter.cpf_kernel(&x, 2, &mut rng).unwrap();
            let pair = filter.ccpf_kernel0(&CoupledPair { x: x.clone(), x_bar: xb }, 2, &mut rng).unwrap();
            xb = pair.x_bar;
            assert!(x.as_slice().iter().chain(xb.as_slice()).all(|v| v.is_finite()));
        }
    }

    #[test]
    fn equal_inputs_give_equal_outputs() {
        let model = BuiltinModel::by_name("fhn").unwrap();
        let theta = Params::new(&model, model.preset_theta()).unwrap();
        let obs = simulate_observations(&model, &theta, 6, 3, 5).unwrap().0;
        let mut filter = Filter::new(&model, &theta, &obs, config(6)).unwrap();
        let mut rng = stream(3, &[]);
        for _ in 0..200 {
            let p = filter.prior_path(0, &mut rng).unwrap();
            let out = filter.ccpf_kernel0(&CoupledPair { x: p.clone(), x_bar: p }, 0, &mut rng).unwrap();
            assert!(out.met());
            let (f, c) = filter.prior_pair(2, &mut rng).unwrap();
            let state = CoupledLevels {
                fine: CoupledPair { x: f.clone(), x_bar: f },
                coarse: CoupledPair { x: c.clone(), x_bar: c },
            };
            let out = filter.cccpf_kernel(&state, 2, &mut rng).unwrap();
            assert!(out.fine.met() && out.coarse.met());
        }
    }

    #[test]
    fn chains_meet_and_stay_met() {
        let model = Ou1d::default();
        let obs = ou_data(5, 11);
        let mut filter = Filter::new(&model, &OU_THETA, &obs, config(16)).unwrap();
        for run in 0..100 {
            let mut rng = stream(4, &[run]);
            let mut state = filter.init_chain0(0, &mut rng).unwrap();
            let mut met_at = None;
            for m in 1..=1000 {
                state = filter.ccpf_kernel0(&state, 0, &mut rng).unwrap();
                match (met_at, state.met()) {
                    (None, true) => met_at = Some(m),
                    (Some(_), false) => panic!("pair separated after meeting"),
                    _ => {}
                }
                if met_at.is_some_and(|t| m >= t + 20) {
                    break;
                }
            }
            assert!(met_at.is_some(), "run {run} did not meet by iteration 1000");
        }
    }

    #[test]
    fn level_chains_meet_and_stay_met() {
        let model = Ou1d::default();
        let obs = ou_data(5, 12);
        let mut filter = Filter::new(&model, &OU_THETA, &obs, config(16)).unwrap();
        for run in 0..100 {
            let mut rng = stream(5, &[run]);
            let mut state = filter.init_chainl(2, &mut rng).unwrap();
            let (mut fine_at, mut coarse_at) = (None, None);
            for m in 1..=2000 {
                state = filter.cccpf_kernel(&state, 2, &mut rng).unwrap();
                for (at, met) in [(&mut fine_at, state.fine.met()), (&mut coarse_at, state.coarse.met())] {
                    match (*at, met) {
                        (None, true) => *at = Some(m),
                        (Some(_), false) => panic!("pair separated after meeting"),
                        _ => {}
                    }
                }
                if fine_at.is_some() && coarse_at.is_some() {
                    break;
                }
            }
            assert!(fine_at.is_some() && coarse_at.is_some(), "run {run} did not meet by iteration 2000");
        }
    }

    #[test]
    fn initial_states_keep_the_barred_prior_draw() {
        let model = Ou1d::default();
        let obs = ou_data(3, 13);
        let mut filter = Filter::new(&model, &OU_THETA, &obs, config(8)).unwrap();

        let mut rng = stream(6, &[]);
        let state = filter.init_chain0(1, &mut rng).unwrap();
        let mut replay = stream(6, &[]);
        let x_prior = filter.prior_path(1, &mut replay).unwrap();
        let x_bar = filter.prior_path(1, &mut replay).unwrap();
        assert_eq!(state.x_bar, x_bar);
        assert_ne!(state.x, x_prior);
        assert_eq!(filter.init_chain0(1, &mut stream(6, &[])).unwrap(), state);

        let mut rng = stream(7, &[]);
        let state = filter.init_chainl(2, &mut rng).unwrap();
        let mut replay = stream(7, &[]);
        filter.prior_pair(2, &mut replay).unwrap();
        let (fb, cb) = filter.prior_pair(2, &mut replay).unwrap();
        assert_eq!((state.fine.x_bar.clone(), state.coarse.x_bar.clone()), (fb, cb));
        assert_eq!(filter.init_chainl(2, &mut stream(7, &[])).unwrap(), state);
    }

    #[test]
    fn prior_pairs_share_noise() {
        let model = ZeroDrift::new(2);
        let obs = Observations::new(2, vec![0.0; 6]).unwrap();
        let mut filter = Filter::new(&model, &[], &obs, config(4)).unwrap();
        let (f, c) = filter.prior_pair(3, &mut stream(8, &[])).unwrap();
        for k in 0..=3 {
            let (a, b) = (f.state(k * 8), c.state(k * 4));
            for j in 0..2 {
                assert!((a[j] - b[j]).abs() < 1e-12);
            }
        }
    }

    // The fine output of the cross-level filter must leave the level-l
    // smoother invariant, like the plain CPF does.
    #[test]
    fn cross_level_fine_marginal_matches_cpf() {
        let model = Ou1d::default();
        let obs = ou_data(3, 14);
        let level = 1;
        let sweeps = 10_000;
        let mut filter = Filter::new(&model, &OU_THETA, &obs, config(8)).unwrap();
        let mut rng = stream(9, &[]);

        let mut x = filter.prior_path(level, &mut rng).unwrap();
        let mut plain = Vec::with_capacity(sweeps);
        for _ in 0..sweeps {
            x = filter.cpf_kernel(&x, level, &mut rng).unwrap();
            plain.push(grad_log_rho(&model, &OU_THETA, &x, &obs).unwrap()[0]);
        }
        let (mut f, mut c) = filter.prior_pair(level, &mut rng).unwrap();
        let mut crossed = Vec::with_capacity(sweeps);
        for _ in 0..sweeps {
            (f, c) = filter.coupled_cpf_levels(&f, &c, level, &mut rng).unwrap();
            crossed.push(grad_log_rho(&model, &OU_THETA, &f, &obs).unwrap()[0]);
        }
        let se = batch_means_se(&plain, 50).hypot(batch_means_se(&crossed, 50));
        let diff = mean(&plain[100..]) - mean(&crossed[100..]);
        assert!(diff.abs() < 3.0 * se, "diff {diff}, se {se}");
    }
}
