//! Unbiased increments, the level randomization and the assembled score and
//! Hessian estimators.
//!
//! A replicate draws two independent levels `L, L̃ ~ P_L` and forms
//!
//! ```text
//! S  = Σ_{l ≤ L} Ξ^l / P̄_L(l)        (bundle of G, GG and H increments)
//! S̃ = Σ_{l ≤ L̃} Ξ̃^l(G) / P̄_L(l)   (independent chains, G only)
//! Ĥ^(ij) = S_G^(i) S̃_G^(j) - S_GG^(ij) - S_H^(ij)
//! ```
//!
//! Replicates run in parallel, each on streams derived from `(seed, k)`, and
//! are reduced in index order, so results do not depend on the worker count.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{CheckMeasure, PairCoupling};
use crate::cpf::{Cost, Filter, FilterConfig};
use crate::error::{invalid, Error, Result};
use crate::functionals::{bundle, pair_count, FunctionalBundle};
use crate::model::{check_obs, Model, Observations, Params};
use crate::rng::{self, tag, StreamRng};
use rand::Rng;

/// Highest level tabulated for the untruncated distributions; the mass beyond
/// it is below `2^{-128}`.
const UNTRUNCATED_TOP: u32 = 128;

/// Shape of the level distribution `P_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevelSpec {
    /// `P_L(l) ∝ Δ_l` for `l ≤ l_max`.
    Truncated { l_max: u32 },
    /// `P_L(l) ∝ Δ_l (l+1) log₂(2+l)²`, for constant diffusion coefficients.
    UntruncatedConstant,
    /// `P_L(l) ∝ Δ_l^{1/2} (l+1) log₂(2+l)²`.
    UntruncatedGeneral,
}

impl Default for LevelSpec {
    fn default() -> Self {
        LevelSpec::Truncated { l_max: 4 }
    }
}

/// Tabulated `P_L` with survival probabilities `P̄_L(l) = Σ_{p ≥ l} P_L(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelDistribution {
    spec: LevelSpec,
    probs: Vec<f64>,
    survival: Vec<f64>,
    cum: Vec<f64>,
}

impl LevelDistribution {
    pub fn new(spec: LevelSpec) -> Self {
        let weight = |l: u32| -> f64 {
            let dl = (-(l as f64)).exp2();
            let tail = (l as f64 + 1.0) * (2.0 + l as f64).log2().powi(2);
            match spec {
                LevelSpec::Truncated { .. } => dl,
                LevelSpec::UntruncatedConstant => dl * tail,
                LevelSpec::UntruncatedGeneral => dl.sqrt() * tail,
            }
        };
        let top = match spec {
            LevelSpec::Truncated { l_max } => l_max,
            _ => UNTRUNCATED_TOP,
        };
        let w: Vec<f64> = (0..=top).map(weight).collect();
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / total).collect();
        let mut survival = vec![0.0; probs.len()];
        let mut acc = 0.0;
        for l in (0..probs.len()).rev() {
            acc += probs[l];
            survival[l] = acc;
        }
        // Guard the head against rounding: P̄_L(0) = 1 by definition.
        survival[0] = 1.0;
        let cum = crate::coupling::cumulative(probs.iter().copied());
        LevelDistribution { spec, probs, survival, cum }
    }

    pub fn spec(&self) -> LevelSpec {
        self.spec
    }

    /// `P_L(l)`; zero beyond the table.
    pub fn prob(&self, l: u32) -> f64 {
        self.probs.get(l as usize).copied().unwrap_or(0.0)
    }

    pub fn survival(&self, l: u32) -> f64 {
        self.survival.get(l as usize).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn max_level(&self) -> u32 {
        (self.probs.len() - 1) as u32
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        crate::coupling::invert_cumulative(&self.cum, rng.random()) as u32
    }
}

/// Draws a level from `P_L`.
pub fn sample_level<R: Rng + ?Sized>(dist: &LevelDistribution, rng: &mut R) -> u32 {
    dist.sample(rng)
}

/// Estimator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub particles: usize,
    /// First chain iteration used in the estimates (`m* ≥ 2`).
    pub m_star: usize,
    pub levels: LevelSpec,
    pub replicates: usize,
    /// Chain iterations after which an unmet chain aborts the estimate.
    pub meeting_cap: usize,
    pub coupling: PairCoupling,
    pub check_measure: CheckMeasure,
    pub seed: u64,
    /// Worker threads; `None` uses the available parallelism.
    pub workers: Option<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            particles: 32,
            m_star: 2,
            levels: LevelSpec::default(),
            replicates: 100,
            meeting_cap: 100_000,
            coupling: PairCoupling::Inversion,
            check_measure: CheckMeasure::Joint,
            seed: 0,
            workers: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 {
            return invalid(format!("need at least 2 particles, got {}", self.particles));
        }
        if self.m_star < 2 {
            return invalid(format!("m_star must be at least 2, got {}", self.m_star));
        }
        if self.replicates < 1 {
            return invalid("need at least one replicate");
        }
        if self.meeting_cap <= self.m_star {
            return invalid("meeting cap must exceed m_star");
        }
        if self.workers == Some(0) {
            return invalid("worker count must be positive");
        }
        Ok(())
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig { particles: self.particles, coupling: self.coupling, check_measure: self.check_measure }
    }
}

/// One unbiased increment with its chain diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub bundle: FunctionalBundle,
    /// Meeting times (fine level, and coarse level for `l ≥ 1`).
    pub meeting: (usize, Option<usize>),
    /// Chain iterations run.
    pub iterations: usize,
    pub cost: Cost,
}

struct Accumulator {
    est: FunctionalBundle,
    tau: Option<usize>,
}

impl Accumulator {
    fn new(p: usize) -> Self {
        Accumulator { est: FunctionalBundle::zeros(p), tau: None }
    }

    /// Folds in iteration `m` of the chain given the state's functionals
    /// (evaluated lazily) and whether the pair has met.
    fn push(
        &mut self,
        m: usize,
        m_star: usize,
        met: bool,
        f: impl FnOnce() -> Result<FunctionalBundle>,
        f_bar: impl FnOnce() -> Result<FunctionalBundle>,
    ) -> Result<()> {
        if self.tau.is_none() && met {
            self.tau = Some(m);
        }
        if m == m_star {
            let v = f()?;
            self.est.axpy(1.0, &v);
        } else if m > m_star && self.tau.is_none() {
            let (v, vb) = (f()?, f_bar()?);
            self.est.add_difference(&v, &vb);
        }
        Ok(())
    }

    fn done(&self, m: usize, m_star: usize) -> bool {
        m >= m_star && self.tau.is_some()
    }
}

/// Single-level unbiased estimate `π̂^l(f)` from the same-level coupled chain;
/// at level 0 this is the increment `Ξ⁰`.
pub fn single_level_estimate<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    level: u32,
    config: &EstimatorConfig,
    rng: &mut StreamRng,
) -> Result<Increment> {
    let mut filter = Filter::new(model, theta, obs, config.filter_config())?;
    let p = model.param_dim();
    let mut state = filter.init_chain0(level, rng)?;
    let mut acc = Accumulator::new(p);
    let mut m = 0;
    while !acc.done(m, config.m_star) {
        if m >= config.meeting_cap {
            return Err(Error::MeetingCap { level, cap: config.meeting_cap });
        }
        m += 1;
        state = filter.ccpf_kernel0(&state, level, rng)?;
        let met = state.met();
        acc.push(
            m,
            config.m_star,
            met,
            || bundle(model, theta, &state.x, obs),
            || bundle(model, theta, &state.x_bar, obs),
        )?;
    }
    Ok(Increment { bundle: acc.est, meeting: (acc.tau.unwrap(), None), iterations: m, cost: filter.cost() })
}

/// `Ξ⁰`: the level-0 single-level estimate.
pub fn compute_xi0<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    config: &EstimatorConfig,
    rng: &mut StreamRng,
) -> Result<Increment> {
    single_level_estimate(model, theta, obs, 0, config, rng)
}

/// `Ξ^l = π̂^l(f^l) - π̂^{l-1}(f^{l-1})` from the cross-level coupled chain.
pub fn compute_xil<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    level: u32,
    config: &EstimatorConfig,
    rng: &mut StreamRng,
) -> Result<Increment> {
    if level == 0 {
        return invalid("compute_xil needs level >= 1");
    }
    let mut filter = Filter::new(model, theta, obs, config.filter_config())?;
    let p = model.param_dim();
    let mut state = filter.init_chainl(level, rng)?;
    let (mut fine, mut coarse) = (Accumulator::new(p), Accumulator::new(p));
    let mut m = 0;
    while !(fine.done(m, config.m_star) && coarse.done(m, config.m_star)) {
        if m >= config.meeting_cap {
            return Err(Error::MeetingCap { level, cap: config.meeting_cap });
        }
        m += 1;
        state = filter.cccpf_kernel(&state, level, rng)?;
        let (mf, mc) = (state.fine.met(), state.coarse.met());
        fine.push(
            m,
            config.m_star,
            mf,
            || bundle(model, theta, &state.fine.x, obs),
            || bundle(model, theta, &state.fine.x_bar, obs),
        )?;
        coarse.push(
            m,
            config.m_star,
            mc,
            || bundle(model, theta, &state.coarse.x, obs),
            || bundle(model, theta, &state.coarse.x_bar, obs),
        )?;
    }
    let mut est = fine.est;
    est.axpy(-1.0, &coarse.est);
    Ok(Increment { bundle: est, meeting: (fine.tau.unwrap(), coarse.tau), iterations: m, cost: filter.cost() })
}

/// `Ξ^l` at any level: `Ξ⁰` or the cross-level increment.
pub fn compute_increment<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    level: u32,
    config: &EstimatorConfig,
    rng: &mut StreamRng,
) -> Result<Increment> {
    if level == 0 {
        compute_xi0(model, theta, obs, config, rng)
    } else {
        compute_xil(model, theta, obs, level, config, rng)
    }
}

/// One replicate of the Hessian estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateTerm {
    /// `Ĥ^k` over pairs `i ≤ j`.
    pub hessian: Vec<f64>,
    /// The weighted score sum `S_G` of the main stream.
    pub score: Vec<f64>,
    pub levels: (u32, u32),
    pub cost: Cost,
}

fn weighted_sum<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    config: &EstimatorConfig,
    dist: &LevelDistribution,
    top: u32,
    seed_coords: [u64; 2],
    cost: &mut Cost,
) -> Result<FunctionalBundle> {
    let mut sum = FunctionalBundle::zeros(model.param_dim());
    for l in 0..=top {
        let mut rng = rng::stream(config.seed, &[seed_coords[0], seed_coords[1], l as u64]);
        let inc = compute_increment(model, theta, obs, l, config, &mut rng)?;
        cost.add(inc.cost);
        sum.axpy(1.0 / dist.survival(l), &inc.bundle);
    }
    Ok(sum)
}

/// Replicate `k` of the Hessian estimator.
pub fn hessian_replicate<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    config: &EstimatorConfig,
    dist: &LevelDistribution,
    k: u64,
) -> Result<ReplicateTerm> {
    let mut level_rng = rng::stream(config.seed, &[k, tag::LEVEL_DRAW]);
    let (l_main, l_tilde) = (dist.sample(&mut level_rng), dist.sample(&mut level_rng));
    let mut cost = Cost::default();
    let s = weighted_sum(model, theta, obs, config, dist, l_main, [k, tag::MAIN], &mut cost)?;
    let st = weighted_sum(model, theta, obs, config, dist, l_tilde, [k, tag::TILDE], &mut cost)?;
    let p = model.param_dim();
    let (g, gt, gg, h) = (s.g(), st.g(), s.gg(), s.h());
    let mut hessian = Vec::with_capacity(pair_count(p));
    let mut idx = 0;
    for i in 0..p {
        for j in i..p {
            hessian.push(g[i] * gt[j] - gg[idx] - h[idx]);
            idx += 1;
        }
    }
    Ok(ReplicateTerm { hessian, score: g.to_vec(), levels: (l_main, l_tilde), cost })
}

/// Aggregated Hessian estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianEstimate {
    /// Symmetric `d_θ × d_θ` matrix.
    pub mean: Vec<Vec<f64>>,
    pub std_err: Vec<Vec<f64>>,
    /// Score estimate from the main streams of the same replicates.
    pub score: Vec<f64>,
    pub score_std_err: Vec<f64>,
    pub replicates: usize,
    pub levels: Vec<(u32, u32)>,
    pub cost: Cost,
    #[serde(skip)]
    pub terms: Vec<Vec<f64>>,
}

/// Aggregated score estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub replicates: usize,
    pub levels: Vec<u32>,
    pub cost: Cost,
    #[serde(skip)]
    pub terms: Vec<Vec<f64>>,
}

/// Runs `f(k)` for `k = 0..count` on the configured worker pool and returns
/// the results in index order. After a failure no new replicates start, and
/// the error of the lowest-index failing replicate is returned.
pub(crate) fn run_replicates<T: Send>(
    workers: Option<usize>,
    count: usize,
    f: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let failed = AtomicBool::new(false);
    let run = || {
        (0..count)
            .into_par_iter()
            .map(|k| {
                if failed.load(Ordering::Relaxed) {
                    return None;
                }
                let r = f(k as u64);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                Some(r)
            })
            .collect::<Vec<_>>()
    };
    let results = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?
            .install(run),
        None => run(),
    };
    if !failed.into_inner() {
        return Ok(results
            .into_iter()
            .map(|r| match r {
                Some(Ok(v)) => v,
                _ => unreachable!("no replicate failed or was skipped"),
            })
            .collect());
    }
    let completed = results.iter().filter(|r| matches!(r, Some(Ok(_)))).count();
    let (index, source) = results
        .into_iter()
        .enumerate()
        .find_map(|(i, r)| match r {
            Some(Err(e)) => Some((i, e)),
            _ => None,
        })
        .expect("a replicate failed");
    Err(Error::Replicate { index, completed, source: Box::new(source) })
}

fn mean_and_se(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let m = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for r in rows {
        for (a, v) in mean.iter_mut().zip(r) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; width];
    if rows.len() > 1 {
        for r in rows {
            for ((a, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|a| *a /= m - 1.0);
    }
    (mean, var.iter().map(|v| (v / m).sqrt()).collect())
}

/// Expands an upper-triangular vector into a symmetric matrix.
pub fn symmetric_from_upper(p: usize, upper: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; p]; p];
    let mut idx = 0;
    for i in 0..p {
        for j in i..p {
            out[i][j] = upper[idx];
            out[j][i] = upper[idx];
            idx += 1;
        }
    }
    out
}

fn check_setup<M: Model + ?Sized>(model: &M, theta: &Params, obs: &Observations, config: &EstimatorConfig) -> Result<()> {
    config.validate()?;
    check_obs(model, obs)?;
    model.check_params(theta)?;
    if theta.len() != model.param_dim() {
        return invalid("parameter vector has the wrong length");
    }
    Ok(())
}

/// The unbiased Hessian estimator averaged over `config.replicates` replicates.
pub fn estimate_hessian<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    config: &EstimatorConfig,
) -> Result<HessianEstimate> {
    check_setup(model, theta, obs, config)?;
    let dist = LevelDistribution::new(config.levels);
    let terms = run_replicates(config.workers, config.replicates, |k| {
        hessian_replicate(model, theta, obs, config, &dist, k)
    })?;
    let p = model.param_dim();
    let rows: Vec<Vec<f64>> = terms.iter().map(|t| t.hessian.clone()).collect();
    let (mean, se) = mean_and_se(&rows, pair_count(p));
    let scores: Vec<Vec<f64>> = terms.iter().map(|t| t.score.clone()).collect();
    let (score, score_se) = mean_and_se(&scores, p);
    let mut cost = Cost::default();
    terms.iter().for_each(|t| cost.add(t.cost));
    Ok(HessianEstimate {
        mean: symmetric_from_upper(p, &mean),
        std_err: symmetric_from_upper(p, &se),
        score,
        score_std_err: score_se,
        replicates: config.replicates,
        levels: terms.iter().map(|t| t.levels).collect(),
        cost,
        terms: rows,
    })
}

/// The single-stream unbiased score estimator `Σ_{l ≤ L} Ξ^l(G) / P̄_L(l)`
/// averaged over replicates.
pub fn estimate_score<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    config: &EstimatorConfig,
) -> Result<ScoreEstimate> {
    check_setup(model, theta, obs, config)?;
    let dist = LevelDistribution::new(config.levels);
    let terms = run_replicates(config.workers, config.replicates, |k| {
        let mut level_rng = rng::stream(config.seed, &[k, tag::LEVEL_DRAW, tag::SCORE]);
        let level = dist.sample(&mut level_rng);
        let mut cost = Cost::default();
        let s = weighted_sum(model, theta, obs, config, &dist, level, [k, tag::SCORE], &mut cost)?;
        Ok((s.g().to_vec(), level, cost))
    })?;
    let p = model.param_dim();
    let rows: Vec<Vec<f64>> = terms.iter().map(|t| t.0.clone()).collect();
    let (mean, std_err) = mean_and_se(&rows, p);
    let mut cost = Cost::default();
    terms.iter().for_each(|t| cost.add(t.2));
    Ok(ScoreEstimate {
        mean,
        std_err,
        replicates: config.replicates,
        levels: terms.iter().map(|t| t.1).collect(),
        cost,
        terms: rows,
    })
}

/// `count` independent draws of the increment `Ξ^l`.
pub fn sample_increments<M: Model + ?Sized>(
    model: &M,
    theta: &Params,
    obs: &Observations,
    level: u32,
    count: usize,
    config: &EstimatorConfig,
) -> Result<Vec<Increment>> {
    check_setup(model, theta, obs, config)?;
    run_replicates(config.workers, count, |k| {
        let mut rng = rng::stream(config.seed, &[k, tag::MAIN, level as u64, 0xD1FF]);
        compute_increment(model, theta, obs, level, config, &mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpf::{CoupledPair, Filter};
    use crate::model::{simulate_observations, Ou1d};
    use crate::testutil::chi_square_p;

    fn setup(n: usize) -> (Ou1d, Params, Observations) {
        let model = Ou1d::default();
        let theta = Params::new(&model, vec![0.46, 0.38]).unwrap();
        let obs = simulate_observations(&model, &theta, 8, n, 3).unwrap().0;
        (model, theta, obs)
    }

    fn small_config() -> EstimatorConfig {
        EstimatorConfig { particles: 8, replicates: 6, levels: LevelSpec::Truncated { l_max: 2 }, seed: 9, ..Default::default() }
    }

    #[test]
    fn truncated_probabilities() {
        let d = LevelDistribution::new(LevelSpec::Truncated { l_max: 2 });
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (p, e) in d.probs().iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
        assert_eq!(d.survival(0), 1.0);
        assert!((d.survival(1) - 3.0 / 7.0).abs() < 1e-15);
        assert!((d.survival(2) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(d.prob(3), 0.0);
    }

    #[test]
    fn untruncated_weights() {
        let w = |l: f64| (-l).exp2() * (l + 1.0) * (2.0 + l).log2().powi(2);
        for (spec, half) in [(LevelSpec::UntruncatedConstant, false), (LevelSpec::UntruncatedGeneral, true)] {
            let d = LevelDistribution::new(spec);
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for l in 1..10u32 {
                let mut ratio = w(l as f64) / w(0.0);
                if half {
                    ratio /= (-(l as f64) / 2.0).exp2();
                }
                assert!((d.prob(l) / d.prob(0) - ratio).abs() < 1e-12 * ratio);
                assert!(d.survival(l) < d.survival(l - 1));
            }
        }
    }

    #[test]
    fn level_draw_frequencies() {
        let d = LevelDistribution::new(LevelSpec::Truncated { l_max: 5 });
        let mut rng = rng::stream(1, &[]);
        let mut counts = vec![0u64; 6];
        for _ in 0..100_000 {
            counts[sample_level(&d, &mut rng) as usize] += 1;
        }
        assert!(chi_square_p(&counts, d.probs()) > 1e-3);
    }

    #[test]
    fn config_validation() {
        let ok = EstimatorConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            EstimatorConfig { particles: 1, ..ok.clone() },
            EstimatorConfig { m_star: 1, ..ok.clone() },
            EstimatorConfig { replicates: 0, ..ok.clone() },
            EstimatorConfig { workers: Some(0), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
        }
    }

    // Replays the chain with the same stream and sums the estimator terms
    // directly from their definition.
    #[test]
    fn level_zero_increment_matches_a_replayed_chain() {
        let (model, theta, obs) = setup(4);
        let config = EstimatorConfig { particles: 6, m_star: 3, ..small_config() };
        for seed in 0..20 {
            let inc = compute_xi0(&model, &theta, &obs, &config, &mut rng::stream(seed, &[])).unwrap();
            let mut rng = rng::stream(seed, &[]);
            let mut filter = Filter::new(&model, &theta, &obs, config.filter_config()).unwrap();
            let mut chain: Vec<CoupledPair> = vec![filter.init_chain0(0, &mut rng).unwrap()];
            while chain.len() <= inc.iterations {
                let next = filter.ccpf_kernel0(chain.last().unwrap(), 0, &mut rng).unwrap();
                chain.push(next);
            }
            let tau = (1..chain.len()).find(|&m| chain[m].met()).unwrap();
            assert_eq!(tau, inc.meeting.0);
            assert_eq!(inc.iterations, tau.max(config.m_star));
            let f = |p| bundle(&model, &theta, p, &obs).unwrap();
            let mut expect = f(&chain[config.m_star].x);
            for m in config.m_star + 1..tau {
                expect.add_difference(&f(&chain[m].x), &f(&chain[m].x_bar));
            }
            assert_eq!(inc.bundle, expect);
        }
    }

    #[test]
    fn level_increment_matches_a_replayed_chain() {
        let (model, theta, obs) = setup(3);
        let config = EstimatorConfig { particles: 6, ..small_config() };
        for seed in 0..20 {
            let inc = compute_xil(&model, &theta, &obs, 2, &config, &mut rng::stream(seed, &[])).unwrap();
            let mut rng = rng::stream(seed, &[]);
            let mut filter = Filter::new(&model, &theta, &obs, config.filter_config()).unwrap();
            let mut chain = vec![filter.init_chainl(2, &mut rng).unwrap()];
            while chain.len() <= inc.iterations {
                let next = filter.cccpf_kernel(chain.last().unwrap(), 2, &mut rng).unwrap();
                chain.push(next);
            }
            let tf = (1..chain.len()).find(|&m| chain[m].fine.met()).unwrap();
            let tc = (1..chain.len()).find(|&m| chain[m].coarse.met()).unwrap();
            assert_eq!(inc.meeting, (tf, Some(tc)));
            let f = |p| bundle(&model, &theta, p, &obs).unwrap();
            let ms = config.m_star;
            let mut expect = f(&chain[ms].fine.x);
            for m in ms + 1..tf {
                expect.add_difference(&f(&chain[m].fine.x), &f(&chain[m].fine.x_bar));
            }
            expect.axpy(-1.0, &f(&chain[ms].coarse.x));
            for m in ms + 1..tc {
                expect.add_difference(&f(&chain[m].coarse.x_bar), &f(&chain[m].coarse.x));
            }
            for (a, b) in inc.bundle.as_slice().iter().zip(expect.as_slice()) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn meeting_cap_aborts() {
        let (model, theta, obs) = setup(30);
        let config = EstimatorConfig { particles: 2, meeting_cap: 3, ..small_config() };
        let err = compute_xi0(&model, &theta, &obs, &config, &mut rng::stream(0, &[])).unwrap_err();
        assert!(matches!(err, Error::MeetingCap { level: 0, cap: 3 }));
        match estimate_hessian(&model, &theta, &obs, &EstimatorConfig { workers: Some(1), ..config }).unwrap_err() {
            Error::Replicate { index: 0, completed: 0, source } => {
                assert!(matches!(*source, Error::MeetingCap { .. }))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn level_zero_replicate_uses_two_single_level_chains() {
        let (model, theta, obs) = setup(5);
        let config = EstimatorConfig { levels: LevelSpec::Truncated { l_max: 0 }, ..small_config() };
        let dist = LevelDistribution::new(config.levels);
        let term = hessian_replicate(&model, &theta, &obs, &config, &dist, 4).unwrap();
        assert_eq!(term.levels, (0, 0));
        let s = compute_xi0(&model, &theta, &obs, &config, &mut rng::stream(config.seed, &[4, tag::MAIN, 0])).unwrap();
        let t = compute_xi0(&model, &theta, &obs, &config, &mut rng::stream(config.seed, &[4, tag::TILDE, 0])).unwrap();
        let (g, gt) = (s.bundle.g(), t.bundle.g());
        let expect = [
            g[0] * gt[0] - s.bundle.gg()[0] - s.bundle.h()[0],
            g[0] * gt[1] - s.bundle.gg()[1] - s.bundle.h()[1],
            g[1] * gt[1] - s.bundle.gg()[2] - s.bundle.h()[2],
        ];
        assert_eq!(term.hessian, expect);
    }

    #[test]
    fn single_replicate_estimate_is_the_replicate() {
        let (model, theta, obs) = setup(5);
        let config = EstimatorConfig { replicates: 1, ..small_config() };
        let est = estimate_hessian(&model, &theta, &obs, &config).unwrap();
        let term =
            hessian_replicate(&model, &theta, &obs, &config, &LevelDistribution::new(config.levels), 0).unwrap();
        assert_eq!(est.mean, symmetric_from_upper(2, &term.hessian));
        assert_eq!(est.score, term.score);
        assert_eq!(est.std_err, vec![vec![0.0; 2]; 2]);
    }

    #[test]
    fn estimates_are_symmetric_and_reproducible() {
        let (model, theta, obs) = setup(5);
        let config = small_config();
        let a = estimate_hessian(&model, &theta, &obs, &config).unwrap();
        let b = estimate_hessian(&model, &theta, &obs, &EstimatorConfig { workers: Some(3), ..config.clone() }).unwrap();
        assert_eq!(a, b);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(a.mean[i][j].to_bits(), a.mean[j][i].to_bits());
                assert!(a.std_err[i][j] >= 0.0);
            }
        }
        let s = estimate_score(&model, &theta, &obs, &config).unwrap();
        assert_eq!(s, estimate_score(&model, &theta, &obs, &config).unwrap());
        assert_eq!(s.mean.len(), 2);
    }

    #[test]
    fn upper_triangle_expansion() {
        assert_eq!(
            symmetric_from_upper(3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 5.0], vec![3.0, 5.0, 6.0]]
        );
    }
}
