//! Euler–Maruyama kernels over one unit of time.
//!
//! At level `l` the step is `Δ_l = 2^{-l}` and one unit interval holds `2^l`
//! steps. Coupled kernels share one fine [`BrownianBlock`]; coarse chains use
//! the pairwise sums of the fine increments with step `Δ_{l-1}`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::model::Model;

/// States with any component above this magnitude abort the computation.
pub const DIVERGENCE_BOUND: f64 = 1e12;

pub fn step_size(level: u32) -> f64 {
    (-(level as f64)).exp2()
}

pub fn steps_per_unit(level: u32) -> usize {
    1usize << level
}

/// A level-`l` trajectory on the grid `{0, Δ_l, ..., T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    level: u32,
    dim: usize,
    values: Vec<f64>,
}

impl GridPath {
    pub fn new(level: u32, dim: usize, values: Vec<f64>) -> Result<Self> {
        let spu = steps_per_unit(level);
        if dim == 0 || values.len() % dim != 0 {
            return invalid("path length is not a multiple of the state dimension");
        }
        let states = values.len() / dim;
        if states < 1 + spu || (states - 1) % spu != 0 {
            return invalid(format!(
                "a level-{level} path needs 1 + k*{spu} states, got {states}"
            ));
        }
        Ok(GridPath { level, dim, values })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of grid states, `Δ_l^{-1} T + 1`.
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Time horizon `T`.
    pub fn horizon(&self) -> usize {
        (self.len() - 1) >> self.level
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Brownian increments for one unit of time at a given level.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBlock {
    level: u32,
    dim: usize,
    increments: Vec<f64>,
}

impl BrownianBlock {
    pub fn new(level: u32, dim: usize) -> Self {
        BrownianBlock {
            level,
            dim,
            increments: vec![0.0; steps_per_unit(level) * dim],
        }
    }

    pub fn from_increments(level: u32, dim: usize, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != steps_per_unit(level) * dim {
            return invalid("increment count does not match the level");
        }
        Ok(BrownianBlock { level, dim, increments })
    }

    /// Redraws all increments as i.i.d. `N(0, Δ_l I)`.
    pub fn fill<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let s = step_size(self.level).sqrt();
        for v in &mut self.increments {
            let z: f64 = rng.sample(StandardNormal);
            *v = s * z;
        }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Writes the level `l-1` increments `V_{2k-1} + V_{2k}` into `out`.
    pub fn coarse_into(&self, out: &mut [f64]) {
        let d = self.dim;
        for (k, o) in out.chunks_exact_mut(d).enumerate() {
            let a = &self.increments[2 * k * d..(2 * k + 1) * d];
            let b = &self.increments[(2 * k + 1) * d..(2 * k + 2) * d];
            for j in 0..d {
                o[j] = a[j] + b[j];
            }
        }
    }

    pub fn coarse(&self) -> Result<BrownianBlock> {
        if self.level == 0 {
            return invalid("a level-0 block has no coarser level");
        }
        let mut inc = vec![0.0; self.increments.len() / 2];
        self.coarse_into(&mut inc);
        Ok(BrownianBlock { level: self.level - 1, dim: self.dim, increments: inc })
    }
}

/// Euler recursion from `x0` with the given increments and step `dt`, writing
/// every intermediate state (excluding `x0`) into `out`.
#[inline]
pub(crate) fn euler_with_increments<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x0: &[f64],
    increments: &[f64],
    dt: f64,
    out: &mut [f64],
) -> Result<()> {
    let d = x0.len();
    debug_assert_eq!(increments.len(), out.len());
    let mut a = [0.0f64; 8];
    let mut sv = [0.0f64; 8];
    let mut heap_a;
    let mut heap_sv;
    let (a, sv): (&mut [f64], &mut [f64]) = if d <= 8 {
        (&mut a[..d], &mut sv[..d])
    } else {
        heap_a = vec![0.0; d];
        heap_sv = vec![0.0; d];
        (&mut heap_a, &mut heap_sv)
    };
    let steps = increments.len() / d;
    for k in 0..steps {
        let (prev, cur) = if k == 0 {
            (x0, &mut out[..d])
        } else {
            let (head, tail) = out.split_at_mut(k * d);
            (&head[(k - 1) * d..], &mut tail[..d])
        };
        model.drift(theta, prev, a);
        model.apply_sigma(prev, &increments[k * d..(k + 1) * d], sv);
        for j in 0..d {
            let v = prev[j] + a[j] * dt + sv[j];
            if !(v.abs() <= DIVERGENCE_BOUND) {
                return Err(Error::Divergence { value: v, bound: DIVERGENCE_BOUND });
            }
            cur[j] = v;
        }
    }
    Ok(())
}

/// Applies `X_{kΔ} = X_{(k-1)Δ} + a_θ(X_{(k-1)Δ})Δ + σ(X_{(k-1)Δ})V_{kΔ}` for
/// `k = 1..Δ^{-1}` and writes the `Δ^{-1}` new states into `out`.
pub fn euler_unit_step<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x0: &[f64],
    block: &BrownianBlock,
    out: &mut [f64],
) -> Result<()> {
    if x0.len() != model.state_dim() || block.dim != x0.len() {
        return invalid("start state and block dimensions do not match the model");
    }
    if out.len() != block.increments.len() {
        return invalid("output buffer does not match the block length");
    }
    euler_with_increments(model, theta, x0, &block.increments, step_size(block.level), out)
}

/// Two chains at the same level driven by one block.
pub fn coupled_pair_step<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x0: &[f64],
    xbar0: &[f64],
    block: &BrownianBlock,
    out: &mut [f64],
    out_bar: &mut [f64],
) -> Result<()> {
    euler_unit_step(model, theta, x0, block, out)?;
    euler_unit_step(model, theta, xbar0, block, out_bar)
}

/// Start states and output buffers of the four chains advanced by
/// [`coupled_level_step`]: fine pair at level `l`, coarse pair at level `l-1`.
pub struct FourChains<'a> {
    pub fine: &'a mut [f64],
    pub fine_bar: &'a mut [f64],
    pub coarse: &'a mut [f64],
    pub coarse_bar: &'a mut [f64],
}

/// Advances the fine pair with the increments of `block` and the coarse pair
/// with their pairwise sums. `starts` is `[x^l, x̄^l, x^{l-1}, x̄^{l-1}]`;
/// `coarse_scratch` must hold `2^{l-1} d` values.
#[allow(clippy::too_many_arguments)]
pub fn coupled_level_step<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    starts: [&[f64]; 4],
    block: &BrownianBlock,
    coarse_scratch: &mut [f64],
    out: FourChains<'_>,
) -> Result<()> {
    let l = block.level;
    if l == 0 {
        return invalid("the fine/coarse kernel needs level >= 1");
    }
    block.coarse_into(coarse_scratch);
    let (df, dc) = (step_size(l), step_size(l - 1));
    euler_with_increments(model, theta, starts[0], &block.increments, df, out.fine)?;
    euler_with_increments(model, theta, starts[1], &block.increments, df, out.fine_bar)?;
    euler_with_increments(model, theta, starts[2], coarse_scratch, dc, out.coarse)?;
    euler_with_increments(model, theta, starts[3], coarse_scratch, dc, out.coarse_bar)
}

/// Fine/coarse pair of the two-chain kernel (the unbarred half of
/// [`coupled_level_step`]).
pub fn fine_coarse_step<M: Model + ?Sized>(
    model: &M,
    theta: &[f64],
    x_fine: &[f64],
    x_coarse: &[f64],
    block: &BrownianBlock,
    coarse_scratch: &mut [f64],
    out_fine: &mut [f64],
    out_coarse: &mut [f64],
) -> Result<()> {
    let l = block.level;
    if l == 0 {
        return invalid("the fine/coarse kernel needs level >= 1");
    }
    block.coarse_into(coarse_scratch);
    euler_with_increments(model, theta, x_fine, &block.increments, step_size(l), out_fine)?;
    euler_with_increments(model, theta, x_coarse, coarse_scratch, step_size(l - 1), out_coarse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Ou1d};
    use crate::rng::stream;
    use crate::testutil::ZeroDrift;

    #[test]
    fn pure_noise_accumulates() {
        let m = ZeroDrift::new(2);
        let mut rng = stream(1, &[]);
        let mut block = BrownianBlock::new(3, 2);
        block.fill(&mut rng);
        let mut out = vec![0.0; 16];
        euler_unit_step(&m, &[], &[0.5, -1.0], &block, &mut out).unwrap();
        let mut sum = [0.5, -1.0];
        for k in 0..8 {
            sum[0] += block.increments()[2 * k];
            sum[1] += block.increments()[2 * k + 1];
        }
        assert!((out[14] - sum[0]).abs() < 1e-14 && (out[15] - sum[1]).abs() < 1e-14);
    }

    #[test]
    fn ou_single_step() {
        let m = Ou1d::new(1.3, 1.0);
        let block = BrownianBlock::from_increments(0, 1, vec![0.7]).unwrap();
        let mut out = [0.0];
        euler_unit_step(&m, &[0.46, 0.38], &[2.0], &block, &mut out).unwrap();
        assert_eq!(out[0], 2.0 + (-0.46 * 2.0) * 1.0 + 1.3 * 0.7);
        assert!((out[0] - (2.0 * (1.0 - 0.46) + 1.3 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_reported() {
        let m = Ou1d::default();
        let block = BrownianBlock::from_increments(0, 1, vec![0.0]).unwrap();
        let mut out = [0.0];
        let r = euler_unit_step(&m, &[-1e13, 0.38], &[1.0], &block, &mut out);
        assert!(matches!(r, Err(Error::Divergence { .. })));
        let r = euler_unit_step(&m, &[0.4, 0.38], &[f64::NAN], &block, &mut out);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn coupled_pair_contracts_ou_difference() {
        let m = Ou1d::default();
        let mut rng = stream(2, &[]);
        for l in 0..5 {
            let mut block = BrownianBlock::new(l, 1);
            block.fill(&mut rng);
            let n = steps_per_unit(l);
            let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
            coupled_pair_step(&m, &[0.46, 0.38], &[1.0], &[-0.5], &block, &mut a, &mut b).unwrap();
            let dt = step_size(l);
            let expect = 1.5 * (1.0 - 0.46 * dt).abs().powf(1.0 / dt);
            assert!(((a[n - 1] - b[n - 1]).abs() - expect).abs() < 1e-12);
            let (mut c, mut e) = (vec![0.0; n], vec![0.0; n]);
            coupled_pair_step(&m, &[0.46, 0.38], &[0.3], &[0.3], &block, &mut c, &mut e).unwrap();
            assert_eq!(c, e);
            let mut single = vec![0.0; n];
            euler_unit_step(&m, &[0.46, 0.38], &[1.0], &block, &mut single).unwrap();
            assert_eq!(single, a);
        }
    }

    #[test]
    fn coarse_increments_are_pairwise_sums() {
        let mut rng = stream(3, &[]);
        let mut block = BrownianBlock::new(4, 2);
        block.fill(&mut rng);
        let c = block.coarse().unwrap();
        assert_eq!(c.level(), 3);
        for k in 0..8 {
            for j in 0..2 {
                let s = block.increments()[4 * k + j] + block.increments()[4 * k + 2 + j];
                assert_eq!(c.increments()[2 * k + j], s);
            }
        }
        assert!(BrownianBlock::new(0, 1).coarse().is_err());
    }

    #[test]
    fn level_step_telescopes_without_drift() {
        let m = ZeroDrift::new(1);
        let mut rng = stream(4, &[]);
        let mut block = BrownianBlock::new(3, 1);
        block.fill(&mut rng);
        let (mut f, mut fb, mut c, mut cb) = (vec![0.0; 8], vec![0.0; 8], vec![0.0; 4], vec![0.0; 4]);
        let mut scratch = vec![0.0; 4];
        let x = [0.25];
        coupled_level_step(
            &m,
            &[],
            [&x, &x, &x, &x],
            &block,
            &mut scratch,
            FourChains { fine: &mut f, fine_bar: &mut fb, coarse: &mut c, coarse_bar: &mut cb },
        )
        .unwrap();
        assert!((f[7] - c[3]).abs() < 1e-14);
        let total: f64 = 0.25 + block.increments().iter().sum::<f64>();
        assert!((f[7] - total).abs() < 1e-14);
        assert_eq!(f, fb);
        assert_eq!(c, cb);
    }

    #[test]
    fn coupled_marginal_matches_single_chain_statistics() {
        let m = Ou1d::default();
        let th = [0.46, 0.38];
        let draws = 100_000;
        let mut rng = stream(5, &[]);
        let (mut s1, mut q1, mut s2, mut q2) = (0.0, 0.0, 0.0, 0.0);
        let mut block = BrownianBlock::new(2, 1);
        let (mut a, mut b, mut c) = ([0.0; 4], [0.0; 4], [0.0; 4]);
        for _ in 0..draws {
            block.fill(&mut rng);
            coupled_pair_step(&m, &th, &[1.0], &[-1.0], &block, &mut a, &mut b).unwrap();
            s1 += a[3];
            q1 += a[3] * a[3];
            block.fill(&mut rng);
            euler_unit_step(&m, &th, &[1.0], &block, &mut c).unwrap();
            s2 += c[3];
            q2 += c[3] * c[3];
        }
        let nf = draws as f64;
        let (m1, m2) = (s1 / nf, s2 / nf);
        let (v1, v2) = (q1 / nf - m1 * m1, q2 / nf - m2 * m2);
        let se = ((v1 + v2) / nf).sqrt();
        assert!((m1 - m2).abs() < 3.0 * se);
        // Variance of a sample variance for Gaussian data is 2σ⁴/n.
        let se_v = (2.0 * (v1 * v1 + v2 * v2) / nf).sqrt();
        assert!((v1 - v2).abs() < 3.0 * se_v);
        let _ = m.state_dim();
    }

    #[test]
    fn strong_error_between_levels_is_first_order() {
        let m = Ou1d::default();
        let th = [0.46, 0.38];
        let samples = 100_000;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for l in 3..=7u32 {
            let mut rng = stream(6, &[l as u64]);
            let mut block = BrownianBlock::new(l, 1);
            let n = steps_per_unit(l);
            let (mut f, mut c, mut scratch) = (vec![0.0; n], vec![0.0; n / 2], vec![0.0; n / 2]);
            let mut acc = 0.0;
            for _ in 0..samples {
                block.fill(&mut rng);
                fine_coarse_step(&m, &th, &[1.0], &[1.0], &block, &mut scratch, &mut f, &mut c)
                    .unwrap();
                acc += (f[n - 1] - c[n / 2 - 1]).powi(2);
            }
            xs.push(step_size(l).ln());
            // Root-mean-square difference: additive noise gives strong order 1.
            ys.push((acc / samples as f64).sqrt().ln());
        }
        let slope = crate::stats::ols_slope(&xs, &ys);
        assert!((0.8..=1.2).contains(&slope), "slope {slope}");
    }
}
