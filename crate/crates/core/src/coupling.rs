//! Couplings of probability mass functions on `{0, ..., N-1}`.
//!
//! Pair couplings come in two flavours: the maximal coupling with independent
//! residual draws, and the variant that inverts both residual CDFs with one
//! shared uniform. The four-way sampler couples two such pair couplings, and
//! uses a conditional (rejection) sampler when two of the four PMFs coincide.
//!
//! The particle filters sample many indices from the same PMFs, so every
//! sampler has a prepared form that precomputes the cumulative tables once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Iteration cap of the rejection loops.
pub const REJECTION_CAP: u64 = 10_000_000;

/// Overlap masses above this are treated as identical PMFs.
const FULL_OVERLAP: f64 = 1.0 - 1e-14;

/// A normalized weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    w: Vec<f64>,
}

impl Pmf {
    /// Normalizes non-negative weights.
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return invalid("a PMF needs at least one index");
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("PMF weights must be finite and non-negative");
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return invalid("PMF weights sum to zero");
        }
        Ok(Pmf { w: weights.iter().map(|w| w / total).collect() })
    }

    /// Normalizes `exp(log_weights)` with the log-sum-exp shift.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        let mut w = Vec::with_capacity(log_weights.len());
        Self::normalize_log_into(log_weights, &mut w)?;
        Ok(Pmf { w })
    }

    pub(crate) fn normalize_log_into(log_weights: &[f64], out: &mut Vec<f64>) -> Result<()> {
        if log_weights.is_empty() {
            return invalid("a PMF needs at least one index");
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() || log_weights.iter().any(|v| v.is_nan()) {
            return invalid("log-weights are all -inf or contain NaN/+inf");
        }
        out.clear();
        out.extend(log_weights.iter().map(|v| (v - max).exp()));
        let total: f64 = out.iter().sum();
        out.iter_mut().for_each(|v| *v /= total);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        invert(&self.w, u)
    }
}

/// Index `i` with `u` in the `i`-th cell of the weights (which need not be
/// normalized). Zero-mass cells are never returned.
fn invert(weights: &[f64], u: f64) -> usize {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if target < acc {
                return i;
            }
        }
    }
    last
}

/// Inverse CDF over a cumulative table ending at the total mass.
pub(crate) fn invert_cumulative(cum: &[f64], u: f64) -> usize {
    let total = *cum.last().unwrap();
    let target = u * total;
    let i = cum.partition_point(|&c| c <= target);
    if i < cum.len() {
        return i;
    }
    // Rounding put the target on the last edge: take the last positive cell.
    (0..cum.len())
        .rev()
        .find(|&i| cum[i] > if i == 0 { 0.0 } else { cum[i - 1] })
        .unwrap_or(cum.len() - 1)
}

pub(crate) fn cumulative(w: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    w.map(|v| {
        acc += v;
        acc
    })
    .collect()
}

/// How the residual part of a pair coupling is sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairCoupling {
    /// Independent draws from the two residual PMFs.
    Maximal,
    /// Both residual CDFs inverted at one shared uniform.
    #[default]
    Inversion,
}

/// Joint mass function used as the check measure of the four-way sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMeasure {
    /// The joint PMF of the pair coupling actually sampled.
    #[default]
    Joint,
    /// `min(r^a, r'^b) + (r^a - min(r^a, r'^a))(r'^b - min(r^b, r'^b)) / (1 - r̄)`,
    /// with no indicator on the first term.
    Printed,
}

/// A pair coupling of `(r1, r2)` with precomputed tables.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    kind: PairCoupling,
    r1: Vec<f64>,
    r2: Vec<f64>,
    overlap_cum: Vec<f64>,
    res1_cum: Vec<f64>,
    res2_cum: Vec<f64>,
    overlap: f64,
}

impl PreparedPair {
    pub fn new(r1: &Pmf, r2: &Pmf, kind: PairCoupling) -> Result<Self> {
        Self::from_slices(r1.as_slice(), r2.as_slice(), kind)
    }

    fn from_slices(r1: &[f64], r2: &[f64], kind: PairCoupling) -> Result<Self> {
        if r1.len() != r2.len() {
            return invalid(format!("PMFs over {} and {} indices", r1.len(), r2.len()));
        }
        let mins = r1.iter().zip(r2).map(|(a, b)| a.min(*b));
        let overlap_cum = cumulative(mins);
        let overlap = *overlap_cum.last().unwrap();
        let res1_cum = cumulative(r1.iter().zip(r2).map(|(a, b)| (a - a.min(*b)).max(0.0)));
        let res2_cum = cumulative(r1.iter().zip(r2).map(|(a, b)| (b - a.min(*b)).max(0.0)));
        Ok(PreparedPair {
            kind,
            r1: r1.to_vec(),
            r2: r2.to_vec(),
            overlap_cum,
            res1_cum,
            res2_cum,
            overlap,
        })
    }

    pub(crate) fn from_weights(r1: Vec<f64>, r2: Vec<f64>, kind: PairCoupling) -> Self {
        Self::from_slices(&r1, &r2, kind).expect("weights over the same particle set")
    }

    /// `Σ_k min(r1^k, r2^k)`.
    pub fn overlap(&self) -> f64 {
        self.overlap
    }

    fn full_overlap(&self) -> bool {
        self.overlap >= FULL_OVERLAP || *self.res1_cum.last().unwrap() <= 0.0
            || *self.res2_cum.last().unwrap() <= 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u: f64 = rng.random();
        if self.full_overlap() || u < self.overlap {
            let v: f64 = rng.random();
            let i = invert_cumulative(&self.overlap_cum, v);
            return (i, i);
        }
        match self.kind {
            PairCoupling::Maximal => {
                let (a, b): (f64, f64) = (rng.random(), rng.random());
                (invert_cumulative(&self.res1_cum, a), invert_cumulative(&self.res2_cum, b))
            }
            PairCoupling::Inversion => {
                let a: f64 = rng.random();
                (invert_cumulative(&self.res1_cum, a), invert_cumulative(&self.res2_cum, a))
            }
        }
    }

    /// Probability that [`PreparedPair::sample`] returns `(i, j)`.
    pub fn joint_pmf(&self, i: usize, j: usize) -> f64 {
        let cell = |cum: &[f64], k: usize| (if k == 0 { 0.0 } else { cum[k - 1] }, cum[k]);
        if self.full_overlap() {
            let (a, b) = cell(&self.overlap_cum, i);
            return if i == j { (b - a) / self.overlap } else { 0.0 };
        }
        let diag = if i == j { self.r1[i].min(self.r2[i]) } else { 0.0 };
        let rest = 1.0 - self.overlap;
        let (t1, t2) = (*self.res1_cum.last().unwrap(), *self.res2_cum.last().unwrap());
        let (a0, a1) = cell(&self.res1_cum, i);
        let (b0, b1) = cell(&self.res2_cum, j);
        let off = match self.kind {
            PairCoupling::Maximal => (a1 - a0) / t1 * (b1 - b0) / t2,
            PairCoupling::Inversion => {
                let lo = (a0 / t1).max(b0 / t2);
                let hi = (a1 / t1).min(b1 / t2);
                (hi - lo).max(0.0)
            }
        };
        diag + rest * off
    }

    /// The check-measure formula with mixed indices.
    pub fn printed_check(&self, i: usize, j: usize) -> f64 {
        let (r, s) = (&self.r1, &self.r2);
        let first = r[i].min(s[j]);
        let rest = 1.0 - self.overlap;
        if rest <= 0.0 {
            return first;
        }
        first + (r[i] - r[i].min(s[i])) / rest * (s[j] - r[j].min(s[j]))
    }

    fn check(&self, measure: CheckMeasure, i: usize, j: usize) -> f64 {
        match measure {
            CheckMeasure::Joint => self.joint_pmf(i, j),
            CheckMeasure::Printed => self.printed_check(i, j),
        }
    }
}

/// Maximal coupling of two PMFs: `i ~ r1`, `j ~ r2`,
/// `P(i = j) = Σ_k min(r1^k, r2^k)`.
pub fn sample_max_coupling<R: Rng + ?Sized>(r1: &Pmf, r2: &Pmf, rng: &mut R) -> Result<(usize, usize)> {
    Ok(PreparedPair::new(r1, r2, PairCoupling::Maximal)?.sample(rng))
}

/// As [`sample_max_coupling`] with the residual pair drawn by inversion at a
/// shared uniform.
pub fn sample_inversion_residual_coupling<R: Rng + ?Sized>(
    r1: &Pmf,
    r2: &Pmf,
    rng: &mut R,
) -> Result<(usize, usize)> {
    Ok(PreparedPair::new(r1, r2, PairCoupling::Inversion)?.sample(rng))
}

/// Given `i5 ~ r5`, draws `i6 ~ r6` with `i6 = i5` whenever possible.
pub fn sample_conditional_coupling<R: Rng + ?Sized>(
    r5: &Pmf,
    r6: &Pmf,
    i5: usize,
    rng: &mut R,
) -> Result<usize> {
    if r5.len() != r6.len() || i5 >= r5.len() {
        return invalid("conditional coupling: mismatched PMFs or index out of range");
    }
    conditional(r5.as_slice(), r6.as_slice(), i5, rng)
}

fn conditional<R: Rng + ?Sized>(r5: &[f64], r6: &[f64], i5: usize, rng: &mut R) -> Result<usize> {
    if !(r5[i5] > 0.0) {
        return invalid(format!("index {i5} has zero mass under the conditioning PMF"));
    }
    let u = rng.random::<f64>() * r5[i5];
    if u < r6[i5] {
        return Ok(i5);
    }
    for _ in 0..REJECTION_CAP {
        let j = invert(r6, rng.random());
        let u = rng.random::<f64>() * r6[j];
        if u > r5[j] {
            return Ok(j);
        }
    }
    Err(Error::RejectionCap(REJECTION_CAP))
}

/// Which branch the four-way sampler takes for a given PMF quadruple.
#[derive(Debug, Clone)]
enum Branch {
    /// `r1 = r3`, `r2 ≠ r4`: condition `r4` on the draw from `r1`.
    FirstShared,
    /// `r2 = r4`, `r1 ≠ r3`: condition `r3` on the draw from `r2`.
    SecondShared,
    /// Couple the pair couplings of `(r1, r2)` and `(r3, r4)`.
    General(PreparedPair),
}

/// The four-way coupling of `(r1, r2, r3, r4)`, prepared for repeated draws.
#[derive(Debug, Clone)]
pub struct PreparedCoupling4 {
    r: [Vec<f64>; 4],
    first: PreparedPair,
    branch: Branch,
    measure: CheckMeasure,
}

impl PreparedCoupling4 {
    pub fn new(r: [&Pmf; 4], kind: PairCoupling, measure: CheckMeasure) -> Result<Self> {
        Self::from_slices([r[0].as_slice(), r[1].as_slice(), r[2].as_slice(), r[3].as_slice()], kind, measure)
    }

    pub(crate) fn from_slices(r: [&[f64]; 4], kind: PairCoupling, measure: CheckMeasure) -> Result<Self> {
        let n = r[0].len();
        if r.iter().any(|p| p.len() != n) {
            return invalid("four-way coupling: PMFs over different index sets");
        }
        let first = PreparedPair::from_slices(r[0], r[1], kind)?;
        let (eq13, eq24) = (r[0] == r[2], r[1] == r[3]);
        let branch = if eq13 && !eq24 {
            Branch::FirstShared
        } else if eq24 && !eq13 {
            Branch::SecondShared
        } else {
            Branch::General(PreparedPair::from_slices(r[2], r[3], kind)?)
        };
        Ok(PreparedCoupling4 {
            r: [r[0].to_vec(), r[1].to_vec(), r[2].to_vec(), r[3].to_vec()],
            first,
            branch,
            measure,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[usize; 4]> {
        let (i1, i2) = self.first.sample(rng);
        match &self.branch {
            Branch::FirstShared => {
                let i6 = conditional(&self.r[0], &self.r[3], i1, rng)?;
                Ok([i1, i2, i1, i6])
            }
            Branch::SecondShared => {
                let i6 = conditional(&self.r[1], &self.r[2], i2, rng)?;
                Ok([i1, i2, i6, i2])
            }
            Branch::General(second) => {
                let m = self.measure;
                let u = rng.random::<f64>() * self.first.check(m, i1, i2);
                if u < second.check(m, i1, i2) {
                    return Ok([i1, i2, i1, i2]);
                }
                for _ in 0..REJECTION_CAP {
                    let (i9, i10) = second.sample(rng);
                    let u = rng.random::<f64>() * second.check(m, i9, i10);
                    if u > self.first.check(m, i9, i10) {
                        return Ok([i1, i2, i9, i10]);
                    }
                }
                Err(Error::RejectionCap(REJECTION_CAP))
            }
        }
    }
}

/// Four-way coupling with marginals `r1, ..., r4` in which `(i1, i2)` and
/// `(i3, i4)` are each pair-coupled and the two pairs are coupled to each other.
pub fn sample_max_coupling4<R: Rng + ?Sized>(
    r: [&Pmf; 4],
    kind: PairCoupling,
    measure: CheckMeasure,
    rng: &mut R,
) -> Result<[usize; 4]> {
    PreparedCoupling4::new(r, kind, measure)?.sample(rng)
}
