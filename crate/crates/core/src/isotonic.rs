//! Isotonic least-squares fitting, constrained fitting under a threshold
//! null, threshold inversion, and the cusum argmin diagnostic.

use crate::error::{Error, Result};
use crate::sample::{Domain, Obs, SampleBatch};
use serde::{Deserialize, Serialize};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Csum {
    s: f64,
    c: f64,
}

impl Csum {
    pub fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    pub fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Sum `f` over items with compensation.
pub(crate) fn csum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = Csum::default();
    for v in it {
        acc.add(v);
    }
    acc.value()
}

/// A maximal run of consecutive points sharing one fitted level.
/// `start..end` is half-open over the point indices of the fitted sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub mean: f64,
    pub weight: f64,
}

/// Which side of the constraint point carried no data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

/// A nondecreasing piecewise-constant fitted function.
///
/// Pieces are left-closed: the fit equals `levels[i]` on `[knots[i], knots[i+1])`,
/// with the first level extending down to the domain's lower end and the last
/// level up to its upper end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    knots: Vec<f64>,
    levels: Vec<f64>,
    blocks: Vec<Block>,
    domain: Domain,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    one_sided_null: Option<Side>,
}

impl StepFit {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Set when a constrained fit had no data on one side of the constraint
    /// point; that side is the constant null level over its region.
    pub fn one_sided_null(&self) -> Option<Side> {
        self.one_sided_null
    }

    /// Evaluate the step function at `x`.
    pub fn evaluate(&self, x: f64) -> f64 {
        if x <= self.knots[0] {
            return self.levels[0];
        }
        let idx = self.knots.partition_point(|k| *k <= x);
        self.levels[idx - 1]
    }

    /// Smallest covariate at which the fit reaches `theta0`:
    /// the infimum of `{x : fit(x) >= theta0}`, with the empty-set convention
    /// returning the domain's upper end. Returns the lower end when the first
    /// level already meets `theta0`, since the first piece extends there.
    pub fn invert_threshold(&self, theta0: f64) -> f64 {
        match self.levels.iter().position(|&l| l >= theta0) {
            None => self.domain.hi,
            Some(0) => self.domain.lo,
            Some(i) => self.knots[i],
        }
    }

    /// Weighted residual sum of squares against a batch.
    pub fn rss(&self, sample: &SampleBatch) -> f64 {
        csum(sample.points().iter().map(|p| {
            let r = p.y - self.evaluate(p.x);
            p.w * r * r
        }))
    }
}

/// Internal pooled block carrying compensated sums.
#[derive(Debug, Clone, Copy)]
struct PoolBlock {
    start: usize,
    end: usize,
    wy: Csum,
    w: Csum,
}

impl PoolBlock {
    fn single(idx: usize, p: &Obs) -> Self {
        let mut wy = Csum::default();
        wy.add(p.w * p.y);
        let mut w = Csum::default();
        w.add(p.w);
        Self { start: idx, end: idx + 1, wy, w }
    }

    fn mean(&self) -> f64 {
        self.wy.value() / self.w.value()
    }

    fn absorb_left(&mut self, left: PoolBlock) {
        debug_assert_eq!(left.end, self.start);
        self.start = left.start;
        self.wy.add(left.wy.s);
        self.wy.add(left.wy.c);
        self.w.add(left.w.s);
        self.w.add(left.w.c);
    }
}

/// Pool adjacent violators over sorted observations. Blocks merge while the
/// preceding block's mean strictly exceeds the current one.
fn pool_adjacent(obs: &[Obs]) -> Vec<PoolBlock> {
    let mut stack: Vec<PoolBlock> = Vec::with_capacity(obs.len());
    for (i, p) in obs.iter().enumerate() {
        let mut blk = PoolBlock::single(i, p);
        while let Some(top) = stack.last() {
            if top.mean() > blk.mean() {
                let top = stack.pop().expect("nonempty");
                blk.absorb_left(top);
            } else {
                break;
            }
        }
        stack.push(blk);
    }
    stack
}

fn expand_levels(blocks: &[PoolBlock], n: usize) -> Vec<f64> {
    let mut levels = vec![0.0; n];
    for b in blocks {
        let m = b.mean();
        for l in &mut levels[b.start..b.end] {
            *l = m;
        }
    }
    levels
}

/// Recompute maximal equal-level runs with summed weights; for untruncated
/// fits these are exactly the pooled blocks.
fn runs_from_levels(levels: &[f64], obs_weight: impl Fn(usize) -> f64) -> Vec<Block> {
    let mut out: Vec<Block> = Vec::new();
    for (i, &l) in levels.iter().enumerate() {
        match out.last_mut() {
            Some(b) if b.mean == l => {
                b.end = i + 1;
                b.weight += obs_weight(i);
            }
            _ => out.push(Block { start: i, end: i + 1, mean: l, weight: obs_weight(i) }),
        }
    }
    out
}

/// Weighted least-squares projection of the responses onto the cone of
/// nondecreasing vectors, computed by pooling adjacent violators.
pub fn pava(sample: &SampleBatch) -> Result<StepFit> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let obs = sample.points();
    let blocks = pool_adjacent(obs);
    let levels = expand_levels(&blocks, obs.len());
    let blocks = blocks
        .iter()
        .map(|b| Block { start: b.start, end: b.end, mean: b.mean(), weight: b.w.value() })
        .collect();
    Ok(StepFit {
        knots: sample.xs().collect(),
        levels,
        blocks,
        domain: sample.domain(),
        one_sided_null: None,
    })
}

/// Least-squares nondecreasing fit subject to sitting at or below `theta0`
/// strictly left of `d0` and at or above `theta0` from `d0` on.
///
/// Each side is the unconstrained fit of its sub-sample truncated at `theta0`
/// (pointwise min on the left, max on the right). A side with no data becomes
/// the constant `theta0` over its region and the fit is flagged accordingly.
pub fn constrained_pava(sample: &SampleBatch, d0: f64, theta0: f64) -> Result<StepFit> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let domain = sample.domain();
    if !domain.contains(d0) {
        return Err(Error::InvalidConfig(format!(
            "constraint point {d0} outside domain [{}, {}]",
            domain.lo, domain.hi
        )));
    }
    let obs = sample.points();
    let split = sample.split_index(d0);
    let (left, right) = obs.split_at(split);

    let mut knots: Vec<f64> = Vec::with_capacity(obs.len() + 1);
    let mut levels: Vec<f64> = Vec::with_capacity(obs.len() + 1);
    let mut weights: Vec<f64> = Vec::with_capacity(obs.len() + 1);
    let mut one_sided = None;

    if left.is_empty() {
        one_sided = Some(Side::Left);
        if domain.lo < right[0].x {
            knots.push(domain.lo);
            levels.push(theta0);
            weights.push(0.0);
        }
    } else {
        let blocks = pool_adjacent(left);
        let mut lv = expand_levels(&blocks, left.len());
        for l in &mut lv {
            *l = l.min(theta0);
        }
        knots.extend(left.iter().map(|p| p.x));
        weights.extend(left.iter().map(|p| p.w));
        levels.extend(lv);
    }

    if right.is_empty() {
        one_sided = Some(Side::Right);
        // All data lies strictly below d0, so d0 is a fresh knot.
        knots.push(d0);
        levels.push(theta0);
        weights.push(0.0);
    } else {
        let blocks = pool_adjacent(right);
        let mut lv = expand_levels(&blocks, right.len());
        for l in &mut lv {
            *l = l.max(theta0);
        }
        knots.extend(right.iter().map(|p| p.x));
        weights.extend(right.iter().map(|p| p.w));
        levels.extend(lv);
    }

    let blocks = runs_from_levels(&levels, |i| weights[i]);
    Ok(StepFit { knots, levels, blocks, domain, one_sided_null: one_sided })
}

/// Residual sum of squares of the unconstrained fit, without materializing it.
pub(crate) fn unconstrained_rss(obs: &[Obs]) -> f64 {
    let mut acc = Csum::default();
    for b in pool_adjacent(obs) {
        let m = b.mean();
        for p in &obs[b.start..b.end] {
            let r = p.y - m;
            acc.add(p.w * r * r);
        }
    }
    acc.value()
}

/// Residual sum of squares of the constrained fit, without materializing it.
/// `split` is the number of points strictly left of the constraint point.
pub(crate) fn constrained_rss_split(obs: &[Obs], split: usize, theta0: f64) -> f64 {
    let (left, right) = obs.split_at(split);
    let mut acc = Csum::default();
    side_rss(left, theta0, true, &mut acc);
    side_rss(right, theta0, false, &mut acc);
    acc.value()
}

fn side_rss(obs: &[Obs], theta0: f64, truncate_above: bool, acc: &mut Csum) {
    if obs.is_empty() {
        return;
    }
    for b in pool_adjacent(obs) {
        let m = b.mean();
        let level = if truncate_above { m.min(theta0) } else { m.max(theta0) };
        for p in &obs[b.start..b.end] {
            let r = p.y - level;
            acc.add(p.w * r * r);
        }
    }
}

/// Weighted cusum processes of a batch, evaluated at the sample points:
/// `cusum_v[i]` is the normalized response sum over `x <= x_i` and `cusum_g[i]`
/// the normalized weight sum (nondecreasing from the first point's share to 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgminProcess {
    pub cusum_v: Vec<f64>,
    pub cusum_g: Vec<f64>,
}

/// Build the cusum processes of a batch.
pub fn argmin_process(sample: &SampleBatch) -> Result<ArgminProcess> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let total_w = csum(sample.points().iter().map(|p| p.w));
    let mut v = Csum::default();
    let mut g = Csum::default();
    let mut cusum_v = Vec::with_capacity(sample.len());
    let mut cusum_g = Vec::with_capacity(sample.len());
    for p in sample.points() {
        v.add(p.w * p.y);
        g.add(p.w);
        cusum_v.push(v.value() / total_w);
        cusum_g.push(g.value() / total_w);
    }
    Ok(ArgminProcess { cusum_v, cusum_g })
}

/// Location minimizing `x -> V(x) - s * G(x)` over the sample's support.
///
/// Candidates are the sample points plus the pre-sample origin; the origin
/// (where both cusums vanish) is reported as the domain's lower end. Ties
/// within numerical tolerance resolve to the rightmost location, which is the
/// convention under which the level-set/argmin exchange with the isotonic fit
/// holds exactly, level-for-level.
pub fn argmin_diagnostic(sample: &SampleBatch, s: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let obs = sample.points();
    let n = obs.len();
    let mut h = Vec::with_capacity(n + 1);
    h.push(0.0);
    let mut acc = Csum::default();
    let mut scale = 0.0;
    for p in obs {
        let term = p.w * (p.y - s);
        // Rounding of the drifted cusum is bounded by the magnitudes entering
        // it, not by the (possibly fully cancelled) partial sums.
        scale += p.w * (p.y.abs() + s.abs());
        acc.add(term);
        h.push(acc.value());
    }
    let min = h.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-11 * scale.max(f64::MIN_POSITIVE);
    let k = (0..=n)
        .rev()
        .find(|&k| h[k] <= min + tol)
        .expect("minimum exists");
    Ok(if k == 0 { sample.domain().lo } else { obs[k - 1].x })
}

/// Largest sample covariate at or below `t`, if any.
pub fn last_point_at_or_below(sample: &SampleBatch, t: f64) -> Option<f64> {
    let idx = sample.points().partition_point(|p| p.x <= t);
    if idx == 0 {
        None
    } else {
        Some(sample.points()[idx - 1].x)
    }
}
