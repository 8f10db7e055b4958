//! Confidence-interval construction: one- and two-stage Wald intervals, the
//! likelihood-ratio statistic, and confidence sets by inverting it on a grid.

use crate::error::{Error, Result};
use crate::exec::{map_indexed, map_indexed_seq};
use crate::isotonic::{constrained_rss_split, pava, unconstrained_rss};
use crate::nuisance::NuisanceEstimates;
use crate::sample::{Domain, SampleBatch};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiFamily {
    Wald1,
    Wald2,
    Lr,
}

/// Flags recording anything non-routine about an interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CiDiagnostics {
    /// One or both endpoints were clipped to the domain.
    pub clipped_to_domain: bool,
    /// Every grid point was accepted: the region is the whole domain.
    pub whole_domain: bool,
    /// The accepted grid set had interior gaps (numerical artifact; the
    /// region is an interval in theory).
    pub non_interval_region: bool,
    /// No grid point was accepted; the interval degenerates to the grid
    /// argmin of the statistic.
    pub empty_region: bool,
    /// The stage-one interval came from likelihood-ratio inversion, outside
    /// the scope of the Wald-planning theory.
    pub heuristic_stage1: bool,
    /// Produced by the simplified local-linear comparator.
    pub comparator_approximation: bool,
}

/// A point estimate with a confidence interval and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub family: CiFamily,
    pub level: f64,
    pub nuisance: Option<NuisanceEstimates>,
    pub diagnostics: CiDiagnostics,
}

impl IntervalEstimate {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn covers(&self, d0: f64) -> bool {
        self.lower <= d0 && d0 <= self.upper
    }

    pub fn with_nuisance(mut self, n: NuisanceEstimates) -> Self {
        self.nuisance = Some(n);
        self
    }
}

fn clip_interval(center: f64, half_width: f64, domain: Domain) -> (f64, f64, bool) {
    let (raw_lo, raw_hi) = (center - half_width, center + half_width);
    let (lo, hi) = domain.intersect(raw_lo, raw_hi);
    (lo, hi, lo != raw_lo || hi != raw_hi)
}

/// One-stage Wald interval: half-width `n^(-1/3) c_hat g^(-1/3) q`.
pub fn wald_ci_one_stage(
    d: f64,
    n: usize,
    c_hat: f64,
    g_at_d: f64,
    z_quantile: f64,
    domain: Domain,
    level: f64,
) -> Result<IntervalEstimate> {
    if n < 1 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    if !(c_hat > 0.0 && g_at_d > 0.0 && z_quantile >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "wald inputs must be positive: c_hat={c_hat}, g={g_at_d}, q={z_quantile}"
        )));
    }
    let half = (n as f64).powf(-1.0 / 3.0) * c_hat * g_at_d.powf(-1.0 / 3.0) * z_quantile;
    let (lower, upper, clipped) = clip_interval(d, half, domain);
    Ok(IntervalEstimate {
        point: d,
        lower,
        upper,
        family: CiFamily::Wald1,
        level,
        nuisance: None,
        diagnostics: CiDiagnostics { clipped_to_domain: clipped, ..Default::default() },
    })
}

/// Constant multiplying the one-stage Wald constant in the two-stage interval:
/// `(c1 / ((1-p) p^gamma1 psi0))^(1/3)`.
pub fn two_stage_constant_multiplier(c1: f64, p: f64, gamma1: f64, psi0: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidPlan(format!("p = {p} must be in (0,1)")));
    }
    if !(0.0..=1.0 / 3.0 + 1e-12).contains(&gamma1) {
        return Err(Error::InvalidPlan(format!("gamma1 = {gamma1} must be in [0, 1/3]")));
    }
    if !(psi0 > 0.0) {
        return Err(Error::InvalidPlan(format!("psi(0) = {psi0} must be positive")));
    }
    if !(c1 > 0.0) {
        return Err(Error::InvalidPlan(format!("C1 = {c1} must be positive")));
    }
    Ok((c1 / ((1.0 - p) * p.powf(gamma1) * psi0)).cbrt())
}

/// Two-stage Wald interval: half-width
/// `n^(-(1+gamma1)/3) * base_c * (c1/((1-p) p^gamma1 psi0))^(1/3) * q`.
#[allow(clippy::too_many_arguments)]
pub fn wald_ci_two_stage(
    d2: f64,
    n: usize,
    base_c: f64,
    c1: f64,
    p: f64,
    gamma1: f64,
    psi0: f64,
    z_quantile: f64,
    domain: Domain,
    level: f64,
) -> Result<IntervalEstimate> {
    if n < 1 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    if !(base_c > 0.0 && z_quantile >= 0.0) {
        return Err(Error::InvalidPlan(format!(
            "base constant {base_c} and quantile {z_quantile} must be nonnegative"
        )));
    }
    let mult = two_stage_constant_multiplier(c1, p, gamma1, psi0)?;
    let half = (n as f64).powf(-(1.0 + gamma1) / 3.0) * base_c * mult * z_quantile;
    let (lower, upper, clipped) = clip_interval(d2, half, domain);
    Ok(IntervalEstimate {
        point: d2,
        lower,
        upper,
        family: CiFamily::Wald2,
        level,
        nuisance: None,
        diagnostics: CiDiagnostics { clipped_to_domain: clipped, ..Default::default() },
    })
}

/// The working likelihood-ratio statistic for the null that the fit crosses
/// `theta0` at `d0`: `(RSS_constrained - RSS_unconstrained) / sigma2`.
pub fn lr_stat(sample: &SampleBatch, theta0: f64, d0: f64, sigma2: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma2 = {sigma2} must be positive")));
    }
    let obs = sample.points();
    let rss_u = unconstrained_rss(obs);
    let rss_c = constrained_rss_split(obs, sample.split_index(d0), theta0);
    Ok(((rss_c - rss_u) / sigma2).max(0.0))
}

/// The statistic evaluated on a uniform grid over `over` (parallel when the
/// `parallel` feature is on; result independent of thread count).
pub fn lr_stat_profile(
    sample: &SampleBatch,
    theta0: f64,
    sigma2: f64,
    over: Domain,
    grid_size: usize,
) -> Result<Vec<f64>> {
    lr_profile_impl(sample, theta0, sigma2, over, grid_size, true)
}

/// Sequential version of [`lr_stat_profile`], primarily for benchmarking the
/// parallel path against.
pub fn lr_stat_profile_seq(
    sample: &SampleBatch,
    theta0: f64,
    sigma2: f64,
    over: Domain,
    grid_size: usize,
) -> Result<Vec<f64>> {
    lr_profile_impl(sample, theta0, sigma2, over, grid_size, false)
}

fn lr_profile_impl(
    sample: &SampleBatch,
    theta0: f64,
    sigma2: f64,
    over: Domain,
    grid_size: usize,
    parallel: bool,
) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma2 = {sigma2} must be positive")));
    }
    let obs = sample.points();
    let rss_u = unconstrained_rss(obs);
    let step = over.width() / (grid_size - 1) as f64;
    // The statistic only changes when the hypothesized point crosses a sample
    // covariate, so evaluate once per distinct split index and scatter back.
    let splits: Vec<usize> = (0..grid_size)
        .map(|i| obs.partition_point(|p| p.x < over.lo + i as f64 * step))
        .collect();
    let mut unique: Vec<usize> = splits.clone();
    unique.dedup();
    let eval = |k: usize| -> f64 {
        ((constrained_rss_split(obs, unique[k], theta0) - rss_u) / sigma2).max(0.0)
    };
    let stats = if parallel {
        map_indexed(unique.len(), eval)
    } else {
        map_indexed_seq(unique.len(), eval)
    };
    // Splits are nondecreasing along the grid; walk both lists in lockstep.
    let mut out = Vec::with_capacity(grid_size);
    let mut k = 0;
    for s in splits {
        while unique[k] != s {
            k += 1;
        }
        out.push(stats[k]);
    }
    Ok(out)
}

/// Relative endpoint resolution of the bisection refinement.
const ENDPOINT_RESOLUTION: f64 = 1e-6;

/// Invert the likelihood-ratio statistic into a confidence region
/// `{x : stat(x) <= d_quantile}`, returned as the interval spanned by the
/// accepted grid points with endpoints refined by bisection.
///
/// An accepted set with interior gaps or covering the whole grid is flagged;
/// an empty accepted set degenerates to the grid argmin of the statistic.
#[allow(clippy::too_many_arguments)]
pub fn lr_ci(
    sample: &SampleBatch,
    theta0: f64,
    sigma2: f64,
    d_quantile: f64,
    over: Domain,
    grid_size: usize,
    level: f64,
) -> Result<IntervalEstimate> {
    if grid_size < 101 {
        return Err(Error::InvalidConfig(format!("grid_size {grid_size} must be >= 101")));
    }
    let stats = lr_stat_profile(sample, theta0, sigma2, over, grid_size)?;
    let fit = pava(sample)?;
    let point = fit.invert_threshold(theta0);

    let obs = sample.points();
    let rss_u = unconstrained_rss(obs);
    let stat_at = |x: f64| -> f64 {
        let split = obs.partition_point(|p| p.x < x);
        ((constrained_rss_split(obs, split, theta0) - rss_u) / sigma2).max(0.0)
    };

    let step = over.width() / (grid_size - 1) as f64;
    let grid_x = |i: usize| over.lo + i as f64 * step;
    let accepted: Vec<usize> = (0..grid_size).filter(|&i| stats[i] <= d_quantile).collect();

    let mut diagnostics = CiDiagnostics::default();
    if accepted.is_empty() {
        let argmin = stats
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("grid nonempty");
        diagnostics.empty_region = true;
        let x = grid_x(argmin);
        return Ok(IntervalEstimate {
            point,
            lower: x,
            upper: x,
            family: CiFamily::Lr,
            level,
            nuisance: None,
            diagnostics,
        });
    }

    let first = accepted[0];
    let last = *accepted.last().expect("nonempty");
    if accepted.len() == grid_size {
        diagnostics.whole_domain = true;
    }
    if accepted.len() != last - first + 1 {
        diagnostics.non_interval_region = true;
    }

    let tol = ENDPOINT_RESOLUTION * over.width();
    let lower = if first == 0 {
        over.lo
    } else {
        // stat(grid[first-1]) > q >= stat(grid[first]); locate the crossing.
        let (mut rej, mut acc) = (grid_x(first - 1), grid_x(first));
        while acc - rej > tol {
            let mid = 0.5 * (rej + acc);
            if stat_at(mid) <= d_quantile {
                acc = mid;
            } else {
                rej = mid;
            }
        }
        acc
    };
    let upper = if last == grid_size - 1 {
        over.hi
    } else {
        let (mut acc, mut rej) = (grid_x(last), grid_x(last + 1));
        while rej - acc > tol {
            let mid = 0.5 * (acc + rej);
            if stat_at(mid) <= d_quantile {
                acc = mid;
            } else {
                rej = mid;
            }
        }
        acc
    };

    Ok(IntervalEstimate {
        point,
        lower,
        upper,
        family: CiFamily::Lr,
        level,
        nuisance: None,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isotonic::constrained_pava;
    use crate::sample::{Obs, Stage};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dom() -> Domain {
        Domain::new(0.0, 1.0).unwrap()
    }

    fn batch(xs: &[f64], ys: &[f64]) -> SampleBatch {
        let pts: Vec<Obs> = xs.iter().zip(ys).map(|(&x, &y)| Obs::new(x, y)).collect();
        SampleBatch::new(pts, dom(), Stage::One).unwrap()
    }

    #[test]
    fn wald_one_stage_examples() {
        let ci = wald_ci_one_stage(0.5, 1000, 0.342, 1.0, 2.0, dom(), 0.95).unwrap();
        assert!((ci.length() / 2.0 - 0.0684).abs() < 1e-12);
        assert!((ci.point - 0.5).abs() < 1e-15);

        let degenerate = wald_ci_one_stage(0.5, 1000, 0.342, 1.0, 0.0, dom(), 0.95).unwrap();
        assert_eq!(degenerate.lower, degenerate.upper);

        let base = wald_ci_one_stage(0.5, 100, 0.3, 1.0, 1.0, dom(), 0.95).unwrap();
        let scaled = wald_ci_one_stage(0.5, 800, 0.3, 1.0, 1.0, dom(), 0.95).unwrap();
        assert!((base.length() / scaled.length() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn wald_one_stage_clips_and_flags() {
        let ci = wald_ci_one_stage(0.05, 8, 1.0, 1.0, 2.0, dom(), 0.95).unwrap();
        assert_eq!(ci.lower, 0.0);
        assert!(ci.diagnostics.clipped_to_domain);
        assert_eq!(ci.point, 0.05);
    }

    #[test]
    fn wald_two_stage_constant_example() {
        let mult = two_stage_constant_multiplier(1.0, 0.25, 1.0 / 3.0, 0.5).unwrap();
        // Independent route: log-space evaluation.
        let log_mult = -(0.75f64.ln() + (1.0f64 / 3.0) * 0.25f64.ln() + 0.5f64.ln()) / 3.0;
        assert!((mult - log_mult.exp()).abs() < 1e-12);
        assert!((mult - 1.6178).abs() < 5e-4);

        // gamma1 = 0 reduces to the one-stage boundary.
        let m0 = two_stage_constant_multiplier(2.0, 0.25, 0.0, 0.5).unwrap();
        assert!((m0 - (2.0f64 / (0.75 * 0.5)).cbrt()).abs() < 1e-12);

        let ci = wald_ci_two_stage(0.5, 500, 0.3, 1.0, 0.25, 1.0 / 3.0, 0.5, 0.0, dom(), 0.95)
            .unwrap();
        assert_eq!(ci.lower, ci.upper);

        assert!(matches!(
            wald_ci_two_stage(0.5, 500, 0.3, 1.0, 1.5, 1.0 / 3.0, 0.5, 1.0, dom(), 0.95),
            Err(Error::InvalidPlan(_))
        ));
    }

    #[test]
    fn wald_width_scaling_laws() {
        let g1 = 1.0 / 3.0;
        let w = |n: usize| {
            wald_ci_two_stage(0.5, n, 0.01, 1.0, 0.25, g1, 0.5, 1.0, dom(), 0.95)
                .unwrap()
                .length()
        };
        let ratio = w(100) / w(800);
        assert!((ratio - 8.0f64.powf((1.0 + g1) / 3.0)).abs() < 1e-9);
    }

    #[test]
    fn lr_stat_examples() {
        let s = batch(&[0.25, 0.75], &[0.0, 1.0]);
        assert_eq!(lr_stat(&s, 0.5, 0.5, 1.0).unwrap(), 0.0);

        let s = batch(&[0.25, 0.75], &[0.6, 0.8]);
        let v = lr_stat(&s, 0.5, 0.5, 1.0).unwrap();
        assert!((v - 0.01).abs() < 1e-14);
        let half = lr_stat(&s, 0.5, 0.5, 2.0).unwrap();
        assert!((half - 0.005).abs() < 1e-14);
    }

    #[test]
    fn lr_stat_zero_at_unconstrained_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            xs.sort_by(f64::total_cmp);
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let s = batch(&xs, &ys);
            let fit = pava(&s).unwrap();
            let theta0 = rng.random_range(0.1..0.9);
            let d_i = fit.invert_threshold(theta0);
            let stat = lr_stat(&s, theta0, d_i, 1.0).unwrap();
            assert!(stat <= 1e-12, "stat at the fitted threshold must vanish, got {stat}");
        }
    }

    /// Residual-difference route equals the block-average route
    /// `(1/sigma2) * sum w [(fit_u - theta0)^2 - (fit_c - theta0)^2]`.
    #[test]
    fn lr_block_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(2..=100usize);
            let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            xs.sort_by(f64::total_cmp);
            let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = batch(&xs, &ys);
            let theta0 = rng.random_range(-0.5..0.5);
            let d0 = rng.random_range(0.05..0.95);
            let sigma2 = rng.random_range(0.2..2.0);
            let stat = lr_stat(&s, theta0, d0, sigma2).unwrap();
            let fit_u = pava(&s).unwrap();
            let fit_c = constrained_pava(&s, d0, theta0).unwrap();
            let alt: f64 = s
                .points()
                .iter()
                .map(|p| {
                    let du = fit_u.evaluate(p.x) - theta0;
                    let dc = fit_c.evaluate(p.x) - theta0;
                    p.w * (du * du - dc * dc)
                })
                .sum::<f64>()
                / sigma2;
            let scale = stat.abs().max(1e-3);
            assert!((stat - alt).abs() <= 1e-8 * scale, "stat {stat} vs identity {alt}");
        }
    }

    #[test]
    fn lr_ci_whole_domain_flag() {
        let s = batch(&[0.2, 0.4, 0.6, 0.8], &[0.1, 0.2, 0.3, 0.4]);
        let ci = lr_ci(&s, 0.25, 1.0, 1e12, dom(), 101, 0.95).unwrap();
        assert!(ci.diagnostics.whole_domain);
        assert_eq!((ci.lower, ci.upper), (0.0, 1.0));
    }

    #[test]
    fn lr_ci_shrinks_with_noise_and_contains_root() {
        // Noiseless strictly increasing responses; region must cover the
        // analytic root and shrink as sigma2 drops.
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let ys: Vec<f64> = xs.clone();
        let s = batch(&xs, &ys);
        let q = 2.3;
        let wide = lr_ci(&s, 0.5, 1e-2, q, dom(), 501, 0.95).unwrap();
        let narrow = lr_ci(&s, 0.5, 1e-4, q, dom(), 501, 0.95).unwrap();
        assert!(wide.covers(0.5) && narrow.covers(0.5));
        assert!(narrow.length() < wide.length());
        assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
        assert!(wide.covers(wide.point));
        assert!(!wide.diagnostics.non_interval_region);
    }

    #[test]
    fn lr_ci_empty_region_degenerates() {
        let s = batch(&[0.2, 0.8], &[0.0, 1.0]);
        // Negative quantile cannot be met anywhere.
        let ci = lr_ci(&s, 0.5, 1.0, -1.0, dom(), 101, 0.95).unwrap();
        assert!(ci.diagnostics.empty_region);
        assert_eq!(ci.lower, ci.upper);
    }

    #[test]
    fn lr_profile_parallel_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut xs: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        xs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = xs.iter().map(|x| x + 0.1 * rng.random_range(-1.0..1.0)).collect();
        let s = batch(&xs, &ys);
        let a = lr_stat_profile(&s, 0.5, 0.01, dom(), 301).unwrap();
        let b = lr_stat_profile_seq(&s, 0.5, 0.01, dom(), 301).unwrap();
        assert_eq!(a, b);
    }
}
