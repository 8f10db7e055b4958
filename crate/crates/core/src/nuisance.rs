//! Nuisance-parameter estimation: residual variance, local slope at the
//! threshold, plug-in bandwidth selection, and the Wald scaling constant.

use crate::error::{Error, Result};
use crate::isotonic::csum;
use crate::sample::SampleBatch;
use serde::{Deserialize, Serialize};

/// Which stage's data fed an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceStage {
    One,
    Two,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NuisanceFlags {
    pub pilot_degenerate: bool,
    pub sigma2_floored: bool,
    /// Estimates were supplied as known truth rather than computed.
    pub supplied: bool,
}

/// Variance and slope estimates entering confidence-interval constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimates {
    pub sigma2: f64,
    pub deriv_at: f64,
    pub deriv: f64,
    pub bandwidth: f64,
    pub source_stage: SourceStage,
    pub flags: NuisanceFlags,
}

impl NuisanceEstimates {
    /// Known-truth estimates, for oracle experiments.
    pub fn known(sigma2: f64, deriv: f64, at: f64) -> Self {
        Self {
            sigma2,
            deriv_at: at,
            deriv,
            bandwidth: 0.0,
            source_stage: SourceStage::One,
            flags: NuisanceFlags { supplied: true, ..Default::default() },
        }
    }

    /// The Wald scaling constant from these estimates, guarding against a
    /// flat slope relative to `deriv_floor`.
    pub fn wald_constant(&self, deriv_floor: f64) -> Result<f64> {
        if self.deriv <= deriv_floor {
            return Err(Error::FlatDerivative { deriv: self.deriv, floor: deriv_floor });
        }
        wald_constant(self.sigma2, self.deriv)
    }
}

/// `(4 sigma^2 / deriv^2)^(1/3)`, the cube-root constant scaling the limiting
/// distribution of the one-stage threshold estimator.
pub fn wald_constant(sigma2: f64, deriv: f64) -> Result<f64> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidConfig(format!("sigma2 = {sigma2} must be positive")));
    }
    if !(deriv > 0.0) {
        return Err(Error::FlatDerivative { deriv, floor: 0.0 });
    }
    Ok((4.0 * sigma2 / (deriv * deriv)).cbrt())
}

/// Lower bound applied to variance estimates: `1e-12 * var(y)`, with an
/// absolute guard for exactly constant responses.
pub fn sigma2_floor(sample: &SampleBatch) -> f64 {
    let n = sample.len() as f64;
    let mean = csum(sample.ys()) / n;
    let var = csum(sample.ys().map(|y| (y - mean) * (y - mean))) / n;
    (1e-12 * var).max(f64::MIN_POSITIVE)
}

/// Slope floor below which Wald intervals are refused: `1e-8 * range(y)/range(x)`.
pub fn deriv_floor(sample: &SampleBatch) -> f64 {
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in sample.ys() {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let range_x = sample.domain().width();
    (1e-8 * (ymax - ymin) / range_x).max(f64::MIN_POSITIVE)
}

/// Difference-based variance estimator: each interior point is interpolated
/// linearly from its neighbours and the normalized squared pseudo-residuals
/// are averaged. Exactly zero when the responses are affine in `x`.
pub fn variance_gasser(sample: &SampleBatch) -> Result<f64> {
    let n = sample.len();
    if n < 3 {
        return Err(Error::TooFewPoints { needed: 3, got: n });
    }
    let pts = sample.points();
    let total = csum((1..n - 1).map(|i| {
        let span = pts[i + 1].x - pts[i - 1].x;
        let a = (pts[i + 1].x - pts[i].x) / span;
        let b = (pts[i].x - pts[i - 1].x) / span;
        let resid = a * pts[i - 1].y + b * pts[i + 1].y - pts[i].y;
        resid * resid / (a * a + b * b + 1.0)
    }));
    Ok(total / (n - 2) as f64)
}

/// Result of a local-quadratic slope fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeEstimate {
    pub slope: f64,
    pub bandwidth: f64,
    pub pilot_degenerate: bool,
}

const MIN_IN_WINDOW: usize = 4;
const WIDEN_FACTOR: f64 = 1.5;
const MAX_WIDENINGS: usize = 5;

/// Local quadratic regression slope at `x0` with Epanechnikov weights.
///
/// When no bandwidth is given, the rule-of-thumb plug-in is used. A window
/// with fewer than four points is widened by 1.5 up to five times before
/// giving up.
pub fn derivative_local_quadratic(
    sample: &SampleBatch,
    x0: f64,
    bandwidth: Option<f64>,
) -> Result<DerivativeEstimate> {
    let (mut h, pilot_degenerate) = match bandwidth {
        Some(h) => {
            if !(h > 0.0) {
                return Err(Error::InvalidConfig(format!("bandwidth {h} must be positive")));
            }
            (h, false)
        }
        None => {
            let rb = rule_of_thumb_bandwidth(sample, x0)?;
            (rb.h, rb.pilot_degenerate)
        }
    };
    let pts = sample.points();
    for attempt in 0..=MAX_WIDENINGS {
        let in_window = pts.iter().filter(|p| ((p.x - x0) / h).abs() < 1.0).count();
        if in_window >= MIN_IN_WINDOW {
            if let Some(slope) = local_quadratic_slope(sample, x0, h) {
                return Ok(DerivativeEstimate { slope, bandwidth: h, pilot_degenerate });
            }
        }
        if attempt < MAX_WIDENINGS {
            h *= WIDEN_FACTOR;
        } else {
            return Err(Error::BandwidthExhausted { last_bandwidth: h, in_window });
        }
    }
    unreachable!()
}

fn epanechnikov(t: f64) -> f64 {
    if t.abs() < 1.0 {
        0.75 * (1.0 - t * t)
    } else {
        0.0
    }
}

fn local_quadratic_slope(sample: &SampleBatch, x0: f64, h: f64) -> Option<f64> {
    // Basis in u = (x - x0)/h for conditioning; slope is beta1 / h.
    let mut s = [[0.0f64; 3]; 3];
    let mut t = [0.0f64; 3];
    for p in sample.points() {
        let u = (p.x - x0) / h;
        let k = p.w * epanechnikov(u);
        if k == 0.0 {
            continue;
        }
        let pow = [1.0, u, u * u];
        for j in 0..3 {
            for l in j..3 {
                s[j][l] += k * pow[j] * pow[l];
            }
            t[j] += k * pow[j] * p.y;
        }
    }
    for j in 0..3 {
        for l in 0..j {
            s[j][l] = s[l][j];
        }
    }
    let beta = solve_dense(&mut [s[0].to_vec(), s[1].to_vec(), s[2].to_vec()], &mut t.to_vec())?;
    Some(beta[1] / h)
}

/// Gaussian elimination with partial pivoting for the small dense systems
/// used by the polynomial fits.
fn solve_dense(a: &mut [Vec<f64>], b: &mut Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col][k] * x[k];
        }
        x[col] = v / a[col][col];
    }
    Some(x)
}

/// A resolved plug-in bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    pub h: f64,
    pub pilot_degenerate: bool,
}

/// Kernel constant of the asymptotic-MSE minimizer for the local-quadratic
/// slope with an Epanechnikov kernel.
///
/// With equivalent kernel `K*(u) = 5 u K(u)`, the bias coefficient is
/// `m'''(x0)/3! * int u^3 K* = m'''/14` and the variance coefficient
/// `sigma^2/g * int K*^2 = (15/7) sigma^2/g`; minimizing
/// `(B h^2)^2 + 3 V /(n h^3)` in `h` gives
/// `h = (3V/(4B^2))^(1/7) n^(-1/7) = (315 sigma^2/(g m'''^2) / n)^(1/7)`.
const SLOPE_BANDWIDTH_CONSTANT_7TH_POWER: f64 = 315.0;

/// Plug-in bandwidth for the local-quadratic slope at `x0`: pilot third
/// derivative from a global quartic fit, design density from a histogram,
/// variance from the difference-based estimator, clamped to
/// `[(b-a)/n^(6/7), (b-a)/2]`.
pub fn rule_of_thumb_bandwidth(sample: &SampleBatch, x0: f64) -> Result<Bandwidth> {
    let n = sample.len();
    if n < 8 {
        return Err(Error::TooFewPoints { needed: 8, got: n });
    }
    let domain = sample.domain();
    let width = domain.width();
    let lower = width / (n as f64).powf(6.0 / 7.0);
    let upper = width / 2.0;

    let sigma2 = variance_gasser(sample)?;
    let g = histogram_density(sample, x0);
    let m3 = quartic_third_derivative(sample, x0);

    // Dimensioned near-zero test for the pilot: division-by-zero guard.
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for y in sample.ys() {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let m3_scale = ((ymax - ymin) / (width * width * width)).max(f64::MIN_POSITIVE);
    if m3.abs() <= 1e-10 * m3_scale {
        return Ok(Bandwidth { h: upper, pilot_degenerate: true });
    }

    let h = (SLOPE_BANDWIDTH_CONSTANT_7TH_POWER * sigma2 / (n as f64 * g * m3 * m3)).powf(1.0 / 7.0);
    let h = if h.is_finite() { h.clamp(lower, upper) } else { upper };
    Ok(Bandwidth { h, pilot_degenerate: false })
}

/// Histogram density estimate at `x0` with `ceil(sqrt(n))` equal bins.
pub fn histogram_density(sample: &SampleBatch, x0: f64) -> f64 {
    let n = sample.len();
    let domain = sample.domain();
    let bins = (n as f64).sqrt().ceil() as usize;
    let bin_width = domain.width() / bins as f64;
    let idx = (((x0 - domain.lo) / bin_width) as usize).min(bins - 1);
    let lo = domain.lo + idx as f64 * bin_width;
    let hi = lo + bin_width;
    let count = sample
        .xs()
        .filter(|&x| x >= lo && (x < hi || (idx == bins - 1 && x <= hi)))
        .count();
    count as f64 / (n as f64 * bin_width)
}

/// Third derivative at `x0` of a global least-squares quartic.
fn quartic_third_derivative(sample: &SampleBatch, x0: f64) -> f64 {
    let scale = sample.domain().width() / 2.0;
    let mut s = [[0.0f64; 5]; 5];
    let mut t = [0.0f64; 5];
    for p in sample.points() {
        let u = (p.x - x0) / scale;
        let mut pow = [1.0; 5];
        for j in 1..5 {
            pow[j] = pow[j - 1] * u;
        }
        for j in 0..5 {
            for l in j..5 {
                s[j][l] += p.w * pow[j] * pow[l];
            }
            t[j] += p.w * pow[j] * p.y;
        }
    }
    for j in 0..5 {
        for l in 0..j {
            s[j][l] = s[l][j];
        }
    }
    let mut rows: Vec<Vec<f64>> = s.iter().map(|r| r.to_vec()).collect();
    match solve_dense(&mut rows, &mut t.to_vec()) {
        Some(beta) => 6.0 * beta[3] / (scale * scale * scale),
        None => 0.0,
    }
}

/// Estimate variance and slope from a batch, flooring the variance.
pub fn estimate_nuisance(
    sample: &SampleBatch,
    x0: f64,
    bandwidth: Option<f64>,
    source_stage: SourceStage,
) -> Result<NuisanceEstimates> {
    let raw_sigma2 = variance_gasser(sample)?;
    let floor = sigma2_floor(sample);
    let sigma2 = raw_sigma2.max(floor);
    let deriv = derivative_local_quadratic(sample, x0, bandwidth)?;
    Ok(NuisanceEstimates {
        sigma2,
        deriv_at: x0,
        deriv: deriv.slope,
        bandwidth: deriv.bandwidth,
        source_stage,
        flags: NuisanceFlags {
            pilot_degenerate: deriv.pilot_degenerate,
            sigma2_floored: raw_sigma2 < floor,
            supplied: false,
        },
    })
}
