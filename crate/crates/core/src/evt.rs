//! Two-parameter Weibull models fitted by maximum likelihood on the high or
//! low tail of a distance sample.
//!
//! The shape is the root of the profile-likelihood equation
//!
//! ```text
//! g(k) = 1/k + mean(ln x) - sum(x^k ln x) / sum(x^k) = 0
//! ```
//!
//! which is strictly decreasing in `k`. Newton's method is tried first; if it
//! leaves the positive axis or stalls, bisection over `[1e-3, 1e3]` takes
//! over. The scale then follows in closed form, `s = (mean(x^k))^(1/k)`.
//! Data are divided by their maximum before iterating, which leaves the shape
//! unchanged and keeps `x^k` in range.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NEWTON_TOL: f64 = 1e-8;
const MAX_ITER: usize = 200;
const SHAPE_LO: f64 = 1e-3;
const SHAPE_HI: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tail {
    /// Fit on the largest values.
    High,
    /// Fit on the smallest values.
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub shape: f64,
    pub scale: f64,
    pub tail: Tail,
    /// Number of samples the fit actually used.
    pub tail_size: usize,
}

impl WeibullModel {
    pub fn new(shape: f64, scale: f64, tail: Tail, tail_size: usize) -> Result<Self> {
        if !(shape > 0.0 && shape.is_finite() && scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weibull shape/scale must be finite and positive, got ({shape}, {scale})"
            )));
        }
        Ok(WeibullModel {
            shape,
            scale,
            tail,
            tail_size,
        })
    }

    pub fn cdf(&self, d: f64) -> Result<f64> {
        weibull_cdf(self, d)
    }

    pub fn survival(&self, d: f64) -> Result<f64> {
        weibull_survival(self, d)
    }

    /// CDF for a distance already known to be non-negative.
    #[inline]
    pub(crate) fn cdf_unchecked(&self, d: f64) -> f64 {
        -(-(d / self.scale).powf(self.shape)).exp_m1()
    }

    #[inline]
    pub(crate) fn survival_unchecked(&self, d: f64) -> f64 {
        (-(d / self.scale).powf(self.shape)).exp()
    }

    /// Log-likelihood of strictly positive data under this model.
    pub fn log_likelihood(&self, data: &[f64]) -> f64 {
        let (k, s) = (self.shape, self.scale);
        data.iter()
            .map(|&x| {
                let z = x / s;
                k.ln() - s.ln() + (k - 1.0) * z.ln() - z.powf(k)
            })
            .sum()
    }
}

/// Selects the `tail_size` largest (`High`) or smallest (`Low`) values,
/// returned in ascending order. `tail_size` is clipped to the sample count.
pub fn select_tail(samples: &[f64], tail_size: usize, tail: Tail) -> Vec<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = tail_size.min(sorted.len());
    match tail {
        Tail::High => sorted.split_off(sorted.len() - n),
        Tail::Low => {
            sorted.truncate(n);
            sorted
        }
    }
}

/// Maximum-likelihood Weibull fit on the selected tail of `samples`.
pub fn weibull_fit(samples: &[f64], tail_size: usize, tail: Tail) -> Result<WeibullModel> {
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let data = select_tail(samples, tail_size, tail);
    if data.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "weibull fit needs at least 2 tail samples, got {}",
            data.len()
        )));
    }
    if data[0] <= 0.0 {
        return Err(Error::DegenerateTail(format!(
            "non-positive value {} in tail",
            data[0]
        )));
    }
    let (shape, scale) = fit_positive(&data)?;
    WeibullModel::new(shape, scale, tail, data.len())
}

/// MLE on strictly positive, ascending data with at least two values.
fn fit_positive(data: &[f64]) -> Result<(f64, f64)> {
    let xmax = data[data.len() - 1];
    let xmin = data[0];
    if xmin == xmax {
        return Err(Error::DegenerateTail(format!(
            "all {} tail values equal {}",
            data.len(),
            xmin
        )));
    }
    let n = data.len() as f64;
    let ln_x: Vec<f64> = data.iter().map(|&x| (x / xmax).ln()).collect();
    let mean_ln = ln_x.iter().sum::<f64>() / n;

    // g(k) and g'(k) of the profile equation on normalized data.
    let eval = |k: f64| -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &ln_x {
            let p = (k * l).exp();
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        let r = s1 / s0;
        let g = 1.0 / k + mean_ln - r;
        let dg = -1.0 / (k * k) - (s2 / s0 - r * r);
        (g, dg)
    };

    // Start from the Gumbel moment match of ln x: sd(ln x) = pi / (k sqrt 6).
    let var_ln = ln_x.iter().map(|l| (l - mean_ln).powi(2)).sum::<f64>() / n;
    let mut k = if var_ln > 0.0 {
        (std::f64::consts::PI / (6.0 * var_ln).sqrt()).clamp(SHAPE_LO, SHAPE_HI)
    } else {
        1.0
    };

    let mut shape = None;
    for _ in 0..MAX_ITER {
        let (g, dg) = eval(k);
        if !(g.is_finite() && dg.is_finite()) || dg >= 0.0 {
            break;
        }
        let next = k - g / dg;
        if !(next.is_finite() && next > 0.0) {
            break;
        }
        if (next - k).abs() <= NEWTON_TOL * k.max(1.0) {
            shape = Some(next);
            break;
        }
        k = next;
    }

    let shape = match shape {
        Some(k) => k,
        None => bisect(|k| eval(k).0)?,
    };

    let mean_pow = ln_x.iter().map(|&l| (shape * l).exp()).sum::<f64>() / n;
    let scale = xmax * mean_pow.powf(1.0 / shape);
    Ok((shape, scale))
}

fn bisect(g: impl Fn(f64) -> f64) -> Result<f64> {
    let (mut lo, mut hi) = (SHAPE_LO, SHAPE_HI);
    let (glo, ghi) = (g(lo), g(hi));
    if !(glo > 0.0 && ghi < 0.0) {
        return Err(Error::NoConvergence);
    }
    for _ in 0..MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= NEWTON_TOL * mid.max(1.0) {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::NoConvergence)
}

/// `1 - exp(-(d/s)^k)`; negative distances are rejected.
pub fn weibull_cdf(model: &WeibullModel, d: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::NegativeDistance(d));
    }
    if d.is_nan() {
        return Err(Error::NonFinite(0));
    }
    Ok(model.cdf_unchecked(d))
}

/// `exp(-(d/s)^k)`, the complement of [`weibull_cdf`].
pub fn weibull_survival(model: &WeibullModel, d: f64) -> Result<f64> {
    if d < 0.0 {
        return Err(Error::NegativeDistance(d));
    }
    if d.is_nan() {
        return Err(Error::NonFinite(0));
    }
    Ok(model.survival_unchecked(d))
}
