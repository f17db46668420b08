//! Linear prediction: autocorrelation, Levinson-Durbin, stability checks.
//!
//! Coefficients use the predictor convention `x̂[n] = Σᵢ aᵢ·x[n−i]`, so the
//! analysis filter is `A(z) = 1 − Σᵢ aᵢ z⁻ⁱ`.

use crate::error::{Error, Result};

/// Normalized autocorrelation peak above which a frame counts as voiced.
pub const VOICING_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LpcFrame {
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    /// Square root of the per-sample prediction-error power.
    pub gain: f64,
    pub voiced: bool,
}

impl LpcFrame {
    pub fn order(&self) -> usize {
        self.coeffs.len()
    }
}

/// Biased autocorrelation `r[l] = Σ x[n]·x[n+l] / N` for `l = 0..=max_lag`.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    (0..=max_lag)
        .map(|lag| {
            if lag >= n {
                return 0.0;
            }
            let s: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            s / n as f64
        })
        .collect()
}

/// Output of the Levinson-Durbin recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct Levinson {
    pub coeffs: Vec<f64>,
    pub reflection: Vec<f64>,
    pub error_power: f64,
}

/// Solves the autocorrelation normal equations `R a = r` for predictor
/// coefficients. If the prediction error reaches zero (a perfectly
/// predictable signal) the recursion stops and higher orders stay zero.
pub fn levinson_durbin(r: &[f64], order: usize) -> Levinson {
    assert!(r.len() > order, "need order + 1 autocorrelation lags");
    let mut a = vec![0.0; order];
    let mut reflection = vec![0.0; order];
    let mut err = r[0];
    if err <= 0.0 {
        return Levinson {
            coeffs: a,
            reflection,
            error_power: 0.0,
        };
    }
    let mut prev = vec![0.0; order];
    for i in 0..order {
        let mut acc = r[i + 1];
        for j in 0..i {
            acc -= a[j] * r[i - j];
        }
        let k = acc / err;
        prev[..i].copy_from_slice(&a[..i]);
        for j in 0..i {
            a[j] = prev[j] - k * prev[i - 1 - j];
        }
        a[i] = k;
        reflection[i] = k;
        err *= 1.0 - k * k;
        if err <= r[0] * 1e-12 {
            err = err.max(0.0);
            break;
        }
    }
    Levinson {
        coeffs: a,
        reflection,
        error_power: err,
    }
}

/// LPC analysis of an already windowed frame.
pub fn lpc_analyze(frame: &[f64], order: usize) -> Result<LpcFrame> {
    if frame.len() <= order {
        return Err(Error::Invalid(format!(
            "frame length {} must exceed LPC order {order}",
            frame.len()
        )));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("frame contains non-finite samples".into()));
    }
    let r = autocorrelation(frame, order);
    let lev = levinson_durbin(&r, order);
    Ok(LpcFrame {
        coeffs: lev.coeffs,
        reflection: lev.reflection,
        gain: lev.error_power.max(0.0).sqrt(),
        voiced: voicing_strength(frame, 0, frame.len() / 2) > VOICING_THRESHOLD,
    })
}

/// Scales `aᵢ` by `γⁱ`, pulling every pole radius in by `γ`.
pub fn bandwidth_expand(coeffs: &[f64], gamma: f64) -> Vec<f64> {
    let mut g = 1.0;
    coeffs
        .iter()
        .map(|&a| {
            g *= gamma;
            a * g
        })
        .collect()
}

/// Recovers reflection coefficients by the step-down recursion. Returns
/// `None` when some `|kᵢ| ≥ 1`, i.e. the synthesis filter is unstable.
pub fn reflection_coefficients(coeffs: &[f64]) -> Option<Vec<f64>> {
    let p = coeffs.len();
    let mut a = coeffs.to_vec();
    let mut k = vec![0.0; p];
    for i in (0..p).rev() {
        let ki = a[i];
        if ki.abs() >= 1.0 {
            return None;
        }
        k[i] = ki;
        let denom = 1.0 - ki * ki;
        let prev: Vec<f64> = (0..i).map(|j| (a[j] + ki * a[i - 1 - j]) / denom).collect();
        a[..i].copy_from_slice(&prev);
    }
    Some(k)
}

/// Maximum normalized cross-correlation over lags `[min_lag, max_lag]`.
pub fn voicing_strength(x: &[f64], min_lag: usize, max_lag: usize) -> f64 {
    let n = x.len();
    let lo = min_lag.max(1);
    let hi = max_lag.min(n.saturating_sub(1));
    let mut best = 0.0f64;
    for lag in lo..=hi {
        let (a, b) = (&x[..n - lag], &x[lag..]);
        let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let ea: f64 = a.iter().map(|v| v * v).sum();
        let eb: f64 = b.iter().map(|v| v * v).sum();
        if ea > 0.0 && eb > 0.0 {
            best = best.max(num / (ea * eb).sqrt());
        }
    }
    best
}
