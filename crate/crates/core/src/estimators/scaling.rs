//! Temperature and vector scaling of classifier logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::softmax;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalingCalibrator {
    /// `z / T`.
    Temperature { temperature: f64 },
    /// `w ⊙ z + b` (diagonal matrix scaling).
    Vector { scale: Vec<f64>, bias: Vec<f64> },
}

impl ScalingCalibrator {
    pub fn identity_temperature() -> Self {
        ScalingCalibrator::Temperature { temperature: 1.0 }
    }

    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        match self {
            ScalingCalibrator::Temperature { temperature } => logits.iter().map(|z| z / temperature).collect(),
            ScalingCalibrator::Vector { scale, bias } => logits
                .iter()
                .zip(scale.iter().zip(bias))
                .map(|(z, (w, b))| w * z + b)
                .collect(),
        }
    }

    pub fn probabilities(&self, logits: &[f64]) -> Vec<f64> {
        softmax(&self.apply(logits))
    }

    pub fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        match self {
            ScalingCalibrator::Temperature { temperature } => {
                if !(temperature.is_finite() && *temperature > 0.0) {
                    return Err(Error::ModelFile(format!("temperature {temperature} must be positive")));
                }
            }
            ScalingCalibrator::Vector { scale, bias } => {
                if scale.len() != bias.len() || num_classes.is_some_and(|c| c != scale.len()) {
                    return Err(Error::ModelFile("vector scaling has the wrong dimension".into()));
                }
                if scale.iter().chain(bias).any(|v| !v.is_finite()) {
                    return Err(Error::ModelFile("vector scaling has non-finite parameters".into()));
                }
            }
        }
        Ok(())
    }
}

fn check_data(logits: &[Vec<f64>], labels: &[usize]) -> Result<usize> {
    if logits.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} logit rows but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.len() < 2 {
        return Err(Error::InvalidInput("scaling needs at least 2 samples".into()));
    }
    let c = logits[0].len();
    if c < 2 {
        return Err(Error::InvalidInput("scaling needs at least 2 classes".into()));
    }
    if logits.iter().any(|z| z.len() != c || z.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(
            "logit rows must share one length and be finite".into(),
        ));
    }
    if let Some(l) = labels.iter().find(|l| **l >= c) {
        return Err(Error::InvalidInput(format!("label {l} out of range for {c} classes")));
    }
    if labels.iter().all(|l| *l == labels[0]) {
        return Err(Error::InvalidInput(
            "labels are degenerate: only one class is present".into(),
        ));
    }
    Ok(c)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood of `softmax(z / t)`.
pub fn temperature_nll(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let s: Vec<f64> = z.iter().map(|v| v / t).collect();
            log_sum_exp(&s) - s[y]
        })
        .sum();
    total / logits.len() as f64
}

/// Golden-section minimization of `f` on `[lo, hi]` until the bracket is
/// narrower than `tol`.
pub fn golden_section(mut lo: f64, mut hi: f64, tol: f64, f: impl Fn(f64) -> f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

/// Fits a single temperature by minimizing NLL over `log T ∈ [ln 0.05, ln 20]`.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<ScalingCalibrator> {
    check_data(logits, labels)?;
    let u = golden_section(T_MIN.ln(), T_MAX.ln(), 1e-4, |u| {
        temperature_nll(logits, labels, u.exp())
    });
    Ok(ScalingCalibrator::Temperature { temperature: u.exp() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorFitConfig {
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for VectorFitConfig {
    fn default() -> Self {
        VectorFitConfig {
            learning_rate: 0.1,
            iterations: 2000,
        }
    }
}

/// Fits diagonal scaling and bias by full-batch gradient descent on mean NLL,
/// starting from the identity.
///
/// Descent runs on standardized logits `u = (z − μ) / σ` with `s = a·u + c`,
/// which is the same family as `w·z + b` but far better conditioned when the
/// logits have large means; the result is mapped back to `(w, b)`.
pub fn fit_vector(logits: &[Vec<f64>], labels: &[usize], cfg: VectorFitConfig) -> Result<ScalingCalibrator> {
    let c = check_data(logits, labels)?;
    let n = logits.len() as f64;
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for z in logits {
        for k in 0..c {
            mu[k] += z[k] / n;
        }
    }
    for z in logits {
        for k in 0..c {
            sd[k] += (z[k] - mu[k]).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let u: Vec<Vec<f64>> = logits
        .iter()
        .map(|z| (0..c).map(|k| (z[k] - mu[k]) / sd[k]).collect())
        .collect();
    let mut a = sd.clone();
    let mut b = mu.clone();
    let mut ga = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for _ in 0..cfg.iterations {
        ga.fill(0.0);
        gb.fill(0.0);
        for (z, &y) in u.iter().zip(labels) {
            let s: Vec<f64> = (0..c).map(|k| a[k] * z[k] + b[k]).collect();
            let p = softmax(&s);
            for k in 0..c {
                let d = p[k] - (k == y) as u8 as f64;
                ga[k] += d * z[k];
                gb[k] += d;
            }
        }
        for k in 0..c {
            a[k] -= cfg.learning_rate * ga[k] / n;
            b[k] -= cfg.learning_rate * gb[k] / n;
        }
    }
    let w: Vec<f64> = (0..c).map(|k| a[k] / sd[k]).collect();
    let mut b: Vec<f64> = (0..c).map(|k| b[k] - w[k] * mu[k]).collect();
    // Softmax ignores a common offset; report the zero-mean representative.
    let offset = b.iter().sum::<f64>() / c as f64;
    b.iter_mut().for_each(|v| *v -= offset);
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("vector scaling diverged".into()));
    }
    Ok(ScalingCalibrator::Vector { scale: w, bias: b })
}

/// Mean NLL of labels under a calibrator.
pub fn nll(cal: &ScalingCalibrator, logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let s = cal.apply(z);
            log_sum_exp(&s) - s[y]
        })
        .sum::<f64>()
        / logits.len() as f64
}
