//! Noise schedules, the forward process, and ancestral reverse steps.
//!
//! Timesteps run `1..=T`; `alpha_bar(0) = 1` by convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// What a network output (or a conversion) represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    V,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    pub parameterization: Prediction,
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

pub fn make_schedule(kind: ScheduleKind, steps: usize, zero_terminal_snr: bool) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::invalid(format!("schedule needs T >= 2, got {steps}")));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            // Scaled so the total noise matches the 1000-step reference.
            let scale = 1000.0 / steps as f64;
            let (b0, b1) = (scale * LINEAR_BETA_START, scale * LINEAR_BETA_END);
            (0..steps)
                .map(|i| (b0 + (b1 - b0) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let x = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(MAX_BETA))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    if !zero_terminal_snr {
        return DiffusionSchedule::from_alphas(alphas, Prediction::Epsilon);
    }
    DiffusionSchedule::from_alphas(rescale_zero_terminal(&alphas), Prediction::V)
}

/// Shifts and scales `sqrt(alpha_bar)` so its last value is exactly zero
/// while the first is unchanged, then converts back to per-step alphas.
pub fn rescale_zero_terminal(alphas: &[f64]) -> Vec<f64> {
    let mut ab = 1.0;
    let sqrt_ab: Vec<f64> = alphas
        .iter()
        .map(|a| {
            ab *= a;
            ab.sqrt()
        })
        .collect();
    let (first, last) = (sqrt_ab[0], sqrt_ab[sqrt_ab.len() - 1]);
    let rescaled: Vec<f64> = sqrt_ab
        .iter()
        .map(|s| ((s - last) * first / (first - last)).powi(2))
        .collect();
    let mut prev = 1.0;
    rescaled
        .iter()
        .map(|&ab| {
            let a = ab / prev;
            prev = ab;
            a
        })
        .collect()
}

impl DiffusionSchedule {
    /// Validates per-step alphas: each in `[0, 1)`, only the last may be 0.
    pub fn from_alphas(alpha: Vec<f64>, parameterization: Prediction) -> Result<Self> {
        let t = alpha.len();
        if t == 0 {
            return Err(Error::invalid("empty schedule"));
        }
        for (i, &a) in alpha.iter().enumerate() {
            if !(a < 1.0) {
                return Err(Error::invalid(format!(
                    "alpha_{} = {a}: noise must increase at every step",
                    i + 1
                )));
            }
            if !(a > 0.0 || (a == 0.0 && i == t - 1)) {
                return Err(Error::invalid(format!("alpha_{} = {a} outside (0, 1)", i + 1)));
            }
        }
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        let s = Self {
            alpha,
            alpha_bar,
            parameterization,
        };
        if s.terminal_alpha_bar() == 0.0 && parameterization == Prediction::Epsilon {
            return Err(Error::invalid("epsilon prediction is undefined with zero terminal SNR"));
        }
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn terminal_alpha_bar(&self) -> f64 {
        self.alpha_bar[self.steps() - 1]
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Posterior variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients of `x0` and `z_t` in the posterior mean.
    pub fn posterior_mean_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab, ab_prev) = (self.alpha_bar(t), self.alpha_bar(t - 1));
        (
            ab_prev.sqrt() * self.beta(t) / (1.0 - ab),
            self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        )
    }
}

/// Per-item timesteps: a single entry broadcasts over the batch.
fn item_t(ts: &[usize], n: usize, i: usize) -> Result<usize> {
    match ts.len() {
        1 => Ok(ts[0]),
        m if m == n => Ok(ts[i]),
        m => Err(Error::shape("timesteps", &[n], &[m])),
    }
}

/// Calls `f(item, t, data range)` for each item along the leading axis.
fn per_item(
    shape: &[usize],
    ts: &[usize],
    mut f: impl FnMut(usize, usize, std::ops::Range<usize>) -> Result<()>,
) -> Result<()> {
    let n = shape.first().copied().unwrap_or(1);
    let len: usize = shape.iter().skip(1).product();
    for i in 0..n {
        f(i, item_t(ts, n, i)?, i * len..(i + 1) * len)?;
    }
    Ok(())
}

/// `sqrt(ab) z0 + sqrt(1 - ab) eps` with per-item timesteps.
pub fn q_sample<S: Scalar>(z0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, s: &DiffusionSchedule) -> Result<Tensor<S>> {
    if z0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", z0.shape(), eps.shape()));
    }
    let mut out = z0.clone();
    per_item(z0.shape(), ts, |_, t, r| {
        s.check(t)?;
        let (a, b) = s.coefficients(t);
        let (a, b) = (S::lit(a), S::lit(b));
        for k in r {
            out.data_mut()[k] = a * z0.data()[k] + b * eps.data()[k];
        }
        Ok(())
    })?;
    Ok(out)
}

/// The network target for a clean sample and its noise.
pub fn target<S: Scalar>(z0: &Tensor<S>, ts: &[usize], eps: &Tensor<S>, s: &DiffusionSchedule) -> Result<Tensor<S>> {
    match s.parameterization {
        Prediction::Epsilon => Ok(eps.clone()),
        Prediction::Sample => Ok(z0.clone()),
        Prediction::V => {
            let mut out = z0.clone();
            per_item(z0.shape(), ts, |_, t, r| {
                s.check(t)?;
                let (a, b) = s.coefficients(t);
                let (a, b) = (S::lit(a), S::lit(b));
                for k in r {
                    out.data_mut()[k] = a * eps.data()[k] - b * z0.data()[k];
                }
                Ok(())
            })?;
            Ok(out)
        }
    }
}

/// Re-expresses a prediction about `z_t` in another parameterization.
pub fn convert_parameterization<S: Scalar>(
    pred: &Tensor<S>,
    z_t: &Tensor<S>,
    ts: &[usize],
    s: &DiffusionSchedule,
    from: Prediction,
    to: Prediction,
) -> Result<Tensor<S>> {
    if pred.shape() != z_t.shape() {
        return Err(Error::shape("convert_parameterization", pred.shape(), z_t.shape()));
    }
    if from == to {
        return Ok(pred.clone());
    }
    let mut out = pred.clone();
    per_item(pred.shape(), ts, |_, t, r| {
        s.check(t)?;
        if t == 0 {
            return Err(Error::invalid("conversion at t = 0 is undefined"));
        }
        let (a, b) = s.coefficients(t);
        if a == 0.0 && (from == Prediction::Epsilon || to == Prediction::Epsilon) {
            return Err(Error::invalid(format!(
                "epsilon parameterization is undefined where alpha_bar = 0 (t = {t})"
            )));
        }
        for k in r {
            let (p, z) = (pred.data()[k].as_f64(), z_t.data()[k].as_f64());
            let (x0, eps) = match from {
                Prediction::Epsilon => ((z - b * p) / a, p),
                Prediction::V => (a * z - b * p, b * z + a * p),
                Prediction::Sample => (p, (z - a * p) / b),
            };
            out.data_mut()[k] = S::lit(match to {
                Prediction::Epsilon => eps,
                Prediction::Sample => x0,
                Prediction::V => a * eps - b * x0,
            });
        }
        Ok(())
    })?;
    Ok(out)
}

/// Source of posterior noise for reverse steps.
pub enum StepNoise<'a> {
    Fresh(&'a mut Rng),
    /// Posterior mean only.
    None,
}

/// One ancestral step `z_t -> z_{t-1}` from an `x0` estimate. The step at
/// `t = 1` is deterministic.
pub fn posterior_step<S: Scalar>(
    x0: &Tensor<S>,
    z_t: &Tensor<S>,
    t: usize,
    s: &DiffusionSchedule,
    noise: StepNoise<'_>,
) -> Result<Tensor<S>> {
    if t == 0 {
        return Err(Error::invalid("reverse step requires t >= 1"));
    }
    s.check(t)?;
    if x0.shape() != z_t.shape() {
        return Err(Error::shape("posterior_step", x0.shape(), z_t.shape()));
    }
    let (c0, ct) = s.posterior_mean_coefficients(t);
    let sigma = s.posterior_variance(t).max(0.0).sqrt();
    let (c0s, cts) = (S::lit(c0), S::lit(ct));
    let mut out = x0.clone();
    let mut rng = match noise {
        StepNoise::Fresh(r) if t > 1 => Some(r),
        _ => None,
    };
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let mut v = c0s * x0.data()[k] + cts * z_t.data()[k];
        if let Some(r) = rng.as_deref_mut() {
            v += S::lit(sigma * r.normal());
        }
        *o = v;
    }
    Ok(out)
}

/// One ancestral step from a network prediction in the schedule's
/// parameterization.
pub fn ddpm_step<S: Scalar>(
    pred: &Tensor<S>,
    z_t: &Tensor<S>,
    t: usize,
    s: &DiffusionSchedule,
    noise: StepNoise<'_>,
) -> Result<Tensor<S>> {
    let x0 = convert_parameterization(pred, z_t, &[t], s, s.parameterization, Prediction::Sample)?;
    posterior_step(&x0, z_t, t, s, noise)
}

/// A noised sample with the noise that produced it, when known.
#[derive(Clone, Debug)]
pub struct NoisyState<S> {
    pub z_t: Tensor<S>,
    pub t: usize,
    pub eps: Option<Tensor<S>>,
}

impl<S: Scalar> NoisyState<S> {
    pub fn forward(z0: &Tensor<S>, t: usize, s: &DiffusionSchedule, rng: &mut Rng) -> Result<Self> {
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        Ok(Self {
            z_t: q_sample(z0, &[t], &eps, s)?,
            t,
            eps: Some(eps),
        })
    }
}
