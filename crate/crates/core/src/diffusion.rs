//! Noise schedules and the reverse-process update rules.
//!
//! Steps are 1-based: `alpha_bar(t)` for `t in 1..=T`, with `alpha_bar(0) = 1`.

use thiserror::Error;

use crate::rng::{self, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error("step {0} does not take a noise term")]
    NoiseAtFinalStep(usize),
    #[error("degenerate schedule at step {0}: 1 - alpha_bar = 0")]
    Degenerate(usize),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// Schedule tags carried in the container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear interpolation of `alpha_bar` from 0.9999 down to 0.02.
    Linear,
    /// Squared-cosine `alpha_bar` with offset 0.008.
    Cosine,
    /// Explicit values; not representable in a container.
    Custom,
}

impl ScheduleKind {
    pub fn id(self) -> Option<u8> {
        match self {
            ScheduleKind::Linear => Some(0),
            ScheduleKind::Cosine => Some(1),
            ScheduleKind::Custom => None,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::Cosine),
            _ => None,
        }
    }
}

const LINEAR_FIRST: f64 = 0.9999;
const LINEAR_LAST: f64 = 0.02;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    /// `alpha_bar[t]` for `t in 0..=T`; index 0 holds the implicit 1.
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self, DiffusionError> {
        if steps < 2 {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        let values: Vec<f64> = match kind {
            ScheduleKind::Linear => (1..=steps)
                .map(|t| {
                    let frac = (t - 1) as f64 / (steps - 1) as f64;
                    LINEAR_FIRST + (LINEAR_LAST - LINEAR_FIRST) * frac
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |tau: f64| {
                    let a = (tau + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
                    a.cos().powi(2)
                };
                let f0 = f(0.0);
                (1..=steps).map(|t| f(t as f64 / (steps + 1) as f64) / f0).collect()
            }
            ScheduleKind::Custom => {
                return Err(DiffusionError::InvalidSchedule(
                    "custom schedules are built with from_alpha_bar".into(),
                ))
            }
        };
        Self::build(kind, values)
    }

    pub fn linear(steps: usize) -> Result<Self, DiffusionError> {
        Self::new(ScheduleKind::Linear, steps)
    }

    /// Schedule from explicit `alpha_bar_1..alpha_bar_T`.
    pub fn from_alpha_bar(values: Vec<f64>) -> Result<Self, DiffusionError> {
        Self::build(ScheduleKind::Custom, values)
    }

    fn build(kind: ScheduleKind, values: Vec<f64>) -> Result<Self, DiffusionError> {
        if values.len() < 2 {
            return Err(DiffusionError::InvalidSchedule("need at least 2 steps".into()));
        }
        if !(values[0] <= 1.0 && values[0] > 0.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "alpha_bar_1 = {} outside (0, 1]",
                values[0]
            )));
        }
        for (i, w) in values.windows(2).enumerate() {
            if !(w[1] < w[0] && w[1] > 0.0) {
                return Err(DiffusionError::InvalidSchedule(format!(
                    "alpha_bar must decrease strictly and stay positive (step {})",
                    i + 2
                )));
            }
        }
        let mut alpha_bar = Vec::with_capacity(values.len() + 1);
        alpha_bar.push(1.0);
        alpha_bar.extend(values);
        Ok(Self { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `alpha_bar(t)` for `t in 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha(t)).sqrt()
    }

    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients, DiffusionError> {
        if t == 0 || t > self.steps() {
            return Err(DiffusionError::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(StepCoefficients {
            alpha_bar_prev: self.alpha_bar[t - 1],
            alpha_bar: self.alpha_bar[t],
        })
    }
}

/// The pair `(alpha_bar_{t-1}, alpha_bar_t)` that every update rule needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha_bar_prev: f64,
    pub alpha_bar: f64,
}

impl StepCoefficients {
    pub fn alpha(&self) -> f64 {
        self.alpha_bar / self.alpha_bar_prev
    }

    pub fn sigma(&self) -> f64 {
        (1.0 - self.alpha()).max(0.0).sqrt()
    }

    /// Weights `(on x0_hat, on x_t)` of the posterior mean.
    pub fn posterior_weights(&self) -> Option<(f64, f64)> {
        let denom = 1.0 - self.alpha_bar;
        if denom <= 0.0 {
            return None;
        }
        let alpha = self.alpha();
        let w_x0 = self.alpha_bar_prev.sqrt() * (1.0 - alpha) / denom;
        let w_xt = alpha.sqrt() * (1.0 - self.alpha_bar_prev) / denom;
        Some((w_x0, w_xt))
    }

    pub fn posterior_mean(&self, x_t: &[f64], x0_hat: &[f64]) -> Option<Vec<f64>> {
        let (w_x0, w_xt) = self.posterior_weights()?;
        Some(x0_hat.iter().zip(x_t).map(|(&h, &x)| w_x0 * h + w_xt * x).collect())
    }

    /// Deterministic (eta = 0) DDIM update.
    pub fn ddim(&self, x_t: &[f64], x0_hat: &[f64]) -> Option<Vec<f64>> {
        let denom = (1.0 - self.alpha_bar).sqrt();
        if denom <= 0.0 {
            return None;
        }
        let keep = self.alpha_bar_prev.sqrt();
        let noise_w = (1.0 - self.alpha_bar_prev).sqrt();
        let signal = self.alpha_bar.sqrt();
        Some(
            x_t.iter()
                .zip(x0_hat)
                .map(|(&x, &h)| keep * h + noise_w * (x - signal * h) / denom)
                .collect(),
        )
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<(), DiffusionError> {
    if a.len() != b.len() {
        return Err(DiffusionError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    Ok(())
}

/// Posterior mean of `x_{t-1}` given `x_t` and the clean-signal estimate.
pub fn posterior_mean(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_dims(x_t, x0_hat)?;
    if t < 2 {
        return Err(DiffusionError::StepOutOfRange { t, steps: sched.steps() });
    }
    sched
        .coefficients(t)?
        .posterior_mean(x_t, x0_hat)
        .ok_or(DiffusionError::Degenerate(t))
}

/// `mu_t(x_t) + sigma_t * z`; the final step takes no noise and is rejected.
pub fn codebook_step(
    x_t: &[f64],
    x0_hat: &[f64],
    z: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    if t == 1 {
        return Err(DiffusionError::NoiseAtFinalStep(t));
    }
    check_dims(x_t, z)?;
    let mut mean = posterior_mean(x_t, x0_hat, t, sched)?;
    let sigma = sched.sigma(t);
    for (m, &zi) in mean.iter_mut().zip(z) {
        *m += sigma * zi;
    }
    Ok(mean)
}

pub fn ddim_step(
    x_t: &[f64],
    x0_hat: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    check_dims(x_t, x0_hat)?;
    sched
        .coefficients(t)?
        .ddim(x_t, x0_hat)
        .ok_or(DiffusionError::Degenerate(t))
}

/// Seeded standard-normal `x_T`, shared by encoder and decoder.
pub fn initial_state(seed: u64, dim: usize) -> Vec<f64> {
    let mut buf = vec![0f32; dim];
    rng::fill_gaussian(seed, Domain::InitialState, 0, 0, &mut buf);
    buf.into_iter().map(f64::from).collect()
}
