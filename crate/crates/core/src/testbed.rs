//! Analytic denoising under a diagonal Gaussian prior, plus image metrics.

use thiserror::Error;

use crate::denoiser::{DenoiseError, Denoiser};
use crate::diffusion::DiffusionSchedule;
use crate::rng::{CounterStream, Domain};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PriorError {
    #[error("mean has {mean} entries but variance has {var}")]
    Shape { mean: usize, var: usize },
    #[error("variances must be positive and finite")]
    Variance,
}

/// Independent coordinates `x_i ~ N(mean_i, var_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrior {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self, PriorError> {
        if mean.len() != var.len() {
            return Err(PriorError::Shape { mean: mean.len(), var: var.len() });
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PriorError::Variance);
        }
        Ok(Self { mean, var })
    }

    /// Zero mean with variances evenly spaced over `[lo, hi]`.
    pub fn ramp(dim: usize, lo: f64, hi: f64) -> Result<Self, PriorError> {
        let var = (0..dim)
            .map(|i| if dim == 1 { lo } else { lo + (hi - lo) * i as f64 / (dim - 1) as f64 })
            .collect();
        Self::new(vec![0.0; dim], var)
    }

    /// The default test prior: variances over `[0.25, 4]`.
    pub fn default_ramp(dim: usize) -> Self {
        Self::ramp(dim, 0.25, 4.0).expect("valid ramp")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// A reproducible draw; `index` selects an independent sample.
    pub fn sample(&self, seed: u64, index: u32) -> Vec<f64> {
        let mut s = CounterStream::new(seed, Domain::Auxiliary, index);
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| m + v.sqrt() * s.next_gaussian())
            .collect()
    }

    /// Exact posterior mean `E[x0 | x_t]` when `x_t = sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub fn posterior_mean(&self, x_t: &[f64], alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        if x_t.len() != self.dim() {
            return Err(DenoiseError::DimensionMismatch { expected: self.dim(), got: x_t.len() });
        }
        let s = alpha_bar.sqrt();
        Ok(x_t
            .iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(&x, (&m, &v))| m + s * v * (x - s * m) / (alpha_bar * v + 1.0 - alpha_bar))
            .collect())
    }
}

impl Denoiser for GaussianPrior {
    fn denoise(&mut self, x_t: &[f64], _t: usize, alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        self.posterior_mean(x_t, alpha_bar)
    }
}

/// `E[x0 | x_t]` at step `t` of `sched`.
pub fn mmse_denoise(
    x_t: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    prior: &GaussianPrior,
) -> Result<Vec<f64>, DenoiseError> {
    prior.posterior_mean(x_t, sched.alpha_bar(t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
}

/// MSE after clamping both inputs to `[0, 1]`.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "metric inputs differ in length");
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum();
    sum / a.len() as f64
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR with unit peak on `[0, 1]` data; `+inf` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    psnr_from_mse(mse(a, b))
}

/// Metrics for working-space vectors in `[-1, 1]`.
pub fn signed_metrics(a: &[f64], b: &[f64]) -> Metrics {
    let ua: Vec<f64> = a.iter().map(|x| (x + 1.0) / 2.0).collect();
    let ub: Vec<f64> = b.iter().map(|x| (x + 1.0) / 2.0).collect();
    let mse = mse(&ua, &ub);
    Metrics { mse, psnr: psnr_from_mse(mse) }
}
