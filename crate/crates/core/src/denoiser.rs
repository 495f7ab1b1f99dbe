use thiserror::Error;

use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("denoiser expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("denoiser failed: {0}")]
    Failed(String),
}

/// Source of the clean-signal estimate `x0_hat(x_t, t)`.
pub trait Denoiser {
    fn denoise(&mut self, x_t: &[f64], t: usize, alpha_bar: f64) -> Result<Vec<f64>, DenoiseError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &mut D {
    fn denoise(&mut self, x_t: &[f64], t: usize, alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        (**self).denoise(x_t, t, alpha_bar)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&mut self, x_t: &[f64], t: usize, alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        (**self).denoise(x_t, t, alpha_bar)
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&mut self, x_t: &[f64], _t: usize, _alpha_bar: f64) -> Result<Vec<f64>, DenoiseError> {
        Ok(x_t.to_vec())
    }
}
