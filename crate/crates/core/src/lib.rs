//! Image compression by steering a diffusion sampler with a sparse
//! combination of reproducible Gaussian atoms at every step.

pub mod bench;
pub mod bitstream;
pub mod cli;
pub mod codec;
pub mod codebook;
pub mod denoiser;
pub mod diffusion;
pub mod image_io;
pub mod linalg;
pub mod rate_control;
pub mod rng;
pub mod selection;
pub mod testbed;
pub mod wire;
