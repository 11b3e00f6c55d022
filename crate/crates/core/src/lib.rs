//! Joint diffusion over data and scalar weights, sampled with self-weighted
//! guidance, plus exact oracles for checking it at small scale.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod critic;
pub mod denoiser;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::Tensor;
