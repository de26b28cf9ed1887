pub mod error;
pub mod fft;
pub mod ga;
pub mod grid;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod nnet;
pub mod rng;
pub mod scattering;
pub mod synth;
pub mod xai;

pub use error::{Error, Result};
