//! Single-example adversarial synthesis of layered one-shot sound effects.
//!
//! Each layer becomes one channel of a log-magnitude spectrogram. A multi-stage generator
//! is trained coarse to fine against patch critics; variations are drawn from noise at
//! retargeted widths, inverted with Griffin-Lim and remixed.

pub mod audio_io;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod inference;
pub mod model;
pub mod optim;
pub mod pyramid;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
