//! Audio-visual speech recognition with a 3D-tubelet transformer (or (2+1)D
//! convolutional) video front-end, transformer/conformer encoders and an
//! RNN-T decoder, built on a small f64 reverse-mode autodiff engine.

pub mod audio;
pub mod augment;
pub mod encoder;
pub mod error;
pub mod heap;
pub mod io;
pub mod nn;
pub mod par;
pub mod rnnt;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
