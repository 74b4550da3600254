//! Data pipeline: bicubic resampling, image file I/O, synthetic textures
//! and training-pair synthesis.

pub mod io;
pub mod resize;
pub mod sample;
pub mod synth;
