//! Conditioned coordinate-MLP portrait generator.
//!
//! A per-cell MLP maps lifted grid coordinates plus per-frame conditioning
//! (head pose, expression or audio, gaze, a learned latent) to a feature map
//! that a convolutional decoder upsamples to the output frame.

pub mod audio;
pub mod bench;
pub mod checkpoint;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod model;
pub mod raster;
pub mod render;
pub mod scene;
pub mod tensor_file;
pub mod tracks;
pub mod training;

pub use error::{DnpError, Result};
pub use numcore;
