//! Semi-supervised volumetric segmentation with a convolutional segmenter and a
//! diffusion-conditioned segmenter trained by cross pseudo-supervision.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. Everything here is pure computation: file formats, the command
//! line and run directories live in the `diffcl` companion crate.
//!
//! Layout conventions used throughout:
//!
//! * volumes are row-major `[N, C, X, Y, Z]` with `Z` fastest;
//! * token sequences are channel-last `[N, L, C]`;
//! * all arithmetic is `f64`.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod ddim;
mod error;
pub mod evalkit;
pub mod fft;
pub mod hfmamba;
pub mod labelprop;
mod linalg;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod params;
mod tensor;
pub mod trainer;
pub mod voldata;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded generator used everywhere a draw is made. Its full state is
/// `(seed, stream, word_pos)`, which is what checkpoints persist.
pub type Rng = rand_chacha::ChaCha8Rng;
