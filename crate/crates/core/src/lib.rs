//! Training-free cross-frame attention control for video diffusion, at desk
//! scale.
//!
//! The crate is `no_std` (with `alloc`) and contains every numeric piece of
//! the system: a small dense tensor engine with a reverse-mode tape, a patch
//! transformer video denoiser whose attention sites accept control hooks, the
//! DDIM sampler with classifier-free guidance, the two-branch controlled
//! sampler (first-frame key/value sharing, motion query injection and latent
//! synchronization), evaluation metrics, and a moving-sprites trainer.
//!
//! File formats, image output and the command line live in the `unictrl`
//! companion crate.
#![no_std]

extern crate alloc;

mod error;

pub mod attention;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod sprites;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
