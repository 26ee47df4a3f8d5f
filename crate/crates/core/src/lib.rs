//! Algorithmic core for a unified multimodal autoregressive model.
//!
//! Everything in this crate is pure computation over heap-allocated
//! buffers: dense tensors with reverse-mode autodiff, a VQ image
//! tokenizer, a small grid-capable ViT, the joint-vocabulary language
//! model, the staged training loop, and the decoding strategies for
//! both tasks. File formats, logging and the CLI live in the companion
//! `duovis` crate.
//!
//! The crate is `no_std` (with `alloc`); all float math goes through
//! [`Real`], which is backed by `libm` so results are identical across
//! platforms.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod real;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod tape;
pub mod trainer;
pub mod tensor;
pub mod vit;
pub mod vq;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
