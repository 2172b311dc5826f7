//! Allocation-only core of `adaptlab`.
//!
//! Everything in this crate is a pure function of its inputs and seeds: the
//! tape-based autodiff engine, the RoBERTa-style encoder, bottleneck adapters
//! and the freeze policy, AdamW with warmup/decay scheduling, MLM corruption,
//! byte-level BPE, and BIO span scoring. File formats, wall clocks and the
//! command line live in the `adaptlab` crate.
//!
//! The crate is `no_std` and only needs `alloc`. Transcendental functions go
//! through `libm` so results do not depend on the platform's math library.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod adapters;
pub mod bpe;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod masking;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tagging;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Graph, Var};
pub use tensor::Tensor;
