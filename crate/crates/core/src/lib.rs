//! Reverse-refinement network for narrow-road segmentation.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core can be embedded
//! anywhere; the default `std` feature only switches the GEMM backend and the
//! math library to their runtime-dispatched std variants.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod acam;
pub mod autograd;
pub mod checks;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gam;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod ram;
pub mod synth;
pub mod tensor;
pub mod tiling;
pub mod train;

pub use autograd::{ConvGeom, Tape, Var};
pub use error::{Error, Result};
pub use nn::{Graph, Mode, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
