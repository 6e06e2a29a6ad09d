//! Restoration of image sequences degraded by atmospheric turbulence.
//!
//! The library is organised bottom-up: [`grid`] holds the image type and the
//! local difference operators, [`nltv`] the nonlocal similarity graph, and the
//! remaining modules build the stabilization, fusion and deblurring stages on
//! top of them. [`pipeline`] wires everything into the `turbmend` tool.

pub mod deconv;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod imageio;
pub mod metrics;
pub mod nltv;
pub mod pipeline;
pub mod registration;
pub mod rpca;
pub mod scene;
pub mod simulator;
pub mod variational;

pub use error::{Error, Result};
pub use grid::Image;
