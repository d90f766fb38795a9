//! Parallel liquid-inspired relaxation blocks (LPTB), a feature-pyramid
//! temporal action detector built from them, sequential reference backends,
//! and the tooling to train, evaluate and benchmark everything on synthetic
//! data.

pub mod array;
pub mod bench;
pub mod checkpoint;
pub mod autodiff;
mod error;
pub mod experiments;
mod real;

pub use error::{Error, Result};
pub use real::{Precision, Real};
pub mod liquid;
pub mod pyramid;
pub mod synthetic;
pub mod train;
mod seed;

pub use seed::derive_seed;
