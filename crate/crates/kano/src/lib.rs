//! Blind super-resolution by deep unfolding with Kolmogorov-Arnold networks.
//!
//! The crate models observed imagery as `Y = (K conv (O + S)) down s + N`:
//! an anisotropic Gaussian blur `K`, a clean latent `O`, a sparse component
//! `S`, strided decimation and additive white Gaussian noise. Restoration
//! unrolls a proximal-gradient scheme over the three unknowns; the proximal
//! operators are small learned networks built from B-spline KAN layers, and
//! everything trains end to end through a reverse-mode tape.

pub mod cli;
pub mod cube;
pub mod degrade;
pub mod error;
pub mod io;
pub mod kan;
pub mod linops;
pub mod metrics;
pub mod spline;
pub mod tape;
pub mod train;
pub mod unfold;

pub use cube::{Cube, Kernel};
pub use error::{KanoError, Result};
