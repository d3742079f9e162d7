//! Attenuated geodesic X-ray tomography on a conformally Euclidean disk.
//!
//! The crate covers the full pipeline: geodesic tracing and boundary
//! parameterization ([`geometry`]), fiberwise harmonic analysis and
//! boundary-operator calculus ([`fiber`]), attenuated forward transforms and
//! backprojections ([`xray`]), the Fredholm filtered-backprojection identities
//! and their Neumann solvers ([`fredholm`]), holomorphic integrating factors
//! ([`hif`]), reconstruction drivers ([`inversion`]), and a small CLI layer
//! ([`cli`]).

pub mod cli;
pub mod error;
pub mod fiber;
pub mod fredholm;
pub mod geometry;
pub mod hif;
pub mod inversion;
pub mod xray;

pub use error::{GxError, Result};
