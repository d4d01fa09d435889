//! Latent force-field discovery for interacting particle systems.
//!
//! Equivariant graph networks operate in per-object local frames; a neural
//! field queried at each object's position supplies the forces exerted by an
//! unobserved external field. All heavy loops have a data-parallel path
//! (feature `parallel`, default) and an identical sequential path.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod gnn;
pub mod nn;
pub mod par;
pub mod simulate;
pub mod train;

pub use error::{Error, Result};
