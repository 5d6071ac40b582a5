//! Numerical laboratory for the Kähler–Ricci flow from singular initial data
//! on the torus-invariant reduction of P^1.

pub mod capacity;
pub mod error;
pub mod estimates;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod singular;

pub use error::{Error, Result};
