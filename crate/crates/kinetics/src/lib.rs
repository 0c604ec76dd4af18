//! Deterministic kinetic solver for rarefied circular Couette flow between
//! coaxial rotating cylinders.
//!
//! The crate computes the steady velocity-distribution profile of a gas in
//! the annular gap between a rotating outer cylinder and a resting inner one
//! at Knudsen number 1, and certifies its dynamical stability by marching the
//! time-dependent problem with a positivity-preserving scheme. The pieces:
//!
//! * [`geometry`] — exact closed-form characteristics of the curved gap,
//!   turning points, backward exit times, and diffuse-reflection cycles.
//! * [`grid`] — velocity lattice and radial grid with quadrature weights.
//! * [`kinetic`] — the discrete collision machinery: bilinear collision
//!   operator, collision frequency, linearized operator, and the macroscopic
//!   and wall projections.
//! * [`transport`] — backward characteristic sweeps with absorption and the
//!   diffuse wall closure.
//! * [`steady`] — the steady construction: coupled penalized systems, the
//!   two-parameter continuation, and the outer nonlinear iteration.
//! * [`unsteady`] — semi-implicit gain/loss time stepping and decay-rate
//!   fitting.
//! * [`diagnostics`] — norms, moments, mass functionals, and tail reports.
//! * [`config`]/[`io`]/[`runner`] — batch orchestration and bit-stable
//!   artifact output.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod kinetic;
pub mod steady;
pub mod transport;

pub use error::{KineticsError, Result};
