//! Certified upper bounds on the l2 Lipschitz constant of fully-connected
//! feed-forward neural networks.
//!
//! The bound is obtained by abstracting the (shared, slope-restricted)
//! activation function with incremental quadratic constraints, assembling a
//! linear matrix inequality in the squared bound `rho` and a structured
//! multiplier matrix `T`, and minimizing `rho` subject to that LMI with an
//! embedded log-barrier interior-point solver. Every returned certificate is
//! re-verified a posteriori with an independent dense eigensolver, so the
//! reported bound does not rely on solver numerics.
//!
//! Module map:
//!
//! - [`numerics`]: dense symmetric linear algebra (power iteration, cyclic
//!   Jacobi eigenvalues, Cholesky factorization).
//! - [`model`]: network representation, JSON loading, evaluation, splitting
//!   into sub-networks.
//! - [`lmi`]: multiplier matrices, structure blocks, and assembly of the
//!   certificate matrix `M(rho, T)` together with its basis decomposition.
//! - [`sdp`]: the barrier solver (Phase I feasibility + Phase II descent) and
//!   certificate verification/restoration.
//! - [`analysis`]: user-facing orchestration: naive bounds, certified bounds
//!   in all coupling modes, sub-network splitting, norm conversion, empirical
//!   lower bounds, and robustness radii.

pub mod analysis;
pub mod lmi;
pub mod model;
pub mod numerics;
pub mod sdp;

pub use analysis::{BoundReport, NormOrder, NormProfile, RadiusCertificate};
pub use lmi::{CouplingMode, LmiProgram, MultiplierSpec};
pub use model::{Activation, ActivationKind, FeedForwardNetwork, SectorBounds};
pub use numerics::{DenseMatrix, SymMatrix};
pub use sdp::{LipschitzCertificate, SolveStats, SolverConfig};
