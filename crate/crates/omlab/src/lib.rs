//! Numerical laboratory for Onsager-Machlup (OM) functionals on metric
//! measure spaces.
//!
//! An OM functional is a generalized negative log-density: for points x, y
//! of a metric measure space (X, d, mu), the ratio of small-ball masses
//! mu(B(r,x)) / mu(B(r,y)) tends to exp(OM(y) - OM(x)) as r -> 0. This
//! crate estimates such limits numerically on three families of discretized
//! spaces (Euclidean grids, finite atom sets, and a Brownian-motion path
//! lattice) and checks how the estimates transform when the metric is
//! conformally reweighted to e^(-U) d0 and the measure is tilted to
//! e^(-V) mu0.
//!
//! Module map:
//!
//! - [`spaces`]: discretized spaces, scalar fields, empirical moduli of
//!   continuity, metric/measure descriptions, CSV and expression ingestion.
//! - [`geodesic`]: conformal shortest-path distances, metric balls, and the
//!   base-ball sandwich check for conformal balls.
//! - [`ballmass`]: ball-mass estimation with quantified error (cell
//!   quadrature, atom sums, Monte Carlo over Wiener measure) plus the
//!   synthetic closed-form law source used by the divergence harness.
//! - [`omfit`]: limit extrapolation — OM differences, local dimension,
//!   small-ball law fitting, anchor-independence checks.
//! - [`verify`]: end-to-end harnesses comparing empirical OM differences
//!   against closed-form predictions under metric/measure reweighting.

pub mod ballmass;
pub mod expr;
pub mod geodesic;
pub mod omfit;
pub mod spaces;
pub mod verify;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
