//! Isogeometric solver core for fully incompressible finite-strain
//! elastodynamics.
//!
//! The crate builds tensor-product NURBS discretizations with a mixed
//! pressure-velocity pair (velocity degree `p + a`, continuity raised by `b`),
//! assembles the material-frame weak form of the incompressible
//! elastodynamic system, and integrates it in time with the generalized-alpha
//! method and a segregated predictor/multi-corrector Newton loop. A numerical
//! inf-sup harness classifies the stability of element pairs, and the
//! diagnostics module provides the conserved functionals and error norms used
//! by the benchmark drivers.

pub mod assembly;
pub mod diagnostics;
pub mod geometry;
pub mod infsup;
pub mod materials;
pub mod quadrature;
pub mod spaces;
pub mod splines;
pub mod timesolver;
