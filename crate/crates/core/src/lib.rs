//! Deterministic particle schemes for 1-D non-local scalar conservation laws
//! with congestion: the integrated- and sampled-interaction ODE systems, the
//! multi-species extension, an adaptive Dormand–Prince integrator, and the
//! diagnostics (support/density/TV monitors, entropy residual, convergence
//! studies, finite-volume cross-validation) that make the analytical bounds
//! executable.

pub mod cli;
pub mod density;
pub mod diagnostics;
pub mod dynamics;
pub mod exprdsl;
pub mod integrator;
pub mod reference;
pub mod scenario;

#[cfg(test)]
pub(crate) mod testutil;
