//! voterlab: simulation and verification tools for finite-range voter model
//! perturbations on the two-dimensional integer lattice.
//!
//! The crate covers five tightly coupled jobs:
//!
//! * exact certification that a nonlinear voter model admits a cancellative
//!   dual representation ([`cancellative`]);
//! * flip-rate families (q-voter, Lotka-Volterra, affine, geometric,
//!   threshold) and their decomposition as voter model + small perturbation
//!   ([`rates`]);
//! * event-driven spin-flip simulation, including exact shared-noise
//!   couplings and a small-torus transition oracle ([`simulator`]);
//! * coalescing random walk Monte Carlo for the drift constants that govern
//!   the diffusion limit ([`coalescing`], [`drift`]);
//! * rescaled empirical-measure and martingale diagnostics ([`rescale`]).

pub mod cancellative;
pub mod coalescing;
pub mod drift;
pub mod kernels;
pub mod rates;
pub mod rescale;
pub mod rng;
pub mod simulator;
pub mod stats;
