//! Pilot-wave simulator for spin-carrying Gaussian wavepackets.
//!
//! The crate models a small number of one-dimensional degrees of freedom
//! (four particles and a measurement pointer), each carrying a Gaussian
//! packet, together with a shared internal spin state. Wavefunctions are
//! kept in branch-decomposed form: a branch is a complex amplitude times an
//! internal state times a product of packets. Configurations (one real
//! coordinate per degree of freedom) follow the deterministic guidance
//! velocity field of the full wavefunction, and measurement devices act as
//! instantaneous branch rewrites.
//!
//! Module layout:
//! - [`spin`]: sparse internal (spin) states, Bell basis, density matrices
//! - [`packet`]: Gaussian packets, free evolution, overlaps, supports
//! - [`wavefunction`]: registries, branches, Born density, sampling
//! - [`guidance`]: velocity field, RK4 trajectory integration, equivariance
//! - [`devices`]: branch rewrites (spin splitter, Bell analyzer, recombiner)
//! - [`protocol`]: the entanglement-exchange scenario and ensemble runs
//! - [`stats`]: Kolmogorov-Smirnov and chi-square helpers
//! - [`notation`]: parsing and rendering of internal-state expressions

pub mod devices;
pub mod guidance;
pub mod notation;
pub mod packet;
pub mod protocol;
pub mod spin;
pub mod stats;
pub mod wavefunction;

pub use num_complex::Complex64;
