//! Phasor-domain circuit models of inverter-dominated grids with an
//! energy-based stability analysis.
//!
//! The crate covers the three-phase to phasor reduction, a lossless network
//! model, dynamic inverter components, the voltage potential and its
//! Bregman divergence, equilibrium computation, time-domain simulation with
//! energy-identity diagnostics, and a per-component stability certificate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod case;
pub mod certify;
pub mod components;
pub mod equilibrium;
pub mod network;
pub mod phasor;
pub mod potential;
pub mod simulator;
pub mod system;
