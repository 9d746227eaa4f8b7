//! Cascaded quantum two-way time transfer: analytic precision model,
//! time-tag simulation, coincidence timing, cascade orchestration and
//! campaign statistics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cascade;
pub mod coincidence;
pub mod runner;
pub mod stats;
pub mod timetag;
