//! Distributed equilibrium seeking for stochastic Nash games with shared
//! affine constraints.
//!
//! Agents minimize expected local costs coupled through both the cost
//! functions and a shared resource constraint. Each agent holds a local
//! decision block, a local dual estimate, and an auxiliary consensus
//! variable; neighbors exchange dual information over an undirected
//! communication graph. The solvers implement a preconditioned
//! forward-backward splitting on the stacked state, together with
//! forward-backward-forward and extragradient baselines, each in
//! deterministic, one-sample, and sample-average flavors.
//!
//! Module map:
//! - [`game`]: game description (decision blocks, box sets, shared affine
//!   constraints, pseudogradient oracles).
//! - [`graph`]: weighted communication graph and matrix-free Laplacian.
//! - [`operators`]: stacked operator algebra, step-size bounds,
//!   preconditioner assembly, residuals, and inclusion checks.
//! - [`sampling`]: counter-keyed sample streams and batch/step schedules.
//! - [`solvers`]: iteration kernels and run drivers with metric recording.
//! - [`cournot`]: networked Cournot benchmark generator with closed-form
//!   gradients and certified monotonicity constants.
//! - [`harness`]: experiment configuration, multi-run orchestration, and
//!   plot-data export.

pub mod cournot;
pub mod game;
pub mod graph;
pub mod harness;
pub mod linalg;
pub mod operators;
pub mod sampling;
pub mod solvers;
