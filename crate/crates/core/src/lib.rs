//! Numerical laboratory for the projection-constrained linear-quadratic
//! mean-field game with forward-backward state dynamics.
//!
//! The pipeline is: validate a [`model::ModelSpec`], build a
//! [`noise_tree::ScenarioTree`], solve the consistency system with
//! [`cc_solver::solve_cc`], simulate finite populations with
//! [`population`], and measure convergence rates and best-response gains
//! with [`nash_lab`].

pub mod convexset;
pub mod linalg;
pub mod model;
pub mod noise_tree;
pub mod cc_solver;
pub mod fixtures;
pub mod population;
pub mod nash_lab;
