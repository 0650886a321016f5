//! Numerical laboratory for zero-sum stochastic differential games under
//! feedback controls.
//!
//! The crate is organized as a pipeline:
//!
//! * [`expr`] — the coefficient expression language (parse, validate, eval),
//! * [`game_model`] — game specifications, control sets, hypothesis
//!   diagnostics (linear growth, non-degeneracy, Novikov-type boundedness),
//! * [`hamiltonian`] — current-value Hamiltonians, upper/lower envelopes over
//!   discretized control sets, saddle selection,
//! * [`bi_solver`] — explicit finite-difference solver for the upper/lower
//!   Bellman–Isaacs equations and the single-controller HJB equation,
//! * [`sde_engine`] — closed-loop Euler–Maruyama simulation with reproducible
//!   counter-based seeding,
//! * [`verifier`] — Monte-Carlo checks of the verification statements
//!   (pathwise payoff decomposition, saddle-point tests, game value, control
//!   optimality),
//! * [`cli`] — the `isaacslab` command-line front end.

pub mod bi_solver;
pub mod cli;
pub mod expr;
pub mod game_model;
pub mod hamiltonian;
pub mod sde_engine;
pub mod verifier;
