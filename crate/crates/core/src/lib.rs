//! Stability-certified gated graph neural networks for distributed
//! flocking control.
//!
//! A gated graph recurrent layer is a discrete-time distributed dynamical
//! system: its hidden state lives on the agents of a communication graph
//! and evolves through polynomial graph filters and logistic gates. That
//! view yields closed-form certificates on the weights — contraction
//! margins whose value at most 1 suffices for input-to-state stability and
//! its incremental variant — which this crate computes, enforces during
//! imitation training through a hinge regularizer, and validates on a
//! leader-follower flocking benchmark with a reproducible expert.
//!
//! Modules:
//! - [`mat`]: dense row-major matrices sized for small teams
//! - [`graph`]: proximity graphs and shift operators
//! - [`filters`]: polynomial graph filters, instantaneous and unit-delayed
//! - [`ggnn`]: gated layers, deep stacks, encoder/readout
//! - [`stability`]: margins, gains, certificates, runtime bound audits
//! - [`learn`]: reverse-mode tape, optimizer, datasets, training loop
//! - [`flocking`]: swarm dynamics, expert controller, rollouts, metrics
//! - [`cli`]: the `sggnn` command-line entry points

pub mod cli;
pub mod filters;
pub mod flocking;
pub mod ggnn;
pub mod graph;
pub mod learn;
pub mod mat;
pub mod stability;
