//! Policy search on Markov decision processes with exact and sampled
//! second-order information.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] dense solves, eigenvalues and conjugate gradients;
//! * [`mdp`] finite MDPs and their exact values, occupancies and sampling;
//! * [`policy`] Gibbs, tabular-softmax and Gaussian-linear policies;
//! * [`calculus`] the exact gradient, Hessian decomposition, Fisher matrix,
//!   EM surrogate and value-consistency check on finite models;
//! * [`estimators`] trajectory-based estimates of the same quantities;
//! * [`optimizers`] update directions, step-size rules and the ascent loop;
//! * [`env`] gridworlds, cart-pole, navigation and Tetris;
//! * [`experiments`] the training protocols used by the CLI and the tests.

pub mod calculus;
pub mod env;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod fixtures;
pub mod linalg;
pub mod mdp;
pub mod optimizers;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
pub use nalgebra::{DMatrix, DVector};
