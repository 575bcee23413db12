//! Benchmark problems: maze gridworlds, cart-pole swing-up, a nonlinear
//! navigation task and simplified Tetris.

pub mod cartpole;
pub mod gridworld;
pub mod navigation;
pub mod tetris;

pub use cartpole::{CartPole, CartPoleState, RbfFeatures};
pub use gridworld::{build_hallway, build_mccallum, Gridworld, GridworldSpec, Move};
pub use navigation::{NavState, Navigation, ParameterNoisePolicy};
pub use tetris::{PlacementFeatures, Placement, TetrisBoard};
