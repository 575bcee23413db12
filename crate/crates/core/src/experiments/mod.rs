//! Training protocols for the benchmark problems.

pub mod cartpole;
pub mod diagnostics;
pub mod navigation;
pub mod tetris;
