#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Multi-agent reach-avoid games.
//!
//! Hamilton-Jacobi reach-avoid tubes for the 1 vs. 1 (4-D) and 2 vs. 1 (6-D)
//! games, optimal defender feedback derived from them, and an assignment
//! layer that scales the pairwise results to M attackers vs. N defenders by
//! re-solving a small integer program every simulation step.

pub mod assignment;
pub mod cache;
pub mod eikonal;
pub mod engine;
pub mod export;
pub mod games;
pub mod geometry;
pub mod grid;
pub mod hji;
pub mod scenario;

pub use grid::{make_grid, Field, Grid, Scalar};
