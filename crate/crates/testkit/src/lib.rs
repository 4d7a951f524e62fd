//! Independent reference implementations used as test oracles.
//!
//! Everything in this crate is written as naive, obviously-correct fp64
//! loops with no shared code paths with the production engine. Tests
//! compare the fast fp32 implementations against these references; the
//! two sides must never be collapsed into one.

pub mod adam;
pub mod fd;
pub mod gradsuite;
pub mod masks;
pub mod ref64;
pub mod stats;
pub mod wilcoxon;
