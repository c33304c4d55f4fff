//! Hierarchical hypergraph group recommendation with double-scale node-dropout
//! self-supervision.
//!
//! Users are vertices of a hypergraph whose hyperedges are groups. User
//! representations are smoothed over that hypergraph, pooled into groups with
//! attention, and refined over a group graph whose edges are closed triangles
//! of member overlap. The self-supervised variant trains two user towers on
//! coarse- and fine-grained node-dropout views and contrasts them.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hypergraph;
pub mod model;
pub mod rng;
pub mod sparse;
pub mod train;

pub use error::{Error, Result};
