//! Contribution-aware token compression for video token sequences.
//!
//! A small policy network scores every video token and frame by its
//! estimated contribution to a correct answer. The network is trained with
//! combinatorial policy optimization over token subsets drawn by online
//! combinatorial space sampling, against an environment that answers from a
//! token subset. At inference the scores drive per-frame token retention.

pub mod bench;
pub mod cpo;
pub mod diffcore;
pub mod dpc_knn;
pub mod env;
mod error;
pub mod ocss;
pub mod policy;
pub mod retention;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
