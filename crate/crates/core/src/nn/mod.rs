//! Dense network primitives.

pub mod linalg;
mod network;

pub use network::{init_params, Architecture, Cache, Layout, NetShape, Network};
