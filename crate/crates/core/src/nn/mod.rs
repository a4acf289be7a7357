//! Minimal reverse-mode autodiff over `ndarray`, plus parameter storage and Adam.
//!
//! The whole pipeline runs in f64 so analytic gradients can be checked against
//! central finite differences without a separate precision path.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod store;

pub use graph::{Graph, Var};
pub use optim::Adam;
pub use store::{ParamId, ParamStore};
