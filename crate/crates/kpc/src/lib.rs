//! Kernel partial correlation ρ²(Y, Z | X): graph-based and RKHS estimators,
//! model-free variable selection, and model-X inference.

pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod graph_est;
pub mod inference;
pub mod kernels;
pub mod oracle;
pub mod rkhs;
pub mod rng;
pub mod select;
pub mod sim;

pub use data::{Column, Dataset, MetricFamily, MetricSpec, Payload, VariableRoles};
pub use error::{KpcError, Result};
pub use graph::{GeometricGraph, GraphKind, GraphSpec};
pub use graph_est::{kpc_graph, t_n, KpcEstimate};
pub use kernels::{Bandwidth, KernelSpec};
pub use rkhs::{kpc_rkhs, kpc_rkhs_lowrank, kpc_rkhs_uncentered, RkhsConfig};
