//! Parameter recovery and robustness analysis for linear structural
//! equation models `X = ΛᵀX + η` on bow-free mixed graphs.
//!
//! The crate is organised bottom-up:
//!
//! * [`graph`]: mixed graphs, layering and half-treks.
//! * [`lsem`]: parameter sets, the forward map `Σ = (I−Λ)⁻ᵀ Ω (I−Λ)⁻¹`,
//!   noise recovery and sample covariances.
//! * [`recovery`]: layer-by-layer recovery of `Λ` from `Σ`.
//! * [`robustness`]: perturbations, condition-number estimation and the
//!   error constants that bound it.
//! * [`generators`]: random graphs and parameters.
//! * [`reduction`]: embedding general bow-free DAGs into layered ones.
//! * [`experiments`]: seeded experiment pipelines with JSON reports.

pub mod error;
pub mod experiments;
pub mod generators;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod lsem;
pub mod recovery;
pub mod reduction;
pub mod rng;
pub mod robustness;

pub use error::{Error, ErrorClass, Result};
pub use graph::{DirectedEdge, LayerDecomposition, MixedGraph, VertexId};
pub use lsem::{Covariance, ParamSet, Provenance};
