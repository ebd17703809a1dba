use nalgebra::DMatrix;
use thiserror::Error;

use crate::graph::VertexId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// The input violates a structural or configuration contract.
    Validation,
    /// The input is well formed but a numerical step failed.
    Numerical,
    /// Reading or writing an artifact failed.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("vertex {vertex} is out of range for a graph with {n} vertices")]
    VertexOutOfRange { vertex: usize, n: usize },

    #[error("self-loop at vertex {0}")]
    SelfLoop(VertexId),

    #[error("duplicate edge between {0} and {1}")]
    DuplicateEdge(VertexId, VertexId),

    #[error("directed edges contain a cycle: {}", fmt_cycle(.cycle))]
    Cycle { cycle: Vec<VertexId> },

    #[error("graph is not bow-free; bows at {pairs:?}")]
    NotBowFree { pairs: Vec<(VertexId, VertexId)> },

    #[error("zero-pattern violation: {0}")]
    Pattern(String),

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eigenvalue:e})")]
    Definiteness { min_eigenvalue: f64 },

    #[error("near-singular system{}: smallest singular value {sigma_min:e} against norm {norm:e}", fmt_vertex(.vertex))]
    NearSingular {
        vertex: Option<VertexId>,
        sigma_min: f64,
        norm: f64,
    },

    #[error("vertex {vertex} needs the weights into parent {parent}, which are not recovered yet")]
    Ordering { vertex: VertexId, parent: VertexId },

    #[error("pattern projection did not converge after {iterations} iterations (last step {last_step:e})")]
    ProjectionConvergence {
        iterations: usize,
        last_step: f64,
        last: Box<DMatrix<f64>>,
    },

    #[error("fixed-point iteration for eta did not converge after {iterations} iterations")]
    EtaConvergence { iterations: usize, last: f64 },

    #[error("premise violated: {0}")]
    Premise(String),

    #[error("at least 2 observations are required, got {0}")]
    SampleSize(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("relative distance is undefined: reference matrix is identically zero")]
    UndefinedDistance,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("vertex allocator exhausted (limit {limit})")]
    Capacity { limit: usize },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::VertexOutOfRange { .. }
            | Error::SelfLoop(_)
            | Error::DuplicateEdge(..)
            | Error::Cycle { .. }
            | Error::NotBowFree { .. }
            | Error::Pattern(_)
            | Error::Ordering { .. }
            | Error::Premise(_)
            | Error::SampleSize(_)
            | Error::Shape(_)
            | Error::Config(_)
            | Error::Capacity { .. }
            | Error::Parse(_) => ErrorClass::Validation,
            Error::Definiteness { .. }
            | Error::NearSingular { .. }
            | Error::ProjectionConvergence { .. }
            | Error::EtaConvergence { .. }
            | Error::UndefinedDistance => ErrorClass::Numerical,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => ErrorClass::Io,
        }
    }
}

fn fmt_cycle(cycle: &[VertexId]) -> String {
    let mut parts: Vec<String> = cycle.iter().map(|v| v.to_string()).collect();
    if let Some(first) = cycle.first() {
        parts.push(first.to_string());
    }
    parts.join(" -> ")
}

fn fmt_vertex(vertex: &Option<VertexId>) -> String {
    match vertex {
        Some(v) => format!(" at vertex {v}"),
        None => String::new(),
    }
}
