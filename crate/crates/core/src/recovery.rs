//! Layer-by-layer recovery of the edge weights `Λ` from `Σ`.
//!
//! For a vertex `v` the weights into it solve `A·x = b`, one equation per
//! row vertex `y ∈ Y_v`. By default `Y_v = pa(v)` and every row uses the
//! transformed covariance `[(I−Λ)ᵀΣ]_{y,·} = Σ_{y,·} − Σ_{u∈pa(y)} Λ_{u,y} Σ_{u,·}`,
//! which is `Cov(η_y, X)`. Because the graph is bow-free, `η_y` is
//! uncorrelated with `η_v` for every parent `y`, so each row is an exact
//! identity. In matrix form this is `A = Σ_{pa,pa} − Λᵀ_{spa,pa} Σ_{spa,pa}`
//! and `b = Σ_{pa,v} − Λᵀ_{spa,pa} Σ_{spa,v}`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{MixedGraph, VertexId};
use crate::linalg::{condition_number, min_singular_value, norm2, submatrix};
use crate::lsem::{
    check_square, project_omega_pattern, recover_omega, Covariance, ParamSet, ProjectionConfig,
};

/// Which rows of a system are transformed by `(I−Λ)ᵀ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowForm {
    /// Every row is transformed.
    #[default]
    Transformed,
    /// A row `y` is transformed only when `y` is half-trek reachable from
    /// `v`; other rows use the raw covariance.
    HalfTrek,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryConfig {
    /// Relative floor on the smallest singular value of `A`.
    pub sing_tol: f64,
    pub row_form: RowForm,
    /// Explicit row sets `Y_v`, replacing `pa(v)` for the listed vertices.
    pub row_sets: BTreeMap<VertexId, Vec<VertexId>>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            sing_tol: 1e-10,
            row_form: RowForm::Transformed,
            row_sets: BTreeMap::new(),
        }
    }
}

/// `Λ` with a record of which vertices have all incoming weights known.
#[derive(Clone, Debug)]
pub struct PartialLambda {
    pub lambda: DMatrix<f64>,
    pub known: Vec<bool>,
}

impl PartialLambda {
    /// Fresh state for `g`: forced weights filled in, and vertices whose
    /// incoming edges are all forced (or absent) marked known.
    pub fn for_graph(g: &MixedGraph) -> Self {
        let n = g.n();
        let mut lambda = DMatrix::zeros(n, n);
        for e in g.directed_edges() {
            if let Some(w) = e.forced_weight {
                lambda[(e.source.index(), e.target.index())] = w;
            }
        }
        let known = g
            .vertices()
            .map(|v| {
                g.parents_of(v)
                    .iter()
                    .all(|&p| g.forced_weight(p, v).is_some())
            })
            .collect();
        PartialLambda { lambda, known }
    }

    /// Treats every entry of `lambda` as known.
    pub fn complete(lambda: DMatrix<f64>) -> Self {
        let n = lambda.nrows();
        PartialLambda {
            lambda,
            known: vec![true; n],
        }
    }
}

/// The square linear system for the weights into one vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoverySystem {
    pub vertex: VertexId,
    pub y_set: Vec<VertexId>,
    /// Parents whose weights are unknown, in column order.
    pub unknowns: Vec<VertexId>,
    /// Per row: whether the transformed covariance was used.
    pub transformed: Vec<bool>,
    pub a_matrix: DMatrix<f64>,
    pub b_vector: DVector<f64>,
    /// Rows on which the two row conventions would differ, i.e. rows not
    /// half-trek reachable from the vertex.
    pub convention_disagreements: Vec<VertexId>,
}

impl RecoverySystem {
    pub fn is_empty(&self) -> bool {
        self.unknowns.is_empty()
    }
}

fn transformed_entry(
    g: &MixedGraph,
    sigma: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    y: VertexId,
    c: VertexId,
) -> f64 {
    g.parents_of(y)
        .iter()
        .fold(sigma[(y.index(), c.index())], |acc, &u| {
            acc - lambda[(u.index(), y.index())] * sigma[(u.index(), c.index())]
        })
}

/// Assembles `A` and `b` for vertex `v`. Forced incoming edges are moved
/// to the right-hand side.
pub fn build_system(
    g: &MixedGraph,
    sigma: &Covariance,
    partial: &PartialLambda,
    v: VertexId,
    cfg: &RecoveryConfig,
) -> Result<RecoverySystem> {
    check_square(&sigma.sigma, g.n(), "sigma")?;
    let parents = g.parents(v)?;
    let (forced, unknowns): (Vec<VertexId>, Vec<VertexId>) = parents
        .iter()
        .partition(|&&p| g.forced_weight(p, v).is_some());
    let y_set = match cfg.row_sets.get(&v) {
        Some(rows) => rows.clone(),
        None => unknowns.clone(),
    };
    if y_set.len() != unknowns.len() {
        return Err(Error::Shape(format!(
            "vertex {v} has {} unknown weights but {} rows",
            unknowns.len(),
            y_set.len()
        )));
    }
    let htr: BTreeSet<VertexId> = g.half_trek_reachable(v)?;
    for &y in &y_set {
        if y.index() >= g.n() {
            return Err(Error::VertexOutOfRange {
                vertex: y.index(),
                n: g.n(),
            });
        }
    }
    let transformed: Vec<bool> = y_set
        .iter()
        .map(|y| match cfg.row_form {
            RowForm::Transformed => true,
            RowForm::HalfTrek => htr.contains(y),
        })
        .collect();
    let convention_disagreements = y_set.iter().filter(|y| !htr.contains(y)).copied().collect();

    for (&y, &t) in y_set.iter().zip(&transformed) {
        if t && !partial.known[y.index()] {
            return Err(Error::Ordering {
                vertex: v,
                parent: y,
            });
        }
    }

    let s = &sigma.sigma;
    let lam = &partial.lambda;
    let entry = |y: VertexId, t: bool, c: VertexId| {
        if t {
            transformed_entry(g, s, lam, y, c)
        } else {
            s[(y.index(), c.index())]
        }
    };
    let m = y_set.len();
    let a_matrix = DMatrix::from_fn(m, m, |i, j| entry(y_set[i], transformed[i], unknowns[j]));
    let b_vector = DVector::from_fn(m, |i, _| {
        let (y, t) = (y_set[i], transformed[i]);
        forced.iter().fold(entry(y, t, v), |acc, &f| {
            acc - g.forced_weight(f, v).unwrap_or(0.0) * entry(y, t, f)
        })
    });

    Ok(RecoverySystem {
        vertex: v,
        y_set,
        unknowns,
        transformed,
        a_matrix,
        b_vector,
        convention_disagreements,
    })
}

fn solve_checked(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    vertex: Option<VertexId>,
    sing_tol: f64,
) -> Result<DVector<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::Shape(format!(
            "system is {}x{} with a right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let norm = norm2(a);
    let sigma_min = min_singular_value(a);
    if sigma_min <= sing_tol * norm {
        return Err(Error::NearSingular {
            vertex,
            sigma_min,
            norm,
        });
    }
    a.clone().lu().solve(b).ok_or(Error::NearSingular {
        vertex,
        sigma_min,
        norm,
    })
}

/// Solves the system by pivoted LU after a near-singularity check.
pub fn recover_vertex(system: &RecoverySystem, sing_tol: f64) -> Result<DVector<f64>> {
    solve_checked(
        &system.a_matrix,
        &system.b_vector,
        Some(system.vertex),
        sing_tol,
    )
}

/// `Λ_{pa(v),v} = Σ_{pa,pa}⁻¹ Σ_{pa,v}`, the form used when `v` has no
/// grandparents.
pub fn recover_first_layers(
    g: &MixedGraph,
    sigma: &Covariance,
    v: VertexId,
    sing_tol: f64,
) -> Result<DVector<f64>> {
    check_square(&sigma.sigma, g.n(), "sigma")?;
    let pa = g.parents(v)?;
    let a = submatrix(&sigma.sigma, pa, pa);
    let b = submatrix(&sigma.sigma, pa, &[v]).column(0).into_owned();
    solve_checked(&a, &b, Some(v), sing_tol)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VertexDiagnostics {
    /// `‖A·x − b‖₂`.
    pub residual: f64,
    /// Spectral condition number of `A`.
    pub condition: f64,
    /// True when the vertex has no grandparents.
    pub partial_form: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub convention_disagreements: Vec<VertexId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoveryResult {
    pub lambda_hat: DMatrix<f64>,
    pub per_vertex: BTreeMap<VertexId, VertexDiagnostics>,
    pub forced_edges_respected: bool,
}

/// Recovers all edge weights, visiting vertices in increasing layer order.
pub fn recover_all(
    g: &MixedGraph,
    sigma: &Covariance,
    cfg: &RecoveryConfig,
) -> Result<RecoveryResult> {
    g.validate_bow_free().into_result()?;
    check_square(&sigma.sigma, g.n(), "sigma")?;
    let layers = g.layer_decomposition()?;
    let mut partial = PartialLambda::for_graph(g);
    let mut per_vertex = BTreeMap::new();

    for v in layers.ordered_vertices() {
        if partial.known[v.index()] {
            continue;
        }
        let system = build_system(g, sigma, &partial, v, cfg)?;
        let x = recover_vertex(&system, cfg.sing_tol)?;
        let residual = (&system.a_matrix * &x - &system.b_vector).norm();
        for (&p, &w) in system.unknowns.iter().zip(x.iter()) {
            partial.lambda[(p.index(), v.index())] = w;
        }
        partial.known[v.index()] = true;
        per_vertex.insert(
            v,
            VertexDiagnostics {
                residual,
                condition: condition_number(&system.a_matrix),
                partial_form: g.spa(v)?.is_empty(),
                convention_disagreements: system.convention_disagreements,
            },
        );
    }

    let forced_edges_respected = g
        .directed_edges()
        .iter()
        .filter_map(|e| e.forced_weight.map(|w| (e, w)))
        .all(|(e, w)| partial.lambda[(e.source.index(), e.target.index())] == w);

    Ok(RecoveryResult {
        lambda_hat: partial.lambda,
        per_vertex,
        forced_edges_respected,
    })
}

/// `Λ̂` from [`recover_all`], then `Ω̂ = (I−Λ̂)ᵀ Σ (I−Λ̂)` projected onto
/// PSD matrices with the bidirected zero pattern.
pub fn recover_full_params(
    g: &MixedGraph,
    sigma: &Covariance,
    cfg: &RecoveryConfig,
    projection: ProjectionConfig,
) -> Result<ParamSet> {
    let lambda = recover_all(g, sigma, cfg)?.lambda_hat;
    let omega_hat = recover_omega(g, &lambda, sigma)?;
    let omega = project_omega_pattern(g, &omega_hat, projection)?;
    Ok(ParamSet::new(lambda, omega))
}
