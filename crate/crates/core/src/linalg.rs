//! Dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::graph::VertexId;

/// Matrices up to this dimension use a full SVD for the spectral norm.
pub const SVD_DIM_LIMIT: usize = 64;

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITERS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NormMethod {
    ExactSvd,
    PowerIteration { iters: usize, tol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormReport {
    pub spectral_norm: f64,
    pub method: NormMethod,
}

/// Largest singular value of `a`, with the method used.
pub fn spectral_norm(a: &DMatrix<f64>) -> NormReport {
    if a.is_empty() {
        return NormReport {
            spectral_norm: 0.0,
            method: NormMethod::ExactSvd,
        };
    }
    if a.nrows().max(a.ncols()) <= SVD_DIM_LIMIT {
        return NormReport {
            spectral_norm: svd_max(a),
            method: NormMethod::ExactSvd,
        };
    }
    match power_iteration(a) {
        Some((value, iters)) => NormReport {
            spectral_norm: value,
            method: NormMethod::PowerIteration {
                iters,
                tol: POWER_TOL,
            },
        },
        None => NormReport {
            spectral_norm: svd_max(a),
            method: NormMethod::ExactSvd,
        },
    }
}

/// Shorthand for `spectral_norm(a).spectral_norm`.
pub fn norm2(a: &DMatrix<f64>) -> f64 {
    spectral_norm(a).spectral_norm
}

fn svd_max(a: &DMatrix<f64>) -> f64 {
    a.singular_values().max()
}

/// Power iteration on `AᵀA`; returns `None` if the Rayleigh quotient has
/// not settled within the iteration budget.
fn power_iteration(a: &DMatrix<f64>) -> Option<(f64, usize)> {
    let ata = a.transpose() * a;
    let n = ata.ncols();
    // deterministic start with no exact symmetry with the standard basis
    let mut x = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_75).fract());
    x.normalize_mut();
    let mut prev = 0.0;
    for it in 1..=POWER_MAX_ITERS {
        let y = &ata * &x;
        let lambda = x.dot(&y);
        let ny = y.norm();
        if ny == 0.0 {
            return Some((0.0, it));
        }
        x = y / ny;
        if (lambda - prev).abs() <= POWER_TOL * lambda.abs() {
            return Some((lambda.max(0.0).sqrt(), it));
        }
        prev = lambda;
    }
    None
}

/// Smallest singular value (0 for an empty matrix).
pub fn min_singular_value(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.singular_values().min()
}

/// Spectral condition number `σ₁/σₙ` of a square matrix; infinite when
/// singular and 1 for the empty matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.singular_values();
    let (max, min) = (sv.max(), sv.min());
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix (`+∞` for an empty one).
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn submatrix(a: &DMatrix<f64>, rows: &[VertexId], cols: &[VertexId]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        a[(rows[i].index(), cols[j].index())]
    })
}

/// `(I − Λ)⁻¹` as the finite sum `I + Λ + Λ² + …` for nilpotent `Λ`.
///
/// Stops as soon as a power is exactly zero; after `n` terms the sum is
/// returned regardless, which is exact whenever `Λ` is a DAG pattern.
pub fn neumann_inverse(lambda: &DMatrix<f64>) -> DMatrix<f64> {
    let n = lambda.nrows();
    let mut sum = DMatrix::identity(n, n);
    let mut power = DMatrix::identity(n, n);
    for _ in 1..n {
        power = &power * lambda;
        if power.iter().all(|&x| x == 0.0) {
            break;
        }
        sum += &power;
    }
    sum
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
