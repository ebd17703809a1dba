//! LSEM algebra: parameter sets, the forward map, noise recovery, pattern
//! projection and sample covariances.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{MixedGraph, VertexId};
use crate::linalg::{max_abs, min_eigenvalue, neumann_inverse, norm2, symmetrize};

/// Relative eigenvalue floor for positive definiteness checks.
pub const PD_REL_TOL: f64 = 1e-12;

/// Edge weights `Λ` and noise covariance `Ω`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    #[serde(with = "crate::io::nested")]
    pub lambda: DMatrix<f64>,
    #[serde(with = "crate::io::nested")]
    pub omega: DMatrix<f64>,
}

impl ParamSet {
    pub fn new(lambda: DMatrix<f64>, omega: DMatrix<f64>) -> Self {
        ParamSet { lambda, omega }
    }

    /// Checks shapes, the `W(E)` and `PD(F)` zero patterns, symmetry of `Ω`
    /// and that `Ω` is positive semidefinite up to a relative floor.
    pub fn check(&self, g: &MixedGraph) -> Result<()> {
        let n = g.n();
        check_square(&self.lambda, n, "lambda")?;
        check_square(&self.omega, n, "omega")?;
        check_lambda_pattern(g, &self.lambda)?;
        let scale = max_abs(&self.omega).max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (self.omega[(i, j)], self.omega[(j, i)]);
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::Pattern(format!(
                        "omega is not symmetric at ({}, {})",
                        VertexId(i),
                        VertexId(j)
                    )));
                }
                if a != 0.0 && !g.has_bidirected(VertexId(i), VertexId(j)) {
                    return Err(Error::Pattern(format!(
                        "omega has a nonzero entry at ({}, {}) without a bidirected edge",
                        VertexId(i),
                        VertexId(j)
                    )));
                }
            }
        }
        let min_eig = min_eigenvalue(&self.omega);
        if n > 0 && min_eig < -PD_REL_TOL * norm2(&self.omega) {
            return Err(Error::Definiteness {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

pub(crate) fn check_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Nonzero `Λ` entries are allowed only on directed edges.
pub fn check_lambda_pattern(g: &MixedGraph, lambda: &DMatrix<f64>) -> Result<()> {
    for i in 0..g.n() {
        for j in 0..g.n() {
            if lambda[(i, j)] != 0.0 && !g.has_directed(VertexId(i), VertexId(j)) {
                return Err(Error::Pattern(format!(
                    "lambda has a nonzero entry at ({}, {}) without a directed edge",
                    VertexId(i),
                    VertexId(j)
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Exact,
    Sample { m: usize },
    Perturbed { gamma: f64 },
}

/// Observational covariance `Σ` together with where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    #[serde(with = "crate::io::nested")]
    pub sigma: DMatrix<f64>,
    pub provenance: Provenance,
}

impl Covariance {
    pub fn new(sigma: DMatrix<f64>, provenance: Provenance) -> Self {
        Covariance { sigma, provenance }
    }

    pub fn exact(sigma: DMatrix<f64>) -> Self {
        Covariance::new(sigma, Provenance::Exact)
    }

    pub fn n(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn get(&self, i: VertexId, j: VertexId) -> f64 {
        self.sigma[(i.index(), j.index())]
    }

    /// Positive definiteness with floor `1e−12·‖Σ‖`.
    pub fn check_pd(&self) -> Result<()> {
        let min_eig = min_eigenvalue(&self.sigma);
        if self.n() > 0 && min_eig <= PD_REL_TOL * norm2(&self.sigma) {
            return Err(Error::Definiteness {
                min_eigenvalue: min_eig,
            });
        }
        Ok(())
    }
}

/// `Σ = (I−Λ)⁻ᵀ Ω (I−Λ)⁻¹`, with the inverse taken as a finite Neumann sum.
pub fn forward_map(g: &MixedGraph, p: &ParamSet) -> Result<Covariance> {
    g.topological_order()?;
    p.check(g)?;
    let inv = neumann_inverse(&p.lambda);
    let sigma = inv.transpose() * &p.omega * &inv;
    Ok(Covariance::exact(symmetrize(&sigma)))
}

/// `Ω̂ = (I−Λ)ᵀ Σ (I−Λ)`, without pattern enforcement.
pub fn recover_omega(
    g: &MixedGraph,
    lambda: &DMatrix<f64>,
    sigma: &Covariance,
) -> Result<DMatrix<f64>> {
    check_square(lambda, g.n(), "lambda")?;
    check_square(&sigma.sigma, g.n(), "sigma")?;
    let m = DMatrix::identity(g.n(), g.n()) - lambda;
    Ok(m.transpose() * &sigma.sigma * m)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            tol: 1e-10,
            max_iters: 10_000,
        }
    }
}

fn mask_pattern(g: &MixedGraph, m: &mut DMatrix<f64>) {
    let n = g.n();
    for i in 0..n {
        for j in 0..n {
            if i != j && !g.has_bidirected(VertexId(i), VertexId(j)) {
                m[(i, j)] = 0.0;
            }
        }
    }
}

fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|x| x.max(0.0));
    let q = &eig.eigenvectors;
    symmetrize(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()))
}

fn feasible(g: &MixedGraph, m: &DMatrix<f64>, tol: f64) -> bool {
    let mut masked = m.clone();
    mask_pattern(g, &mut masked);
    max_abs(&(m - masked)) <= tol && min_eigenvalue(m) >= -tol
}

/// Frobenius-nearest PSD matrix carrying the zero pattern of the graph's
/// bidirected edges.
///
/// Uses Dykstra's alternating projections between the pattern subspace and
/// the PSD cone; plain alternation would only find *a* feasible point. The
/// returned matrix has the pattern exactly and eigenvalues `≥ −tol`.
pub fn project_omega_pattern(
    g: &MixedGraph,
    omega_hat: &DMatrix<f64>,
    cfg: ProjectionConfig,
) -> Result<DMatrix<f64>> {
    check_square(omega_hat, g.n(), "omega")?;
    let start = symmetrize(omega_hat);
    if feasible(g, &start, cfg.tol) {
        let mut out = start;
        mask_pattern(g, &mut out);
        return Ok(out);
    }
    let n = g.n();
    let mut x = start;
    let mut p = DMatrix::zeros(n, n);
    let mut q = DMatrix::zeros(n, n);
    let mut last_step = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let prev = x.clone();
        let y = clip_psd(&(&x + &p));
        p = &x + &p - &y;
        let mut next = &y + &q;
        mask_pattern(g, &mut next);
        q = &y + &q - &next;
        x = next;
        last_step = (&x - &prev).norm();
        if last_step < cfg.tol && min_eigenvalue(&x) >= -cfg.tol {
            return Ok(x);
        }
    }
    Err(Error::ProjectionConvergence {
        iterations: cfg.max_iters,
        last_step,
        last: Box::new(x),
    })
}

/// Empirical covariance of the rows of `x` (mean-centred, divisor `m−1`).
/// With `normalize_rows`, each observation is first scaled to unit norm.
pub fn sample_covariance(x: &DMatrix<f64>, normalize_rows: bool) -> Result<Covariance> {
    let m = x.nrows();
    if m < 2 {
        return Err(Error::SampleSize(m));
    }
    let mut data = x.clone();
    if normalize_rows {
        normalize_rows_in_place(&mut data);
    }
    let mean = data.row_mean();
    for mut row in data.row_iter_mut() {
        row -= &mean;
    }
    let cov = data.transpose() * &data / (m as f64 - 1.0);
    Ok(Covariance::new(symmetrize(&cov), Provenance::Sample { m }))
}

/// Scales each nonzero row to unit 2-norm.
pub fn normalize_rows_in_place(x: &mut DMatrix<f64>) {
    for mut row in x.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}
