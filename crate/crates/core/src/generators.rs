//! Random instances: bow-free graphs from a random permutation, the
//! small-weight generative model (truncated uniform `Λ`, spherical `Ω`),
//! diagonally dominant noise for simulations, and Gaussian observations.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DirectedEdge, MixedGraph, VertexId};
use crate::lsem::{check_square, forward_map, Covariance, ParamSet};
use crate::rng::{derive_seed, rng_from_seed, Rng};

const REJECTION_CAP: usize = 1_000_000;
const DEGENERATE_NORM: f64 = 1e-12;

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomGraphConfig {
    pub n: usize,
    /// Probability of each forward directed edge.
    pub p: f64,
    /// Probability of a bidirected edge on each remaining non-adjacent pair.
    pub extra_bidirected_p: f64,
    /// Optional cap on in- and out-degree; edges that would exceed it are
    /// skipped.
    pub max_degree: Option<usize>,
    pub seed: u64,
}

impl RandomGraphConfig {
    pub fn new(n: usize, p: f64, seed: u64) -> Self {
        RandomGraphConfig {
            n,
            p,
            extra_bidirected_p: 0.1,
            max_degree: None,
            seed,
        }
    }
}

/// Random bow-free graph: a random order `π`, forward edges with
/// probability `p`, one bidirected edge per vertex to a vertex it shares no
/// directed edge with, and further bidirected edges on the remaining free
/// pairs with probability `extra_bidirected_p`.
pub fn gen_random_bowfree_graph(cfg: &RandomGraphConfig) -> Result<MixedGraph> {
    check_probability("p", cfg.p)?;
    check_probability("extra_bidirected_p", cfg.extra_bidirected_p)?;
    let n = cfg.n;
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let cap = cfg.max_degree.unwrap_or(usize::MAX);
    let mut indeg = vec![0usize; n];
    let mut outdeg = vec![0usize; n];
    let mut adjacent = vec![vec![false; n]; n];
    let mut directed = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            let (i, j) = (order[a], order[b]);
            let coin = rng.random_bool(cfg.p);
            if coin && outdeg[i] < cap && indeg[j] < cap {
                outdeg[i] += 1;
                indeg[j] += 1;
                adjacent[i][j] = true;
                adjacent[j][i] = true;
                directed.push(DirectedEdge::new(i, j));
            }
        }
    }

    let mut bidirected: BTreeSet<(VertexId, VertexId)> = BTreeSet::new();
    for j in 0..n {
        let candidates: Vec<usize> = (0..n).filter(|&i| i != j && !adjacent[i][j]).collect();
        if candidates.is_empty() {
            continue;
        }
        let i = candidates[rng.random_range(0..candidates.len())];
        bidirected.insert((VertexId(i.min(j)), VertexId(i.max(j))));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if adjacent[i][j] || bidirected.contains(&(VertexId(i), VertexId(j))) {
                continue;
            }
            if rng.random_bool(cfg.extra_bidirected_p) {
                bidirected.insert((VertexId(i), VertexId(j)));
            }
        }
    }
    MixedGraph::new(n, directed, bidirected)
}

/// Layered DAG with in- and out-degree at most `k`: vertices (in random
/// order) fill layers of `width`, every vertex after the first layer gets
/// one parent in the layer above, and further edges from that layer are
/// added with probability `p` while the degree caps allow. No bidirected
/// edges.
pub fn gen_layered_graph(
    n: usize,
    width: usize,
    k: usize,
    p: f64,
    seed: u64,
) -> Result<MixedGraph> {
    check_probability("p", p)?;
    if width == 0 || k == 0 {
        return Err(Error::Config(format!(
            "layer width and k must be positive, got {width} and {k}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let layers: Vec<&[usize]> = order.chunks(width).collect();
    let mut indeg = vec![0usize; n];
    let mut outdeg = vec![0usize; n];
    let mut directed = Vec::new();
    for pair in layers.windows(2) {
        let (prev, cur) = (pair[0], pair[1]);
        for &v in cur {
            let open: Vec<usize> = prev.iter().copied().filter(|&u| outdeg[u] < k).collect();
            // a full layer of width w offers k*w >= w slots, so this is never empty
            let first = open[rng.random_range(0..open.len())];
            let mut parents = vec![first];
            outdeg[first] += 1;
            indeg[v] += 1;
            for &u in prev {
                let coin = rng.random_bool(p);
                if coin && u != first && indeg[v] < k && outdeg[u] < k {
                    parents.push(u);
                    outdeg[u] += 1;
                    indeg[v] += 1;
                }
            }
            directed.extend(parents.into_iter().map(|u| DirectedEdge::new(u, v)));
        }
    }
    MixedGraph::new(n, directed, [])
}

/// Copy of `g` whose bidirected edges are exactly the pairs not joined by a
/// directed edge. This is the graph a dense `Ω` lives on.
pub fn complete_bidirected(g: &MixedGraph) -> Result<MixedGraph> {
    let mut bi = Vec::new();
    for i in 0..g.n() {
        for j in (i + 1)..g.n() {
            if !g.adjacent_directed(VertexId(i), VertexId(j)) {
                bi.push((VertexId(i), VertexId(j)));
            }
        }
    }
    MixedGraph::new(g.n(), g.directed_edges().to_vec(), bi)
}

/// Parameters of the small-weight generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeConfig {
    pub n: usize,
    pub k: usize,
    pub mu: f64,
    /// Dimension of the sphere the noise vectors are drawn from.
    pub d: usize,
    pub c_conc: f64,
    pub seed: u64,
}

impl GenerativeConfig {
    /// `μ = 10(k+1)` and `d = d_min(k, n, 1)`.
    pub fn standard(n: usize, k: usize, seed: u64) -> Self {
        GenerativeConfig {
            n,
            k,
            mu: standard_mu(k),
            d: d_min(k, n as f64, 1.0),
            c_conc: 3.0,
            seed,
        }
    }

    /// The support `(lo, hi]` of `|Λ_{u,v}|`.
    pub fn weight_interval(&self) -> Result<(f64, f64)> {
        let lo = 1.0 / (self.n as f64).powi(2);
        let hi = 1.0 / (2.0 * self.k as f64 * self.mu);
        if self.k == 0 || lo >= hi {
            return Err(Error::Config(format!(
                "need 1/n^2 < 1/(2k*mu), got 1/n^2 = {lo:e} and 1/(2k*mu) = {hi:e} (n = {}, k = {}, mu = {})",
                self.n, self.k, self.mu
            )));
        }
        Ok((lo, hi))
    }
}

pub fn standard_mu(k: usize) -> f64 {
    10.0 * (k as f64 + 1.0)
}

/// Edge weights drawn i.i.d. from `U[−hi, hi] ∖ [−lo, lo]` by rejection,
/// with `lo = 1/n²` and `hi = 1/(2kμ)`.
pub fn gen_lambda_uniform(g: &MixedGraph, cfg: &GenerativeConfig) -> Result<DMatrix<f64>> {
    let (lo, hi) = cfg.weight_interval()?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[1]));
    let mut lambda = DMatrix::zeros(g.n(), g.n());
    for e in g.directed_edges() {
        let w = match e.forced_weight {
            Some(w) => w,
            None => truncated_uniform(&mut rng, lo, hi)?,
        };
        lambda[(e.source.index(), e.target.index())] = w;
    }
    Ok(lambda)
}

fn truncated_uniform(rng: &mut Rng, lo: f64, hi: f64) -> Result<f64> {
    for _ in 0..REJECTION_CAP {
        let x = rng.random_range(-hi..=hi);
        if x.abs() > lo {
            return Ok(x);
        }
    }
    Err(Error::Config(format!(
        "rejection sampling from [-{hi:e}, {hi:e}] minus [-{lo:e}, {lo:e}] gave up after {REJECTION_CAP} draws"
    )))
}

/// `Ω` as a Gram matrix of unit vectors, with the generating vectors.
#[derive(Clone, Debug)]
pub struct SphericalOmega {
    pub omega: DMatrix<f64>,
    /// `d × n`, column `u` is the vector of vertex `u`.
    pub vectors: DMatrix<f64>,
    /// Draws discarded because the orthogonalized residual vanished.
    pub retries: usize,
}

/// Uniform unit vectors in `ℝ^d`, visited in topological order; each has
/// the span of its parents' final vectors removed before normalization, so
/// `Ω_{u,v} = ⟨v_u, v_v⟩` vanishes on every directed edge.
pub fn gen_omega_spherical(g: &MixedGraph, cfg: &GenerativeConfig) -> Result<SphericalOmega> {
    if cfg.d == 0 {
        return Err(Error::Config(
            "sphere dimension d must be at least 1".into(),
        ));
    }
    let order = g.topological_order()?;
    let max_pa = g
        .vertices()
        .map(|v| g.parents_of(v).len())
        .max()
        .unwrap_or(0);
    if max_pa >= cfg.d {
        return Err(Error::Config(format!(
            "sphere dimension {} is too small for a vertex with {max_pa} parents",
            cfg.d
        )));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[2]));
    let (n, d) = (g.n(), cfg.d);
    let mut vectors = DMatrix::zeros(d, n);
    let mut retries = 0;
    for v in order {
        let basis = orthonormal_basis(
            g.parents_of(v)
                .iter()
                .map(|p| vectors.column(p.index()).into_owned()),
        );
        let unit = loop {
            let mut x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            x /= x.norm();
            for q in &basis {
                let c = q.dot(&x);
                x.axpy(-c, q, 1.0);
            }
            let norm = x.norm();
            if norm >= DEGENERATE_NORM {
                break x / norm;
            }
            retries += 1;
        };
        vectors.set_column(v.index(), &unit);
    }
    let mut omega = vectors.transpose() * &vectors;
    for i in 0..n {
        omega[(i, i)] = 1.0;
        for j in 0..i {
            let x = if g.adjacent_directed(VertexId(i), VertexId(j)) {
                0.0
            } else {
                omega[(i, j)]
            };
            omega[(i, j)] = x;
            omega[(j, i)] = x;
        }
    }
    Ok(SphericalOmega {
        omega,
        vectors,
        retries,
    })
}

/// Modified Gram–Schmidt; dependent vectors are dropped.
fn orthonormal_basis(vs: impl Iterator<Item = DVector<f64>>) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for mut x in vs {
        for q in &basis {
            let c = q.dot(&x);
            x.axpy(-c, q, 1.0);
        }
        let norm = x.norm();
        if norm > DEGENERATE_NORM {
            basis.push(x / norm);
        }
    }
    basis
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SddNoiseConfig {
    /// Half-width of the weight interval.
    pub range: f64,
    pub seed: u64,
}

/// Standard normal entries on bidirected edges; each diagonal entry is the
/// absolute off-diagonal row sum plus an independent `χ²₁` draw.
pub fn gen_omega_sdd(g: &MixedGraph, cfg: &SddNoiseConfig) -> Result<DMatrix<f64>> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[3]));
    let n = g.n();
    let mut omega = DMatrix::zeros(n, n);
    for &(a, b) in g.bidirected_edges() {
        let x: f64 = rng.sample(StandardNormal);
        omega[(a.index(), b.index())] = x;
        omega[(b.index(), a.index())] = x;
    }
    let chi = ChiSquared::new(1.0).map_err(|e| Error::Config(e.to_string()))?;
    for i in 0..n {
        let off: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| omega[(i, j)].abs())
            .sum();
        omega[(i, i)] = off + chi.sample(&mut rng);
    }
    Ok(omega)
}

/// Edge weights uniform on `[−range, range]`.
pub fn gen_lambda_range(g: &MixedGraph, cfg: &SddNoiseConfig) -> Result<DMatrix<f64>> {
    if !(cfg.range > 0.0) {
        return Err(Error::Config(format!(
            "range must be positive, got {}",
            cfg.range
        )));
    }
    let mut rng = rng_from_seed(derive_seed(cfg.seed, &[4]));
    let mut lambda = DMatrix::zeros(g.n(), g.n());
    for e in g.directed_edges() {
        lambda[(e.source.index(), e.target.index())] = match e.forced_weight {
            Some(w) => w,
            None => rng.random_range(-cfg.range..=cfg.range),
        };
    }
    Ok(lambda)
}

/// `⌈c·k⁸·(ln n)⁴⌉`, at least 1.
pub fn d_min(k: usize, n: f64, c: f64) -> usize {
    let x = c * (k as f64).powi(8) * n.ln().powi(4);
    // guard against 1.0000000000000002 rounding up to 2
    let rounded = x.round();
    let d = if (x - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded
    } else {
        x.ceil()
    };
    (d as usize).max(1)
}

/// `J(k, d) = k²·C_conc/d^{1/4}`.
pub fn j_value(k: usize, d: usize, c_conc: f64) -> f64 {
    (k * k) as f64 * c_conc / (d as f64).powf(0.25)
}

/// `m` rows drawn from `N(0, Σ)` via the Cholesky factor.
pub fn sample_observations(sigma: &Covariance, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = sigma.n();
    check_square(&sigma.sigma, n, "sigma")?;
    let chol = sigma
        .sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Definiteness {
            min_eigenvalue: crate::linalg::min_eigenvalue(&sigma.sigma),
        })?;
    let l = chol.l();
    let mut rng = rng_from_seed(seed);
    let z = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok((l * z).transpose())
}

/// Layered degree-bounded graph with dense `Ω` from the generative model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model2Config {
    pub generative: GenerativeConfig,
    /// Probability of each optional edge between consecutive layers.
    pub edge_p: f64,
    pub layer_width: usize,
}

impl Model2Config {
    /// Layers of width `k + 1`.
    pub fn new(generative: GenerativeConfig, edge_p: f64) -> Self {
        let layer_width = generative.k + 1;
        Model2Config {
            generative,
            edge_p,
            layer_width,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model2Instance {
    pub graph: MixedGraph,
    pub params: ParamSet,
    pub sigma: Covariance,
    pub omega_retries: usize,
}

pub fn gen_model2_instance(cfg: &Model2Config) -> Result<Model2Instance> {
    let gen = &cfg.generative;
    gen.weight_interval()?;
    let skeleton = gen_layered_graph(
        gen.n,
        cfg.layer_width,
        gen.k,
        cfg.edge_p,
        derive_seed(gen.seed, &[0]),
    )?;
    let graph = complete_bidirected(&skeleton)?;
    let lambda = gen_lambda_uniform(&graph, gen)?;
    let sph = gen_omega_spherical(&graph, gen)?;
    let params = ParamSet::new(lambda, sph.omega);
    let sigma = forward_map(&graph, &params)?;
    Ok(Model2Instance {
        graph,
        params,
        sigma,
        omega_retries: sph.retries,
    })
}
