//! Reduction of a bow-free DAG to a layered bow-free DAG.
//!
//! Every directed edge `u → v` that skips layers is replaced by a chain of
//! forced-weight stages ending in a collector `w₀` with `X_{w₀} = X_u`, and
//! the unconstrained edge `w₀ → v` then carries the original weight. Inner
//! stage vertices have width `r` (the last one `r²`) and all their edges
//! weigh `1/r`, so each inner variable is `X_u / r`.
//!
//! An edge spanning `s ≥ 3` layers uses `q = s − 2` inner stages, which puts
//! the collector one layer above `v` and keeps every original vertex on its
//! original layer. An edge spanning exactly two layers has room for the
//! collector only; it is joined to the head by a single edge of forced
//! weight 1.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{DirectedEdge, MixedGraph, VertexId};
use crate::lsem::{check_square, Covariance};
use crate::recovery::{build_system, recover_all, PartialLambda, RecoveryConfig};

/// Hands out fresh vertex ids in increasing order.
#[derive(Clone, Debug)]
pub struct IdAllocator {
    next: usize,
    limit: usize,
}

impl IdAllocator {
    /// Ids start at `first`; at most `limit` ids (in total, counting from 0)
    /// may exist.
    pub fn new(first: usize, limit: usize) -> Self {
        IdAllocator { next: first, limit }
    }

    pub fn alloc(&mut self) -> Result<VertexId> {
        if self.next >= self.limit {
            return Err(Error::Capacity { limit: self.limit });
        }
        let id = VertexId(self.next);
        self.next += 1;
        Ok(id)
    }

    /// Number of ids handed out so far, including the reserved prefix.
    pub fn len(&self) -> usize {
        self.next
    }

    pub fn is_empty(&self) -> bool {
        self.next == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GadgetSpec {
    pub head: VertexId,
    pub tail: VertexId,
    pub collector: VertexId,
    /// Number of inner stages; 0 for the two-layer variant.
    pub q: usize,
    pub r: usize,
    pub inner_layers: Vec<Vec<VertexId>>,
}

impl GadgetSpec {
    /// Weight of every forced edge in the gadget.
    pub fn forced_weight(&self) -> f64 {
        if self.q == 0 {
            1.0
        } else {
            1.0 / self.r as f64
        }
    }

    pub fn new_vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.inner_layers
            .iter()
            .flatten()
            .copied()
            .chain(std::iter::once(self.collector))
    }

    /// Forced edges from the head through the stages into the collector.
    pub fn forced_edges(&self) -> Vec<DirectedEdge> {
        let w = self.forced_weight();
        let mut stages: Vec<Vec<VertexId>> = vec![vec![self.head]];
        stages.extend(self.inner_layers.iter().cloned());
        stages.push(vec![self.collector]);
        let mut edges = Vec::new();
        for pair in stages.windows(2) {
            for &a in &pair[0] {
                for &b in &pair[1] {
                    edges.push(DirectedEdge::forced(a, b, w));
                }
            }
        }
        edges
    }

    /// Coefficient of `X_head` in every gadget variable, in exact rational
    /// arithmetic, obtained by pushing the forced weights through the
    /// stages. The collector's coefficient is the gadget identity.
    pub fn coefficients(&self) -> BTreeMap<VertexId, Rational> {
        let w = if self.q == 0 {
            Rational::ONE
        } else {
            Rational::new(1, self.r as u128)
        };
        let mut coef: BTreeMap<VertexId, Rational> = BTreeMap::new();
        let mut prev: Vec<VertexId> = vec![self.head];
        let mut prev_coef = Rational::ONE;
        let mut stages = self.inner_layers.clone();
        stages.push(vec![self.collector]);
        for stage in &stages {
            let incoming = prev.len() as u128;
            // every vertex of a stage has the whole previous stage as parents
            let c = prev_coef.mul(w).mul(Rational::new(incoming, 1));
            for &x in stage {
                coef.insert(x, c);
            }
            prev = stage.clone();
            prev_coef = c;
        }
        coef
    }
}

/// Positive rational with `u128` parts, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rational {
    pub num: u128,
    pub den: u128,
}

impl Rational {
    pub const ONE: Rational = Rational { num: 1, den: 1 };

    pub fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Rational {
            num: num / g,
            den: den / g,
        }
    }

    pub fn mul(self, o: Rational) -> Rational {
        Rational::new(self.num * o.num, self.den * o.den)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `(q, r)` gadget for `u → v` with `q ≥ 1` inner stages: `q − 1` stages
/// of width `r`, a last stage of width `r²`, and a collector.
pub fn build_gadget(
    u: VertexId,
    v: VertexId,
    q: usize,
    r: usize,
    ids: &mut IdAllocator,
) -> Result<GadgetSpec> {
    if q == 0 || r == 0 {
        return Err(Error::Config(format!(
            "gadget needs q >= 1 and r >= 1, got q = {q}, r = {r}"
        )));
    }
    let mut inner_layers = Vec::with_capacity(q);
    for stage in 0..q {
        let width = if stage + 1 == q { r * r } else { r };
        inner_layers.push(
            (0..width)
                .map(|_| ids.alloc())
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(GadgetSpec {
        head: u,
        tail: v,
        collector: ids.alloc()?,
        q,
        r,
        inner_layers,
    })
}

fn build_short_gadget(
    u: VertexId,
    v: VertexId,
    r: usize,
    ids: &mut IdAllocator,
) -> Result<GadgetSpec> {
    Ok(GadgetSpec {
        head: u,
        tail: v,
        collector: ids.alloc()?,
        q: 0,
        r,
        inner_layers: Vec::new(),
    })
}

/// Graph half of the reduction.
#[derive(Clone, Debug)]
pub struct GraphReduction {
    pub g_prime: MixedGraph,
    /// Original vertices keep their ids.
    pub old_to_new: Vec<VertexId>,
    pub gadgets: Vec<GadgetSpec>,
    pub r: usize,
    pub k_layers: usize,
}

impl GraphReduction {
    /// Recovery configuration for `G′`: every tail solves the rows of its
    /// original parents, with each collector standing in for its head.
    pub fn recovery_config(&self, base: &RecoveryConfig) -> RecoveryConfig {
        let head_of: BTreeMap<VertexId, VertexId> =
            self.gadgets.iter().map(|s| (s.collector, s.head)).collect();
        let mut cfg = base.clone();
        let tails: BTreeSet<VertexId> = self.gadgets.iter().map(|s| s.tail).collect();
        for t in tails {
            let rows = self
                .g_prime
                .parents_of(t)
                .iter()
                .filter(|&&p| self.g_prime.forced_weight(p, t).is_none())
                .map(|p| *head_of.get(p).unwrap_or(p))
                .collect();
            cfg.row_sets.insert(t, rows);
        }
        cfg
    }

    /// Original vertex whose variable a `G′` vertex is a multiple of, and
    /// the multiple.
    pub fn source_of(&self) -> Vec<(VertexId, f64)> {
        let n = self.old_to_new.len();
        let mut src: Vec<(VertexId, f64)> = (0..self.g_prime.n())
            .map(|i| (VertexId(i.min(n.saturating_sub(1))), 0.0))
            .collect();
        for (i, &v) in self.old_to_new.iter().enumerate() {
            src[v.index()] = (VertexId(i), 1.0);
        }
        for s in &self.gadgets {
            for x in s.inner_layers.iter().flatten() {
                src[x.index()] = (s.head, 1.0 / s.r as f64);
            }
            src[s.collector.index()] = (s.head, 1.0);
        }
        src
    }

    /// `Λ` on `G` carried over to `G′`: forced weights, original edges, and
    /// each skip edge's weight on its collector edge.
    pub fn lift_lambda(&self, lambda: &DMatrix<f64>) -> DMatrix<f64> {
        let np = self.g_prime.n();
        let mut out = DMatrix::zeros(np, np);
        for e in self.g_prime.directed_edges() {
            out[(e.source.index(), e.target.index())] = match e.forced_weight {
                Some(w) => w,
                None => {
                    let head = self
                        .gadgets
                        .iter()
                        .find(|s| s.collector == e.source)
                        .map_or(e.source, |s| s.head);
                    lambda[(head.index(), e.target.index())]
                }
            };
        }
        out
    }
}

/// Replaces every layer-skipping edge by a gadget with `r = ⌈√n⌉`.
pub fn reduce_graph(g: &MixedGraph) -> Result<GraphReduction> {
    g.validate_bow_free().into_result()?;
    let layers = g.layer_decomposition()?;
    let n = g.n();
    let r = (n as f64).sqrt().ceil().max(1.0) as usize;
    let limit = n.checked_pow(6).unwrap_or(usize::MAX).max(n);
    let mut ids = IdAllocator::new(n, limit);

    let mut directed: Vec<DirectedEdge> = Vec::new();
    let mut gadgets = Vec::new();
    for e in g.directed_edges() {
        let span = layers.layer(e.target) - layers.layer(e.source);
        if span < 2 {
            directed.push(e.clone());
            continue;
        }
        let spec = if span == 2 {
            build_short_gadget(e.source, e.target, r, &mut ids)?
        } else {
            build_gadget(e.source, e.target, span - 2, r, &mut ids)?
        };
        directed.extend(spec.forced_edges());
        directed.push(DirectedEdge::new(spec.collector, e.target));
        gadgets.push(spec);
    }

    let mut bidirected: BTreeSet<(VertexId, VertexId)> = g.bidirected_edges().clone();
    for s in &gadgets {
        for end in [s.head, s.tail] {
            for &w in g.siblings(end)? {
                bidirected.insert((w.min(s.collector), w.max(s.collector)));
            }
        }
    }

    let g_prime = MixedGraph::new(ids.len(), directed, bidirected)?;
    let k_layers = g_prime.layer_decomposition()?.depth();
    Ok(GraphReduction {
        g_prime,
        old_to_new: g.vertices().collect(),
        gadgets,
        r,
        k_layers,
    })
}

/// Where the literal per-entry covariance rule (factor `1/r` for every
/// gadget vertex) departs from the equivalent linear system.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiteralCrossCheck {
    pub mismatched_entries: usize,
    pub max_abs_difference: f64,
    /// Gadget vertices on whose rows the two rules differ.
    pub vertices: Vec<VertexId>,
}

#[derive(Clone, Debug)]
pub struct CovarianceReduction {
    pub sigma_prime: Covariance,
    pub literal_cross_check: LiteralCrossCheck,
}

/// `Σ′` of the equivalent linear system: every `G′` variable is a known
/// multiple of an original variable, so `Σ′(a, b) = c_a c_b Σ(src_a, src_b)`.
pub fn reduce_covariance(
    g: &MixedGraph,
    sigma: &Covariance,
    red: &GraphReduction,
) -> Result<CovarianceReduction> {
    check_square(&sigma.sigma, g.n(), "sigma")?;
    let src = red.source_of();
    let np = red.g_prime.n();
    let s = &sigma.sigma;
    let sigma_prime = DMatrix::from_fn(np, np, |a, b| {
        let ((sa, ca), (sb, cb)) = (src[a], src[b]);
        ca * cb * s[(sa.index(), sb.index())]
    });

    let n = g.n();
    let literal_factor = |i: usize| if i < n { 1.0 } else { 1.0 / red.r as f64 };
    let mut mismatched_entries = 0;
    let mut max_abs_difference = 0.0_f64;
    let mut vertices = BTreeSet::new();
    for a in 0..np {
        for b in 0..np {
            let ((sa, _), (sb, _)) = (src[a], src[b]);
            let literal = literal_factor(a) * literal_factor(b) * s[(sa.index(), sb.index())];
            let diff = (literal - sigma_prime[(a, b)]).abs();
            if diff > 1e-12 * s[(sa.index(), sb.index())].abs().max(f64::MIN_POSITIVE) {
                mismatched_entries += 1;
                max_abs_difference = max_abs_difference.max(diff);
                for x in [a, b] {
                    if x >= n && src[x].1 != literal_factor(x) {
                        vertices.insert(VertexId(x));
                    }
                }
            }
        }
    }
    Ok(CovarianceReduction {
        sigma_prime: Covariance::new(sigma_prime, sigma.provenance),
        literal_cross_check: LiteralCrossCheck {
            mismatched_entries,
            max_abs_difference,
            vertices: vertices.into_iter().collect(),
        },
    })
}

/// Graph and covariance reduction together.
#[derive(Clone, Debug)]
pub struct ReductionOutput {
    pub graph: GraphReduction,
    pub sigma_prime: Covariance,
    pub literal_cross_check: LiteralCrossCheck,
}

pub fn reduce(g: &MixedGraph, sigma: &Covariance) -> Result<ReductionOutput> {
    let graph = reduce_graph(g)?;
    let cov = reduce_covariance(g, sigma, &graph)?;
    Ok(ReductionOutput {
        graph,
        sigma_prime: cov.sigma_prime,
        literal_cross_check: cov.literal_cross_check,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub details: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckItem>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckItem> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn item(name: &str, details: Vec<String>) -> CheckItem {
    CheckItem {
        name: name.into(),
        passed: details.is_empty(),
        details,
    }
}

/// Structural and numerical checks of a reduction:
/// bow-freeness, layering, size bounds, gadget identities, recovered
/// collector weights against the original weights, and entrywise equality
/// of every original vertex's linear system.
pub fn verify_reduction(
    g: &MixedGraph,
    sigma: &Covariance,
    red: &ReductionOutput,
    tol: f64,
) -> Result<VerificationReport> {
    let gp = &red.graph.g_prime;
    let n = g.n();
    let mut checks = Vec::new();

    let bows = gp.validate_bow_free().violations;
    let inner: BTreeSet<VertexId> = red
        .graph
        .gadgets
        .iter()
        .flat_map(|s| s.inner_layers.iter().flatten().copied())
        .collect();
    let mut details: Vec<String> = bows
        .iter()
        .map(|(a, b)| format!("bow at ({a}, {b})"))
        .collect();
    details.extend(
        gp.bidirected_edges()
            .iter()
            .filter(|(a, b)| inner.contains(a) || inner.contains(b))
            .map(|(a, b)| format!("bidirected edge ({a}, {b}) touches an inner gadget vertex")),
    );
    checks.push(item("bow-free", details));

    let details = match gp.layer_decomposition() {
        Ok(l) => gp
            .directed_edges()
            .iter()
            .filter(|e| l.layer(e.target) != l.layer(e.source) + 1)
            .map(|e| format!("edge {} -> {} skips a layer", e.source, e.target))
            .collect(),
        Err(e) => vec![e.to_string()],
    };
    checks.push(item("layered", details));

    let mut details = Vec::new();
    if red.graph.k_layers > n * n {
        details.push(format!(
            "{} layers exceed n^2 = {}",
            red.graph.k_layers,
            n * n
        ));
    }
    if (gp.n() as f64) > (n as f64).powi(6) {
        details.push(format!("{} vertices exceed n^6", gp.n()));
    }
    checks.push(item("size", details));

    let details = red
        .graph
        .gadgets
        .iter()
        .filter(|s| s.coefficients()[&s.collector] != Rational::ONE)
        .map(|s| {
            format!(
                "collector {} does not reproduce head {}",
                s.collector, s.head
            )
        })
        .collect();
    checks.push(item("gadget-identity", details));

    let mut details = Vec::new();
    let base = RecoveryConfig::default();
    match (
        recover_all(g, sigma, &base),
        recover_all(gp, &red.sigma_prime, &red.graph.recovery_config(&base)),
    ) {
        (Ok(orig), Ok(reduced)) => {
            for s in &red.graph.gadgets {
                let want = orig.lambda_hat[(s.head.index(), s.tail.index())];
                let got = reduced.lambda_hat[(s.collector.index(), s.tail.index())];
                if !((want - got).abs() <= tol) {
                    details.push(format!(
                        "collector {} -> {} recovered {got:e}, original edge {} -> {} recovered {want:e}",
                        s.collector, s.tail, s.head, s.tail
                    ));
                }
            }
            for e in g.directed_edges() {
                let (a, b) = (e.source.index(), e.target.index());
                if gp.has_directed(e.source, e.target)
                    && !((orig.lambda_hat[(a, b)] - reduced.lambda_hat[(a, b)]).abs() <= tol)
                {
                    details.push(format!(
                        "edge {} -> {} differs between the graphs",
                        e.source, e.target
                    ));
                }
            }
        }
        (Err(e), _) => details.push(format!("recovery on the original graph failed: {e}")),
        (_, Err(e)) => details.push(format!("recovery on the reduced graph failed: {e}")),
    }
    checks.push(item("recovered-weights", details));

    let mut details = Vec::new();
    match recover_all(g, sigma, &base) {
        Ok(orig) => {
            let lifted = red.graph.lift_lambda(&orig.lambda_hat);
            let cfg_p = red.graph.recovery_config(&base);
            let head_of: BTreeMap<VertexId, VertexId> = red
                .graph
                .gadgets
                .iter()
                .map(|s| (s.collector, s.head))
                .collect();
            let to_orig = |x: VertexId| *head_of.get(&x).unwrap_or(&x);
            let partial = PartialLambda::complete(orig.lambda_hat.clone());
            let partial_p = PartialLambda::complete(lifted);
            for v in g.vertices() {
                let a = build_system(g, sigma, &partial, v, &base)?;
                if a.is_empty() {
                    continue;
                }
                let b = build_system(gp, &red.sigma_prime, &partial_p, v, &cfg_p)?;
                let row_a: BTreeMap<VertexId, usize> =
                    a.y_set.iter().enumerate().map(|(i, y)| (*y, i)).collect();
                let col_a: BTreeMap<VertexId, usize> = a
                    .unknowns
                    .iter()
                    .enumerate()
                    .map(|(i, y)| (*y, i))
                    .collect();
                if b.unknowns.len() != a.unknowns.len() {
                    details.push(format!("vertex {v}: system sizes differ"));
                    continue;
                }
                for (i, y) in b.y_set.iter().enumerate() {
                    let Some(&ia) = row_a.get(y) else {
                        details.push(format!("vertex {v}: row {y} has no counterpart"));
                        continue;
                    };
                    for (j, c) in b.unknowns.iter().enumerate() {
                        let Some(&ja) = col_a.get(&to_orig(*c)) else {
                            details.push(format!("vertex {v}: column {c} has no counterpart"));
                            continue;
                        };
                        let (x, xp) = (a.a_matrix[(ia, ja)], b.a_matrix[(i, j)]);
                        if !((x - xp).abs() <= tol * x.abs().max(1.0)) {
                            details.push(format!("vertex {v}: A[{y}, {c}] is {xp:e} in the reduced system, {x:e} originally"));
                        }
                    }
                    let (x, xp) = (a.b_vector[ia], b.b_vector[i]);
                    if !((x - xp).abs() <= tol * x.abs().max(1.0)) {
                        details.push(format!(
                            "vertex {v}: b[{y}] is {xp:e} in the reduced system, {x:e} originally"
                        ));
                    }
                }
            }
        }
        Err(e) => details.push(format!("recovery on the original graph failed: {e}")),
    }
    checks.push(item("same-systems", details));

    Ok(VerificationReport { checks })
}
