//! Mixed causal graphs `G = (V, E, F)`.
//!
//! Directed edges carry causal influence and must be acyclic for every
//! algorithm past [`MixedGraph::topological_order`]; bidirected edges mark
//! correlated noise and are stored as sorted pairs. Vertices are dense
//! indices `0..n`. All queries break ties by ascending index so that every
//! output is reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};

/// Dense vertex index in `0..n`.
///
/// `Display` and serde use the 1-based label of every serialized format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VertexId(pub usize);

impl VertexId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl From<usize> for VertexId {
    fn from(i: usize) -> Self {
        VertexId(i)
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0 + 1)
    }
}

impl serde::Serialize for VertexId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u64(self.0 as u64 + 1)
    }
}

impl<'de> serde::Deserialize<'de> for VertexId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let label = u64::deserialize(d)?;
        if label == 0 {
            return Err(serde::de::Error::custom("vertex labels are 1-based"));
        }
        Ok(VertexId(label as usize - 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectedEdge {
    pub source: VertexId,
    pub target: VertexId,
    /// Weight fixed by construction; only gadget edges carry one.
    pub forced_weight: Option<f64>,
}

impl DirectedEdge {
    pub fn new(source: impl Into<VertexId>, target: impl Into<VertexId>) -> Self {
        DirectedEdge {
            source: source.into(),
            target: target.into(),
            forced_weight: None,
        }
    }

    pub fn forced(source: impl Into<VertexId>, target: impl Into<VertexId>, weight: f64) -> Self {
        DirectedEdge {
            source: source.into(),
            target: target.into(),
            forced_weight: Some(weight),
        }
    }
}

/// Immutable mixed graph with cached, sorted adjacency lists.
#[derive(Clone, Debug)]
pub struct MixedGraph {
    n: usize,
    directed: Vec<DirectedEdge>,
    bidirected: BTreeSet<(VertexId, VertexId)>,
    parents: Vec<Vec<VertexId>>,
    children: Vec<Vec<VertexId>>,
    siblings: Vec<Vec<VertexId>>,
    forced: BTreeMap<(VertexId, VertexId), f64>,
}

impl PartialEq for MixedGraph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.directed == other.directed && self.bidirected == other.bidirected
    }
}

/// Outcome of the bow-freeness check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BowFreeReport {
    /// Sorted pairs carrying both a directed and a bidirected edge.
    pub violations: Vec<(VertexId, VertexId)>,
}

impl BowFreeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::NotBowFree {
                pairs: self.violations,
            })
        }
    }
}

/// Longest-path layering: `layer(v)` is 1 for parentless vertices and
/// `1 + max layer(parent)` otherwise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDecomposition {
    layer_of: Vec<usize>,
    layers: BTreeMap<usize, Vec<VertexId>>,
}

impl LayerDecomposition {
    pub fn layer(&self, v: VertexId) -> usize {
        self.layer_of[v.index()]
    }

    pub fn layer_of(&self) -> &[usize] {
        &self.layer_of
    }

    pub fn layers(&self) -> &BTreeMap<usize, Vec<VertexId>> {
        &self.layers
    }

    /// Number of non-empty layers (0 for the empty graph).
    pub fn depth(&self) -> usize {
        self.layers.keys().next_back().copied().unwrap_or(0)
    }

    /// Vertices in increasing layer order, ascending index within a layer.
    pub fn ordered_vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.layers.values().flatten().copied()
    }
}

/// A half-trek from `start` to its last vertex: an optional leading
/// bidirected step followed by directed steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HalfTrek {
    pub start: VertexId,
    /// Sibling reached by the leading bidirected edge, if the path has one.
    pub via_sibling: Option<VertexId>,
    /// Vertices reached by directed steps, in order.
    pub directed_steps: Vec<VertexId>,
}

impl MixedGraph {
    /// Builds a graph after structural validation: indices in range, no
    /// self-loops, no repeated directed edge. Repeated bidirected edges
    /// collapse to one.
    pub fn new(
        n: usize,
        directed: impl IntoIterator<Item = DirectedEdge>,
        bidirected: impl IntoIterator<Item = (VertexId, VertexId)>,
    ) -> Result<Self> {
        let check = |v: VertexId| {
            if v.index() >= n {
                Err(Error::VertexOutOfRange {
                    vertex: v.index(),
                    n,
                })
            } else {
                Ok(())
            }
        };

        let mut directed: Vec<DirectedEdge> = directed.into_iter().collect();
        for e in &directed {
            check(e.source)?;
            check(e.target)?;
            if e.source == e.target {
                return Err(Error::SelfLoop(e.source));
            }
        }
        directed.sort_by_key(|e| (e.source, e.target));
        for w in directed.windows(2) {
            if w[0].source == w[1].source && w[0].target == w[1].target {
                return Err(Error::DuplicateEdge(w[0].source, w[0].target));
            }
        }

        let mut bi = BTreeSet::new();
        for (a, b) in bidirected {
            check(a)?;
            check(b)?;
            if a == b {
                return Err(Error::SelfLoop(a));
            }
            bi.insert((a.min(b), a.max(b)));
        }

        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut siblings = vec![Vec::new(); n];
        let mut forced = BTreeMap::new();
        for e in &directed {
            parents[e.target.index()].push(e.source);
            children[e.source.index()].push(e.target);
            if let Some(w) = e.forced_weight {
                forced.insert((e.source, e.target), w);
            }
        }
        for &(a, b) in &bi {
            siblings[a.index()].push(b);
            siblings[b.index()].push(a);
        }
        for list in parents
            .iter_mut()
            .chain(children.iter_mut())
            .chain(siblings.iter_mut())
        {
            list.sort_unstable();
        }

        Ok(MixedGraph {
            n,
            directed,
            bidirected: bi,
            parents,
            children,
            siblings,
            forced,
        })
    }

    /// Convenience constructor from 0-based index pairs.
    pub fn from_edges(
        n: usize,
        directed: &[(usize, usize)],
        bidirected: &[(usize, usize)],
    ) -> Result<Self> {
        MixedGraph::new(
            n,
            directed.iter().map(|&(u, v)| DirectedEdge::new(u, v)),
            bidirected.iter().map(|&(u, v)| (VertexId(u), VertexId(v))),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> {
        (0..self.n).map(VertexId)
    }

    /// Directed edges sorted by `(source, target)`.
    pub fn directed_edges(&self) -> &[DirectedEdge] {
        &self.directed
    }

    /// Bidirected edges as sorted pairs `(min, max)`.
    pub fn bidirected_edges(&self) -> &BTreeSet<(VertexId, VertexId)> {
        &self.bidirected
    }

    fn check(&self, v: VertexId) -> Result<()> {
        if v.index() >= self.n {
            Err(Error::VertexOutOfRange {
                vertex: v.index(),
                n: self.n,
            })
        } else {
            Ok(())
        }
    }

    pub fn parents(&self, v: VertexId) -> Result<&[VertexId]> {
        self.check(v)?;
        Ok(&self.parents[v.index()])
    }

    pub fn children(&self, v: VertexId) -> Result<&[VertexId]> {
        self.check(v)?;
        Ok(&self.children[v.index()])
    }

    /// Bidirected neighbours of `v`.
    pub fn siblings(&self, v: VertexId) -> Result<&[VertexId]> {
        self.check(v)?;
        Ok(&self.siblings[v.index()])
    }

    /// Parents of parents, `pa(pa(v))`, sorted and deduplicated.
    pub fn spa(&self, v: VertexId) -> Result<Vec<VertexId>> {
        self.check(v)?;
        let set: BTreeSet<VertexId> = self.parents[v.index()]
            .iter()
            .flat_map(|p| self.parents[p.index()].iter().copied())
            .collect();
        Ok(set.into_iter().collect())
    }

    pub(crate) fn parents_of(&self, v: VertexId) -> &[VertexId] {
        &self.parents[v.index()]
    }

    pub fn has_directed(&self, u: VertexId, v: VertexId) -> bool {
        u.index() < self.n && self.children[u.index()].binary_search(&v).is_ok()
    }

    pub fn has_bidirected(&self, u: VertexId, v: VertexId) -> bool {
        self.bidirected.contains(&(u.min(v), u.max(v)))
    }

    /// True when `u` and `v` are joined by a directed edge in either direction.
    pub fn adjacent_directed(&self, u: VertexId, v: VertexId) -> bool {
        self.has_directed(u, v) || self.has_directed(v, u)
    }

    pub fn forced_weight(&self, u: VertexId, v: VertexId) -> Option<f64> {
        self.forced.get(&(u, v)).copied()
    }

    pub fn has_forced_edges(&self) -> bool {
        !self.forced.is_empty()
    }

    /// Pairs that carry both a directed and a bidirected edge.
    pub fn validate_bow_free(&self) -> BowFreeReport {
        let violations = self
            .bidirected
            .iter()
            .filter(|&&(a, b)| self.adjacent_directed(a, b))
            .copied()
            .collect();
        BowFreeReport { violations }
    }

    /// Kahn's algorithm with a min-heap, so ties go to the smaller index.
    pub fn topological_order(&self) -> Result<Vec<VertexId>> {
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut heap: BinaryHeap<Reverse<VertexId>> = self
            .vertices()
            .filter(|v| indeg[v.index()] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(self.n);
        while let Some(Reverse(u)) = heap.pop() {
            order.push(u);
            for &c in &self.children[u.index()] {
                indeg[c.index()] -= 1;
                if indeg[c.index()] == 0 {
                    heap.push(Reverse(c));
                }
            }
        }
        if order.len() == self.n {
            Ok(order)
        } else {
            Err(Error::Cycle {
                cycle: self.find_cycle(&indeg),
            })
        }
    }

    /// Every vertex left with positive in-degree after Kahn's algorithm has
    /// a parent that is also left, so walking parents must revisit a vertex.
    fn find_cycle(&self, indeg: &[usize]) -> Vec<VertexId> {
        let remaining = |v: VertexId| indeg[v.index()] > 0;
        let Some(start) = self.vertices().find(|&v| remaining(v)) else {
            return Vec::new();
        };
        let mut seen: BTreeMap<VertexId, usize> = BTreeMap::new();
        let mut walk = Vec::new();
        let mut cur = start;
        loop {
            if let Some(&pos) = seen.get(&cur) {
                let mut cycle: Vec<VertexId> = walk[pos..].to_vec();
                // the walk follows parents; report the cycle forwards
                cycle.reverse();
                let min_pos = cycle
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, v)| **v)
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                cycle.rotate_left(min_pos);
                return cycle;
            }
            seen.insert(cur, walk.len());
            walk.push(cur);
            cur = *self.parents[cur.index()]
                .iter()
                .find(|p| remaining(**p))
                .expect("remaining vertex has a remaining parent");
        }
    }

    pub fn layer_decomposition(&self) -> Result<LayerDecomposition> {
        let order = self.topological_order()?;
        let mut layer_of = vec![1usize; self.n];
        for v in order {
            let l = self.parents[v.index()]
                .iter()
                .map(|p| layer_of[p.index()] + 1)
                .max()
                .unwrap_or(1);
            layer_of[v.index()] = l;
        }
        let mut layers: BTreeMap<usize, Vec<VertexId>> = BTreeMap::new();
        for v in self.vertices() {
            layers.entry(layer_of[v.index()]).or_default().push(v);
        }
        Ok(LayerDecomposition { layer_of, layers })
    }

    /// Vertices reachable from `v` by a half-trek `v <-> s -> ... -> w` or
    /// `v -> ... -> w`. The BFS is seeded with the children of `v` and the
    /// children of its siblings; siblings themselves are only included when
    /// some directed path reaches them.
    pub fn half_trek_reachable(&self, v: VertexId) -> Result<BTreeSet<VertexId>> {
        Ok(self.half_trek_search(v)?.into_keys().collect())
    }

    /// A witness half-trek from `v` to `w`, if one exists.
    pub fn half_trek_path(&self, v: VertexId, w: VertexId) -> Result<Option<HalfTrek>> {
        self.check(w)?;
        let pred = self.half_trek_search(v)?;
        if !pred.contains_key(&w) {
            return Ok(None);
        }
        let mut steps = vec![w];
        let mut cur = w;
        let via_sibling = loop {
            match pred[&cur] {
                Step::Directed(p) => {
                    steps.push(p);
                    cur = p;
                }
                Step::ChildOfStart => break None,
                Step::ChildOfSibling(s) => break Some(s),
            }
        };
        steps.reverse();
        Ok(Some(HalfTrek {
            start: v,
            via_sibling,
            directed_steps: steps,
        }))
    }

    fn half_trek_search(&self, v: VertexId) -> Result<BTreeMap<VertexId, Step>> {
        self.check(v)?;
        let mut pred: BTreeMap<VertexId, Step> = BTreeMap::new();
        let mut queue = VecDeque::new();
        let seeds = self.children[v.index()]
            .iter()
            .map(|&c| (c, Step::ChildOfStart))
            .chain(self.siblings[v.index()].iter().flat_map(|&s| {
                self.children[s.index()]
                    .iter()
                    .map(move |&c| (c, Step::ChildOfSibling(s)))
            }));
        for (c, step) in seeds {
            if !pred.contains_key(&c) {
                pred.insert(c, step);
                queue.push_back(c);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &c in &self.children[u.index()] {
                if !pred.contains_key(&c) {
                    pred.insert(c, Step::Directed(u));
                    queue.push_back(c);
                }
            }
        }
        Ok(pred)
    }

    /// Maximum over vertices of max(in-degree, out-degree), directed edges only.
    pub fn max_degree_k(&self) -> usize {
        self.parents
            .iter()
            .zip(&self.children)
            .map(|(p, c)| p.len().max(c.len()))
            .max()
            .unwrap_or(0)
    }

    /// True iff every directed edge joins consecutive layers.
    pub fn check_k_layered(&self) -> Result<bool> {
        let layers = self.layer_decomposition()?;
        Ok(self
            .directed
            .iter()
            .all(|e| layers.layer(e.target) == layers.layer(e.source) + 1))
    }
}

#[derive(Clone, Copy, Debug)]
enum Step {
    Directed(VertexId),
    ChildOfStart,
    ChildOfSibling(VertexId),
}
