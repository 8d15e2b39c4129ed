//! The hybrid multigraph: structural and functional k-NN edges, cross-modal
//! cosine-similarity edges and multi-scale detour edges over the same node set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::connectome::{knn_sparsify, sbm_subject_matrix, ConnectivityMatrix, Modality, SparseEdgeSet, SubjectRecord};
use crate::error::{Error, Result};

/// Edge family. The detour family is split by search radius bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Structural,
    Functional,
    CrossModal,
    DetourShort,
    DetourMedium,
    DetourLong,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] = [
        EdgeKind::Structural,
        EdgeKind::Functional,
        EdgeKind::CrossModal,
        EdgeKind::DetourShort,
        EdgeKind::DetourMedium,
        EdgeKind::DetourLong,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_detour(self) -> bool {
        matches!(self, EdgeKind::DetourShort | EdgeKind::DetourMedium | EdgeKind::DetourLong)
    }

    /// 2 hops is short, 3–4 medium, 5 and beyond long.
    pub fn detour_bucket(radius: usize) -> Result<EdgeKind> {
        match radius {
            0 | 1 => Err(Error::Config(format!("detour radius must be >= 2, got {radius}"))),
            2 => Ok(EdgeKind::DetourShort),
            3 | 4 => Ok(EdgeKind::DetourMedium),
            _ => Ok(EdgeKind::DetourLong),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Structural => "structural",
            EdgeKind::Functional => "functional",
            EdgeKind::CrossModal => "cross_modal",
            EdgeKind::DetourShort => "detour_short",
            EdgeKind::DetourMedium => "detour_medium",
            EdgeKind::DetourLong => "detour_long",
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridEdge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    pub weight: f64,
}

impl HybridEdge {
    /// Orders the endpoints so that `i < j`.
    pub fn new(a: usize, b: usize, kind: EdgeKind, weight: f64) -> Self {
        Self {
            i: a.min(b),
            j: a.max(b),
            kind,
            weight,
        }
    }
}

pub const NODE_FEATURE_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridGraph {
    pub node_count: usize,
    /// Row i is `[structural row mean, functional row mean]`.
    pub node_features: Vec<[f64; NODE_FEATURE_DIM]>,
    pub edges: Vec<HybridEdge>,
}

impl HybridGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.node_count;
        if self.node_features.len() != n {
            return Err(Error::Validation(format!(
                "graph has {} feature rows for {n} nodes",
                self.node_features.len()
            )));
        }
        if self.node_features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation("graph node features must be finite".into()));
        }
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            if e.i >= n || e.j >= n || e.i == e.j {
                return Err(Error::Validation(format!("invalid edge ({}, {})", e.i, e.j)));
            }
            if !e.weight.is_finite() {
                return Err(Error::Validation(format!("edge ({}, {}) has non-finite weight", e.i, e.j)));
            }
            if e.kind == EdgeKind::CrossModal && e.weight.abs() > 1.0 + 1e-12 {
                return Err(Error::Validation(format!("cross-modal weight {} outside [-1, 1]", e.weight)));
            }
            if e.kind.is_detour() && e.weight < 0.0 {
                return Err(Error::Validation(format!("detour weight {} is negative", e.weight)));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j), e.kind)) {
                return Err(Error::Validation(format!(
                    "duplicate {} edge ({}, {})",
                    e.kind, e.i, e.j
                )));
            }
        }
        Ok(())
    }

    /// For every node, the `(edge index, neighbour)` slots it attends over,
    /// in edge order.
    pub fn incidence(&self) -> Vec<Vec<(usize, usize)>> {
        let mut inc = vec![Vec::new(); self.node_count];
        for (idx, e) in self.edges.iter().enumerate() {
            inc[e.i].push((idx, e.j));
            inc[e.j].push((idx, e.i));
        }
        inc
    }

    pub fn count_kind(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn kind_counts(&self) -> BTreeMap<EdgeKind, usize> {
        let mut out = BTreeMap::new();
        for e in &self.edges {
            *out.entry(e.kind).or_insert(0) += 1;
        }
        out
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut node_features = vec![[0.0; NODE_FEATURE_DIM]; self.node_count];
        for (i, f) in self.node_features.iter().enumerate() {
            node_features[perm[i]] = *f;
        }
        let edges = self
            .edges
            .iter()
            .map(|e| HybridEdge::new(perm[e.i], perm[e.j], e.kind, e.weight))
            .collect();
        Self {
            node_count: self.node_count,
            node_features,
            edges,
        }
    }
}

/// Graph-construction hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphParams {
    pub k: usize,
    pub gamma: usize,
    pub radii: Vec<usize>,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            k: 5,
            gamma: 8,
            radii: vec![2, 3, 5],
        }
    }
}

/// Which edge families and modalities enter the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphAblation {
    pub use_cmc: bool,
    pub use_mdc: bool,
    pub use_sbm: bool,
}

impl Default for GraphAblation {
    fn default() -> Self {
        Self {
            use_cmc: true,
            use_mdc: true,
            use_sbm: true,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Links every node's structural profile to its `gamma` most similar
/// functional profiles on other nodes. A pair chosen from both sides keeps the
/// larger of the two similarities.
pub fn cross_modal_connections(
    ws: &ConnectivityMatrix,
    wf: &ConnectivityMatrix,
    gamma: usize,
) -> Result<Vec<HybridEdge>> {
    let n = ws.size();
    if wf.size() != n {
        return Err(Error::Validation(format!(
            "structural size {n} does not match functional size {}",
            wf.size()
        )));
    }
    if gamma == 0 || gamma > n {
        return Err(Error::Config(format!("gamma = {gamma} out of range 1..={n}")));
    }
    let mut best: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..n {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine_similarity(ws.row(i), wf.row(j))))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, s) in sims.iter().take(gamma) {
            let key = (i.min(j), i.max(j));
            best.entry(key)
                .and_modify(|w| *w = w.max(s))
                .or_insert(s);
        }
    }
    Ok(best
        .into_iter()
        .map(|((i, j), w)| HybridEdge::new(i, j, EdgeKind::CrossModal, w))
        .collect())
}

/// Number of simple paths with exactly `radius` edges from `from` to `to`.
pub fn count_detours(adjacency: &[Vec<bool>], from: usize, to: usize, radius: usize) -> Result<u64> {
    if radius < 2 {
        return Err(Error::Config(format!("detour radius must be >= 2, got {radius}")));
    }
    let n = adjacency.len();
    if from >= n || to >= n || from == to {
        return Err(Error::Validation(format!(
            "detour endpoints ({from}, {to}) invalid for {n} nodes"
        )));
    }
    let neighbours: Vec<Vec<usize>> = adjacency
        .iter()
        .map(|row| row.iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect())
        .collect();
    let mut visited = vec![false; n];
    visited[from] = true;
    Ok(dfs_count(&neighbours, &mut visited, from, to, radius))
}

fn dfs_count(nb: &[Vec<usize>], visited: &mut [bool], at: usize, to: usize, remaining: usize) -> u64 {
    if remaining == 1 {
        return nb[at].contains(&to) as u64;
    }
    let mut total = 0;
    for &next in &nb[at] {
        // the target may only be reached on the final hop
        if visited[next] || next == to {
            continue;
        }
        visited[next] = true;
        total += dfs_count(nb, visited, next, to, remaining - 1);
        visited[next] = false;
    }
    total
}

/// Detour edges for every functionally linked pair: one edge per radius bucket
/// with at least one structural detour, weighted `ln(1 + count)`.
pub fn multiscale_detour_connections(
    structural: &SparseEdgeSet,
    functional: &SparseEdgeSet,
    radii: &[usize],
) -> Result<Vec<HybridEdge>> {
    validate_radii(radii)?;
    if structural.node_count != functional.node_count {
        return Err(Error::Validation("structural and functional edge sets differ in size".into()));
    }
    let adj = structural.binary_adjacency();
    let mut out = Vec::new();
    for f in &functional.edges {
        for &r in radii {
            let c = count_detours(&adj, f.i, f.j, r)?;
            if c > 0 {
                out.push(HybridEdge::new(f.i, f.j, EdgeKind::detour_bucket(r)?, (c as f64).ln_1p()));
            }
        }
    }
    Ok(out)
}

fn validate_radii(radii: &[usize]) -> Result<()> {
    if radii.is_empty() {
        return Err(Error::Config("detour radii must be nonempty".into()));
    }
    let mut prev: Option<(usize, EdgeKind)> = None;
    for &r in radii {
        let kind = EdgeKind::detour_bucket(r)?;
        if let Some((pr, pk)) = prev {
            if r <= pr {
                return Err(Error::Config(format!("detour radii must be strictly ascending: {radii:?}")));
            }
            if kind == pk {
                return Err(Error::Config(format!(
                    "radii {pr} and {r} fall in the same {kind} bucket"
                )));
            }
        }
        prev = Some((r, kind));
    }
    Ok(())
}

fn row_means(w: &ConnectivityMatrix) -> Vec<f64> {
    let n = w.size();
    (0..n)
        .map(|i| w.row(i).iter().sum::<f64>() / (n - 1) as f64)
        .collect()
}

/// Builds the subject's hybrid graph under the given parameters and ablation.
///
/// Without the structural modality the structural, cross-modal and detour
/// families are all empty and the structural feature column is zero.
pub fn assemble_hybrid_graph(
    subject: &SubjectRecord,
    params: &GraphParams,
    ablation: GraphAblation,
) -> Result<HybridGraph> {
    let n = subject.node_count();
    validate_radii(&params.radii)?;
    let ws = if ablation.use_sbm {
        sbm_subject_matrix(&subject.sbm)?
    } else {
        ConnectivityMatrix::zeros(n, Modality::Structural)
    };
    let wf = &subject.fnc;

    let s_edges = knn_sparsify(&ws, params.k)?;
    let f_edges = knn_sparsify(wf, params.k)?;
    if s_edges.edges.is_empty() && f_edges.edges.is_empty() {
        return Err(Error::Validation(format!(
            "degenerate subject {}: no nonzero connectivity survives k-NN",
            subject.subject_id
        )));
    }

    let mut edges: Vec<HybridEdge> = Vec::new();
    edges.extend(s_edges.edges.iter().map(|e| HybridEdge::new(e.i, e.j, EdgeKind::Structural, e.weight)));
    edges.extend(f_edges.edges.iter().map(|e| HybridEdge::new(e.i, e.j, EdgeKind::Functional, e.weight)));
    if ablation.use_sbm && ablation.use_cmc {
        edges.extend(cross_modal_connections(&ws, wf, params.gamma)?);
    }
    if ablation.use_sbm && ablation.use_mdc {
        let mut detours = multiscale_detour_connections(&s_edges, &f_edges, &params.radii)?;
        detours.sort_by(|a, b| a.kind.cmp(&b.kind).then((a.i, a.j).cmp(&(b.i, b.j))));
        edges.extend(detours);
    }

    let sm = row_means(&ws);
    let fm = row_means(wf);
    let graph = HybridGraph {
        node_count: n,
        node_features: sm.into_iter().zip(fm).map(|(s, f)| [s, f]).collect(),
        edges,
    };
    graph.validate()?;
    Ok(graph)
}
