//! Directed follow graphs and the matrices derived from them.
//!
//! An edge `(i, j)` means "i follows j": `j` influences `i`, and content
//! posted by `j` shows up in the feed of `i`. Out-neighbours of `i` are its
//! followees, in-neighbours are its followers.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use rand::Rng;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Compressed adjacency in both directions. Neighbour lists are sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SocialGraph {
    out_offsets: Vec<usize>,
    out_targets: Vec<NodeId>,
    in_offsets: Vec<usize>,
    in_sources: Vec<NodeId>,
}

impl SocialGraph {
    /// Builds a graph on `node_count` nodes. Duplicate edges collapse into one;
    /// self-loops and out-of-range ids are rejected.
    pub fn from_edges<I>(node_count: usize, edges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (NodeId, NodeId)>,
    {
        if node_count == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            for node in [i, j] {
                if node >= node_count {
                    return Err(Error::NodeOutOfRange { node, node_count });
                }
            }
            if i == j {
                return Err(Error::SelfLoop { line: 0, node: i as u64 });
            }
            set.insert((i, j));
        }

        let mut out_offsets = vec![0; node_count + 1];
        let mut in_offsets = vec![0; node_count + 1];
        for &(i, j) in &set {
            out_offsets[i + 1] += 1;
            in_offsets[j + 1] += 1;
        }
        for k in 0..node_count {
            out_offsets[k + 1] += out_offsets[k];
            in_offsets[k + 1] += in_offsets[k];
        }
        // BTreeSet order is (i, j) ascending, so targets come out sorted.
        let out_targets: Vec<NodeId> = set.iter().map(|&(_, j)| j).collect();
        let mut in_sources = vec![0; set.len()];
        let mut cursor = in_offsets.clone();
        for &(i, j) in &set {
            in_sources[cursor[j]] = i;
            cursor[j] += 1;
        }
        Ok(Self { out_offsets, out_targets, in_offsets, in_sources })
    }

    pub fn node_count(&self) -> usize {
        self.out_offsets.len() - 1
    }

    pub fn edge_count(&self) -> usize {
        self.out_targets.len()
    }

    /// `N⁺(i)`: the nodes `i` follows.
    pub fn followees(&self, i: NodeId) -> &[NodeId] {
        &self.out_targets[self.out_offsets[i]..self.out_offsets[i + 1]]
    }

    /// `N⁻(i)`: the nodes following `i`.
    pub fn followers(&self, i: NodeId) -> &[NodeId] {
        &self.in_sources[self.in_offsets[i]..self.in_offsets[i + 1]]
    }

    pub fn out_degree(&self, i: NodeId) -> usize {
        self.out_offsets[i + 1] - self.out_offsets[i]
    }

    pub fn in_degree(&self, i: NodeId) -> usize {
        self.in_offsets[i + 1] - self.in_offsets[i]
    }

    pub fn has_edge(&self, i: NodeId, j: NodeId) -> bool {
        self.followees(i).binary_search(&j).is_ok()
    }

    /// All edges in `(follower, followee)` order, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.node_count()).flat_map(move |i| self.followees(i).iter().map(move |&j| (i, j)))
    }

    pub fn check_node(&self, node: NodeId) -> Result<()> {
        if node < self.node_count() {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange { node, node_count: self.node_count() })
        }
    }

    /// True when every edge has its reverse.
    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(i, j)| self.has_edge(j, i))
    }

    /// Nodes without followees. The FJ machinery needs this to be empty.
    pub fn dangling_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count()).filter(|&i| self.out_degree(i) == 0).collect()
    }

    /// Induced subgraph on `nodes`, re-compacted in ascending id order.
    pub fn induced_subgraph(&self, nodes: &[NodeId]) -> Result<Subgraph> {
        let mut keep: Vec<NodeId> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        for &node in &keep {
            self.check_node(node)?;
        }
        let mut old_to_new = vec![None; self.node_count()];
        for (new, &old) in keep.iter().enumerate() {
            old_to_new[old] = Some(new);
        }
        let edges = keep.iter().flat_map(|&i| {
            let old_to_new = &old_to_new;
            self.followees(i).iter().filter_map(move |&j| old_to_new[j].map(|nj| (old_to_new[i].unwrap(), nj)))
        });
        let graph = SocialGraph::from_edges(keep.len(), edges.collect::<Vec<_>>())?;
        Ok(Subgraph { graph, old_to_new, new_to_old: keep })
    }

    /// Writes the graph in the same "i j" edge-list format the loader reads.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {} nodes, {} edges; line \"i j\" means i follows j", self.node_count(), self.edge_count())?;
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}")?;
        }
        Ok(())
    }
}

/// A subgraph together with the id translation in both directions.
#[derive(Debug, Clone)]
pub struct Subgraph {
    pub graph: SocialGraph,
    pub old_to_new: Vec<Option<NodeId>>,
    pub new_to_old: Vec<NodeId>,
}

/// Translation between the ids found in an input file and compact node ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeMap {
    original: Vec<u64>,
    index: HashMap<u64, NodeId>,
}

impl NodeMap {
    pub fn from_originals(original: Vec<u64>) -> Self {
        let index = original.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        Self { original, index }
    }

    pub fn identity(node_count: usize) -> Self {
        Self::from_originals((0..node_count as u64).collect())
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn original(&self, node: NodeId) -> u64 {
        self.original[node]
    }

    pub fn lookup(&self, original: u64) -> Option<NodeId> {
        self.index.get(&original).copied()
    }

    /// Composes this map with a subgraph extraction: the result maps the
    /// original ids straight to the subgraph's ids.
    pub fn restrict(&self, sub: &Subgraph) -> NodeMap {
        NodeMap::from_originals(sub.new_to_old.iter().map(|&old| self.original[old]).collect())
    }

    /// CSV with header `original,new`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "original,new")?;
        for (new, old) in self.original.iter().enumerate() {
            writeln!(out, "{old},{new}")?;
        }
        Ok(())
    }
}

/// Reads an edge list of "i j" lines (i follows j). Lines starting with `#`
/// and blank lines are skipped. Input ids are remapped to `0..v` in
/// ascending order of the original id.
pub fn load_edge_list<R: BufRead>(source: R, directed: bool) -> Result<(SocialGraph, NodeMap)> {
    let mut raw = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected two node ids, found {} fields", fields.len()),
            });
        }
        let parse = |s: &str| {
            s.parse::<u64>().map_err(|e| Error::Parse { line: lineno, message: format!("bad node id {s:?}: {e}") })
        };
        let (i, j) = (parse(fields[0])?, parse(fields[1])?);
        if i == j {
            return Err(Error::SelfLoop { line: lineno, node: i });
        }
        raw.push((i, j));
        if !directed {
            raw.push((j, i));
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyGraph);
    }
    let ids: BTreeSet<u64> = raw.iter().flat_map(|&(i, j)| [i, j]).collect();
    let map = NodeMap::from_originals(ids.into_iter().collect());
    let edges = raw.into_iter().map(|(i, j)| (map.lookup(i).unwrap(), map.lookup(j).unwrap()));
    let graph = SocialGraph::from_edges(map.len(), edges.collect::<Vec<_>>())?;
    Ok((graph, map))
}

/// Compressed sparse row storage shared by the social and influence matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    row_offsets: Vec<usize>,
    cols: Vec<NodeId>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    pub fn dim(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: NodeId) -> (&[NodeId], &[f64]) {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.cols[range.clone()], &self.vals[range])
    }

    pub fn get(&self, i: NodeId, j: NodeId) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn cols(&self) -> &[NodeId] {
        &self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn row_sum(&self, i: NodeId) -> f64 {
        self.row(i).1.iter().sum()
    }

    /// `out = M x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, slot) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *slot = cols.iter().zip(vals).map(|(&j, &w)| w * x[j]).sum();
        }
    }
}

/// The social matrix `Ŵ`: positive weights exactly on the follow edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SocialMatrix(SparseMatrix);

impl SocialMatrix {
    /// Unweighted: `ŵ_ij = 1` on every edge.
    pub fn from_graph(g: &SocialGraph) -> Self {
        Self(SparseMatrix {
            row_offsets: g.out_offsets.clone(),
            cols: g.out_targets.clone(),
            vals: vec![1.0; g.edge_count()],
        })
    }

    /// Weighted entries `(i, j, ŵ_ij)`; weights must be finite and positive.
    pub fn from_triplets(dim: usize, entries: &[(NodeId, NodeId, f64)]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut sorted = entries.to_vec();
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut row_offsets = vec![0; dim + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals = Vec::with_capacity(sorted.len());
        for (k, &(i, j, w)) in sorted.iter().enumerate() {
            if i >= dim || j >= dim {
                return Err(Error::NodeOutOfRange { node: i.max(j), node_count: dim });
            }
            if i == j {
                return Err(Error::SelfLoop { line: 0, node: i as u64 });
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidParameter(format!("weight ({i},{j}) = {w} must be positive")));
            }
            if k > 0 && sorted[k - 1].0 == i && sorted[k - 1].1 == j {
                return Err(Error::InvalidParameter(format!("duplicate entry ({i},{j})")));
            }
            row_offsets[i + 1] += 1;
            cols.push(j);
            vals.push(w);
        }
        for k in 0..dim {
            row_offsets[k + 1] += row_offsets[k];
        }
        Ok(Self(SparseMatrix { row_offsets, cols, vals }))
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.0
    }
}

/// Row-stochastic influence matrix `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix(SparseMatrix);

impl InfluenceMatrix {
    pub fn matrix(&self) -> &SparseMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn weight(&self, i: NodeId, j: NodeId) -> f64 {
        self.0.get(i, j)
    }

    pub fn row(&self, i: NodeId) -> (&[NodeId], &[f64]) {
        self.0.row(i)
    }

    /// Convenience for the common unweighted case.
    pub fn from_graph(g: &SocialGraph) -> Result<Self> {
        row_normalize(&SocialMatrix::from_graph(g))
    }
}

/// `w_ij = ŵ_ij / Σ_k ŵ_ik`. A zero row names the offending node.
pub fn row_normalize(social: &SocialMatrix) -> Result<InfluenceMatrix> {
    let m = &social.0;
    let mut vals = m.vals.clone();
    for i in 0..m.dim() {
        let range = m.row_offsets[i]..m.row_offsets[i + 1];
        let total: f64 = m.vals[range.clone()].iter().sum();
        if range.is_empty() || total <= 0.0 {
            return Err(Error::NoFollowees { node: i });
        }
        for v in &mut vals[range] {
            *v /= total;
        }
    }
    Ok(InfluenceMatrix(SparseMatrix { row_offsets: m.row_offsets.clone(), cols: m.cols.clone(), vals }))
}

pub const DEFAULT_DAMPING: f64 = 0.85;
pub const DEFAULT_PAGERANK_TOL: f64 = 1e-10;
pub const DEFAULT_PAGERANK_MAX_ITER: usize = 10_000;

/// PageRank by power iteration on the influence-direction chain: the
/// surfer at `i` moves to one of `i`'s followees. Dangling mass is spread
/// uniformly. Stops when the L1 change drops below `tol`.
pub fn pagerank(g: &SocialGraph, damping: f64, tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    if !(damping > 0.0 && damping < 1.0) {
        return Err(Error::InvalidParameter(format!("damping {damping} must lie in (0,1)")));
    }
    let n = g.node_count();
    let uniform = 1.0 / n as f64;
    let mut rank = vec![uniform; n];
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let dangling: f64 = (0..n).filter(|&i| g.out_degree(i) == 0).map(|i| rank[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        for (j, slot) in next.iter_mut().enumerate() {
            let inflow: f64 = g.followers(j).iter().map(|&i| rank[i] / g.out_degree(i) as f64).sum();
            *slot = base + damping * inflow;
        }
        change = next.iter().zip(&rank).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if change < tol {
            return Ok(rank);
        }
    }
    Err(Error::NotConverged { method: "pagerank", iterations: max_iter, residual: change, last: rank })
}

/// Largest strongly connected component, ties broken by the smallest member id.
pub fn largest_strongly_connected_component(g: &SocialGraph) -> Subgraph {
    let mut pg: DiGraph<(), ()> = DiGraph::with_capacity(g.node_count(), g.edge_count());
    for _ in 0..g.node_count() {
        pg.add_node(());
    }
    for (i, j) in g.edges() {
        pg.add_edge(NodeIndex::new(i), NodeIndex::new(j), ());
    }
    let best = tarjan_scc(&pg)
        .into_iter()
        .map(|comp| {
            let mut ids: Vec<NodeId> = comp.into_iter().map(|ix| ix.index()).collect();
            ids.sort_unstable();
            ids
        })
        .max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0])))
        .expect("graph has at least one node");
    g.induced_subgraph(&best).expect("component ids are valid")
}

/// BFS layers from a root along reversed follow edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDecomposition {
    root: NodeId,
    layers: Vec<Vec<NodeId>>,
    distance: Vec<Option<usize>>,
}

impl LayerDecomposition {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn layers(&self) -> &[Vec<NodeId>] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &[NodeId] {
        self.layers.get(l).map_or(&[], Vec::as_slice)
    }

    /// `ε⁽ʳ⁾`, index of the last non-empty layer.
    pub fn eccentricity(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn distance(&self, node: NodeId) -> Option<usize> {
        self.distance[node]
    }

    pub fn reachable_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

/// Layers `O_0 = {r}`, `O_1 = N⁻(r)`, ... in order of first exposure.
pub fn follower_layers(g: &SocialGraph, root: NodeId) -> Result<LayerDecomposition> {
    g.check_node(root)?;
    let mut distance = vec![None; g.node_count()];
    distance[root] = Some(0);
    let mut layers = vec![vec![root]];
    let mut queue = VecDeque::from([root]);
    while let Some(i) = queue.pop_front() {
        let d = distance[i].unwrap();
        for &f in g.followers(i) {
            if distance[f].is_none() {
                distance[f] = Some(d + 1);
                if layers.len() == d + 1 {
                    layers.push(Vec::new());
                }
                layers[d + 1].push(f);
                queue.push_back(f);
            }
        }
    }
    Ok(LayerDecomposition { root, layers, distance })
}

/// Barabási–Albert preferential attachment, materialised as symmetric
/// directed edges. Starts from a complete graph on `k` nodes, then each of
/// the remaining `n - k` nodes attaches to `k` distinct existing nodes chosen
/// with probability proportional to degree.
pub fn generate_barabasi_albert<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<SocialGraph> {
    if k < 1 || n <= k {
        return Err(Error::InvalidParameter(format!("Barabasi-Albert needs n > k >= 1, got n={n}, k={k}")));
    }
    let mut edges = Vec::with_capacity(2 * (k * (k - 1) / 2 + (n - k) * k));
    // Each endpoint appears once per incident edge.
    let mut endpoints: Vec<NodeId> = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            edges.push((a, b));
            edges.push((b, a));
            endpoints.push(a);
            endpoints.push(b);
        }
    }
    let mut chosen = Vec::with_capacity(k);
    for new in k..n {
        chosen.clear();
        if endpoints.is_empty() {
            // k = 1: the seed is a single isolated node.
            chosen.push(0);
        }
        while chosen.len() < k {
            let target = endpoints[rng.random_range(0..endpoints.len())];
            if !chosen.contains(&target) {
                chosen.push(target);
            }
        }
        for &t in &chosen {
            edges.push((new, t));
            edges.push((t, new));
            endpoints.push(new);
            endpoints.push(t);
        }
    }
    SocialGraph::from_edges(n, edges)
}

/// `d_i` for the gossip parameters: the number of followees of `i`.
pub fn degree_for_gossip(g: &SocialGraph, i: NodeId) -> Result<usize> {
    g.check_node(i)?;
    match g.out_degree(i) {
        0 => Err(Error::NoFollowees { node: i }),
        d => Ok(d),
    }
}

const KARATE_EDGES: [(NodeId, NodeId); 78] = [
    (0, 1),
    (0, 2),
    (0, 3),
    (0, 4),
    (0, 5),
    (0, 6),
    (0, 7),
    (0, 8),
    (0, 10),
    (0, 11),
    (0, 12),
    (0, 13),
    (0, 17),
    (0, 19),
    (0, 21),
    (0, 31),
    (1, 2),
    (1, 3),
    (1, 7),
    (1, 13),
    (1, 17),
    (1, 19),
    (1, 21),
    (1, 30),
    (2, 3),
    (2, 7),
    (2, 8),
    (2, 9),
    (2, 13),
    (2, 27),
    (2, 28),
    (2, 32),
    (3, 7),
    (3, 12),
    (3, 13),
    (4, 6),
    (4, 10),
    (5, 6),
    (5, 10),
    (5, 16),
    (6, 16),
    (8, 30),
    (8, 32),
    (8, 33),
    (9, 33),
    (13, 33),
    (14, 32),
    (14, 33),
    (15, 32),
    (15, 33),
    (18, 32),
    (18, 33),
    (19, 33),
    (20, 32),
    (20, 33),
    (22, 32),
    (22, 33),
    (23, 25),
    (23, 27),
    (23, 29),
    (23, 32),
    (23, 33),
    (24, 25),
    (24, 27),
    (24, 31),
    (25, 31),
    (26, 29),
    (26, 33),
    (27, 33),
    (28, 31),
    (28, 33),
    (29, 32),
    (29, 33),
    (30, 32),
    (30, 33),
    (31, 32),
    (31, 33),
    (32, 33),
];

/// Zachary's karate club (34 nodes, 78 undirected ties) as a symmetric graph.
pub fn karate_club() -> SocialGraph {
    SocialGraph::from_edges(34, KARATE_EDGES.iter().flat_map(|&(a, b)| [(a, b), (b, a)]))
        .expect("static edge list is valid")
}

/// Undirected path `0 - 1 - ... - (n-1)` as a symmetric graph.
pub fn path_graph(n: usize) -> Result<SocialGraph> {
    SocialGraph::from_edges(n, (1..n).flat_map(|i| [(i - 1, i), (i, i - 1)]))
}

/// Directed cycle where node `i` follows `i + 1 (mod n)`.
pub fn directed_cycle(n: usize) -> Result<SocialGraph> {
    if n < 2 {
        return Err(Error::InvalidParameter("a cycle needs at least two nodes".into()));
    }
    SocialGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n)))
}
