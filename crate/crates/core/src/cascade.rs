//! Independent-cascade sampling over follower layers, reshare traces, and
//! per-node reshare-probability estimation.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{follower_layers, LayerDecomposition, NodeId, NodeMap, SocialGraph};

/// Probability that an exposed node reshares a post.
#[derive(Debug, Clone, PartialEq)]
pub enum ReshareModel {
    Global(f64),
    /// `theta[i]` already has `fallback` substituted for nodes without an estimate.
    PerNode {
        theta: Vec<f64>,
        fallback: f64,
    },
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} = {p} is not a probability")))
    }
}

impl ReshareModel {
    pub fn global(theta: f64) -> Result<Self> {
        check_probability("theta", theta)?;
        Ok(Self::Global(theta))
    }

    pub fn per_node(theta: Vec<f64>, fallback: f64) -> Result<Self> {
        check_probability("fallback theta", fallback)?;
        for (i, &p) in theta.iter().enumerate() {
            check_probability(&format!("theta of node {i}"), p)?;
        }
        Ok(Self::PerNode { theta, fallback })
    }

    pub fn probability(&self, i: NodeId) -> f64 {
        match self {
            Self::Global(p) => *p,
            Self::PerNode { theta, .. } => theta[i],
        }
    }

    pub fn check_nodes(&self, node_count: usize) -> Result<()> {
        match self {
            Self::Global(_) => Ok(()),
            Self::PerNode { theta, .. } if theta.len() == node_count => Ok(()),
            Self::PerNode { theta, .. } => Err(Error::ShapeMismatch { expected: node_count, got: theta.len() }),
        }
    }
}

/// One sampled diffusion tree `T^(r,θ)`.
///
/// Layer `l` holds the nodes first exposed at distance `l`; `reshared` and
/// `predecessors` are aligned with `layers` entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRealization {
    layers: Vec<Vec<NodeId>>,
    reshared: Vec<Vec<bool>>,
    predecessors: Vec<Vec<Vec<NodeId>>>,
}

impl CascadeRealization {
    pub fn root(&self) -> NodeId {
        self.layers[0][0]
    }

    pub fn layers(&self) -> &[Vec<NodeId>] {
        &self.layers
    }

    /// Index of the deepest non-empty layer.
    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Number of nodes in the cascade, root included.
    pub fn size(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Layer and position of `node`, if it was reached.
    pub fn position(&self, node: NodeId) -> Option<(usize, usize)> {
        self.layers.iter().enumerate().find_map(|(l, layer)| layer.iter().position(|&n| n == node).map(|k| (l, k)))
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.position(node).is_some()
    }

    /// `S_i`; the root counts as having shared its own post.
    pub fn reshared(&self, node: NodeId) -> Option<bool> {
        self.position(node).map(|(l, k)| self.reshared[l][k])
    }

    pub fn layer_reshared(&self, l: usize) -> &[bool] {
        &self.reshared[l]
    }

    /// Predecessor sets of layer `l`, aligned with `layers()[l]`.
    pub fn layer_predecessors(&self, l: usize) -> &[Vec<NodeId>] {
        &self.predecessors[l]
    }

    /// Every (layer, node, reshared) triple in layer order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, NodeId, bool)> + '_ {
        self.layers
            .iter()
            .zip(&self.reshared)
            .enumerate()
            .flat_map(|(l, (nodes, flags))| nodes.iter().zip(flags).map(move |(&n, &s)| (l, n, s)))
    }
}

/// Samples a cascade rooted at `root`. Computes the follower layers on the
/// fly; use [`sample_cascade_in`] to reuse them across samples.
pub fn sample_cascade<R: Rng + ?Sized>(
    g: &SocialGraph,
    root: NodeId,
    model: &ReshareModel,
    rng: &mut R,
) -> Result<CascadeRealization> {
    model.check_nodes(g.node_count())?;
    let layers = follower_layers(g, root)?;
    Ok(sample_cascade_in(g, &layers, model, rng))
}

/// Samples a cascade over a precomputed layer decomposition.
///
/// Layer 1 is always the full follower set of the root. A node in layer
/// `l < ε` draws `S_i ~ Bernoulli(θ_i)` once; nodes in the last layer have no
/// one left to expose and never reshare. Layer `l + 1` holds the followers of
/// resharers that sit at distance `l + 1` from the root, so every sampled
/// layer is a subset of the corresponding BFS layer and no node is exposed
/// twice.
pub fn sample_cascade_in<R: Rng + ?Sized>(
    g: &SocialGraph,
    layers: &LayerDecomposition,
    model: &ReshareModel,
    rng: &mut R,
) -> CascadeRealization {
    let root = layers.root();
    let ecc = layers.eccentricity();
    let mut out = CascadeRealization {
        layers: vec![vec![root]],
        reshared: vec![vec![true]],
        predecessors: vec![vec![Vec::new()]],
    };
    if ecc == 0 {
        return out;
    }
    let first = layers.layer(1).to_vec();
    out.predecessors.push(vec![vec![root]; first.len()]);
    out.layers.push(first);

    let mut l = 1;
    loop {
        let flags: Vec<bool> = if l < ecc {
            out.layers[l].iter().map(|&i| rng.random_bool(model.probability(i))).collect()
        } else {
            vec![false; out.layers[l].len()]
        };
        out.reshared.push(flags);
        if l == ecc {
            break;
        }

        let mut next: Vec<NodeId> = Vec::new();
        let mut preds: Vec<Vec<NodeId>> = Vec::new();
        let mut slot: HashMap<NodeId, usize> = HashMap::new();
        for (&i, &s) in out.layers[l].iter().zip(&out.reshared[l]) {
            if !s {
                continue;
            }
            for &f in g.followers(i) {
                if layers.distance(f) != Some(l + 1) {
                    continue;
                }
                let k = *slot.entry(f).or_insert_with(|| {
                    next.push(f);
                    preds.push(Vec::new());
                    next.len() - 1
                });
                preds[k].push(i);
            }
        }
        if next.is_empty() {
            break;
        }
        out.layers.push(next);
        out.predecessors.push(preds);
        l += 1;
    }
    out
}

/// `φ(i)`: the resharing followees of `i` in the previous layer. For layer 1
/// this is the root.
pub fn predecessors(c: &CascadeRealization, i: NodeId) -> Result<&[NodeId]> {
    match c.position(i) {
        Some((l, k)) if l >= 1 => Ok(&c.predecessors[l][k]),
        _ => Err(Error::NotInCascade { node: i }),
    }
}

/// Largest number of free reshare decisions the brute-force oracle enumerates.
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Exact `E[|C^(r)|]` under a global θ, by enumerating every assignment of
/// reshare outcomes to the nodes whose decision can matter (BFS layers
/// `1..ε`). Exponential; meant as a test oracle.
pub fn expected_cascade_size_bruteforce(g: &SocialGraph, root: NodeId, theta: f64) -> Result<f64> {
    g.check_node(root)?;
    check_probability("theta", theta)?;
    let n = g.node_count();
    // Distances by repeated relaxation rather than a queue.
    let mut dist = vec![usize::MAX; n];
    dist[root] = 0;
    let mut changed = true;
    while changed {
        changed = false;
        for (i, j) in g.edges() {
            // i follows j: i sits one step further from the root than j
            if dist[j] != usize::MAX && dist[j] + 1 < dist[i] {
                dist[i] = dist[j] + 1;
                changed = true;
            }
        }
    }
    let ecc = dist.iter().filter(|&&d| d != usize::MAX).max().copied().unwrap_or(0);
    let deciders: Vec<NodeId> = (0..n).filter(|&i| dist[i] >= 1 && dist[i] < ecc).collect();
    if deciders.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(format!(
            "{} reshare decisions exceed the enumeration limit of {BRUTE_FORCE_LIMIT}",
            deciders.len()
        )));
    }
    let mut order: Vec<NodeId> = (0..n).filter(|&i| dist[i] != usize::MAX).collect();
    order.sort_by_key(|&i| dist[i]);

    let m = deciders.len();
    let mut total = 0.0;
    let mut shares = vec![false; n];
    let mut reached = vec![false; n];
    for mask in 0u64..(1u64 << m) {
        shares.iter_mut().for_each(|s| *s = false);
        for (bit, &i) in deciders.iter().enumerate() {
            shares[i] = mask >> bit & 1 == 1;
        }
        reached.iter_mut().for_each(|s| *s = false);
        reached[root] = true;
        let mut size = 0usize;
        for &i in &order {
            let hit = match dist[i] {
                0 => true,
                1 => true,
                d => g.followees(i).iter().any(|&j| dist[j] == d - 1 && reached[j] && shares[j]),
            };
            reached[i] = hit;
            size += hit as usize;
        }
        let ones = mask.count_ones() as i32;
        let p = theta.powi(ones) * (1.0 - theta).powi(m as i32 - ones);
        total += p * size as f64;
    }
    Ok(total)
}

/// One reshare event: `node` shared `post` at `timestamp` (milliseconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub post: usize,
    pub node: NodeId,
}

/// Time-ordered reshare events. Post ids are interned; `post` indexes
/// [`ReshareTrace::post_name`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReshareTrace {
    events: Vec<TraceEvent>,
    posts: Vec<String>,
}

/// What to do with events naming nodes outside the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownNodes {
    Error,
    /// Drop every post that touches an unknown node.
    DropPost,
}

impl ReshareTrace {
    /// Stable-sorts by timestamp and keeps only the earliest event of each
    /// (post, node) pair.
    pub fn new<S: Into<String>>(raw: Vec<(f64, S, NodeId)>) -> Result<Self> {
        let mut raw: Vec<(f64, String, NodeId)> = raw.into_iter().map(|(t, p, n)| (t, p.into(), n)).collect();
        if let Some((t, _, _)) = raw.iter().find(|(t, _, _)| !t.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite timestamp {t}")));
        }
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut post_index: HashMap<String, usize> = HashMap::new();
        let mut posts = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut events = Vec::with_capacity(raw.len());
        for (timestamp, name, node) in raw {
            let post = *post_index.entry(name.clone()).or_insert_with(|| {
                posts.push(name);
                posts.len() - 1
            });
            if seen.insert((post, node)) {
                events.push(TraceEvent { timestamp, post, node });
            }
        }
        Ok(Self { events, posts })
    }

    /// Reads CSV with header `timestamp,post_id,node_id`. Node ids are
    /// translated through `map`; timestamps are integer/decimal milliseconds
    /// or ISO-8601 date-times.
    pub fn from_csv<R: Read>(reader: R, map: &NodeMap, unknown: UnknownNodes) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["timestamp", "post_id", "node_id"];
        if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(Error::Parse {
                line: 1,
                message: format!(
                    "expected header timestamp,post_id,node_id, found {:?}",
                    headers.iter().collect::<Vec<_>>()
                ),
            });
        }
        let mut raw = Vec::new();
        let mut bad_posts = std::collections::HashSet::new();
        for (index, record) in rdr.records().enumerate() {
            let record = record?;
            let line = index + 2;
            let timestamp = parse_timestamp(&record[0])
                .ok_or_else(|| Error::Parse { line, message: format!("unrecognised timestamp {:?}", &record[0]) })?;
            let post = record[1].to_string();
            let id = &record[2];
            let node = id.parse::<u64>().ok().and_then(|orig| map.lookup(orig));
            match (node, unknown) {
                (Some(node), _) => raw.push((timestamp, post, node)),
                (None, UnknownNodes::Error) => return Err(Error::UnknownTraceNode { index, id: id.to_string() }),
                (None, UnknownNodes::DropPost) => {
                    bad_posts.insert(post);
                }
            }
        }
        if !bad_posts.is_empty() {
            log::info!("dropping {} posts that touch nodes outside the graph", bad_posts.len());
            raw.retain(|(_, p, _)| !bad_posts.contains(p));
        }
        Self::new(raw)
    }

    pub fn write_csv<W: Write>(&self, out: W, map: &NodeMap) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "post_id", "node_id"])?;
        for e in &self.events {
            w.write_record([format_number(e.timestamp), self.posts[e.post].clone(), map.original(e.node).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn post_count(&self) -> usize {
        self.posts.len()
    }

    pub fn post_name(&self, post: usize) -> &str {
        &self.posts[post]
    }

    /// Fails on the first event whose node is outside `g`.
    pub fn check_graph(&self, g: &SocialGraph) -> Result<()> {
        match self.events.iter().position(|e| e.node >= g.node_count()) {
            None => Ok(()),
            Some(index) => Err(Error::UnknownTraceNode { index, id: self.events[index].node.to_string() }),
        }
    }

    /// Source of each post (its earliest event), in order of first event.
    pub fn post_sources(&self) -> Vec<NodeId> {
        // Posts are interned in order of first event, so the first event seen
        // for each index is its source.
        let mut sources = vec![None; self.posts.len()];
        for e in &self.events {
            sources[e.post].get_or_insert(e.node);
        }
        sources.into_iter().map(|s| s.expect("every post has an event")).collect()
    }

    /// Events grouped per post, each group in time order.
    pub fn events_by_post(&self) -> Vec<Vec<TraceEvent>> {
        let mut groups = vec![Vec::new(); self.posts.len()];
        for e in &self.events {
            groups[e.post].push(*e);
        }
        groups
    }
}

fn format_number(t: f64) -> String {
    if t.fract() == 0.0 && t.abs() < 9.0e15 {
        format!("{}", t as i64)
    } else {
        format!("{t}")
    }
}

/// Milliseconds from an integer, decimal, or ISO-8601 timestamp.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v as f64);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp_millis() as f64);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp_millis() as f64);
        }
    }
    None
}

/// Turns sampled cascades into a trace: post `n` is emitted by its root,
/// then by each resharer in layer order, one timestamp tick per layer.
pub fn trace_from_realizations(cascades: &[CascadeRealization]) -> ReshareTrace {
    let mut raw = Vec::new();
    for (n, c) in cascades.iter().enumerate() {
        let base = n as f64 * 1.0e6;
        for (l, node, shared) in c.iter() {
            if shared {
                raw.push((base + l as f64, format!("p{n}"), node));
            }
        }
    }
    ReshareTrace::new(raw).expect("timestamps are finite")
}

/// Simulates a classic independent cascade for each source in turn and
/// records the reshare events. Every node gets one Bernoulli draw on its
/// first exposure, from whichever followee reaches it first; unlike
/// [`sample_cascade`] there is no restriction to BFS layers. Post `n` starts
/// at `n · 10⁶` ms and each hop adds 1 ms.
pub fn generate_ic_trace<R: Rng + ?Sized>(
    g: &SocialGraph,
    model: &ReshareModel,
    sources: &[NodeId],
    rng: &mut R,
) -> Result<ReshareTrace> {
    model.check_nodes(g.node_count())?;
    let mut raw = Vec::new();
    let mut exposed = vec![false; g.node_count()];
    for (n, &src) in sources.iter().enumerate() {
        g.check_node(src)?;
        exposed.iter_mut().for_each(|e| *e = false);
        exposed[src] = true;
        let base = n as f64 * 1.0e6;
        let mut frontier = vec![src];
        let mut hop = 0.0;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &j in &frontier {
                raw.push((base + hop, format!("p{n}"), j));
                for &f in g.followers(j) {
                    if !exposed[f] {
                        exposed[f] = true;
                        if rng.random_bool(model.probability(f)) {
                            next.push(f);
                        }
                    }
                }
            }
            frontier = next;
            hop += 1.0;
        }
    }
    ReshareTrace::new(raw)
}

/// Exposure counts behind one node's estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaRow {
    pub node: NodeId,
    pub seen: usize,
    pub reshared: usize,
    pub theta: Option<f64>,
}

/// Five-number summary plus mean of the available estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub available: usize,
    pub unavailable: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub rows: Vec<ThetaRow>,
    pub fallback: f64,
}

impl ThetaEstimate {
    pub fn model(&self) -> ReshareModel {
        ReshareModel::PerNode {
            theta: self.rows.iter().map(|r| r.theta.unwrap_or(self.fallback)).collect(),
            fallback: self.fallback,
        }
    }

    pub fn available(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.theta).collect()
    }

    /// `None` when no node has an estimate.
    pub fn summary(&self) -> Option<ThetaSummary> {
        let mut vals = self.available();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(f64::total_cmp);
        Some(ThetaSummary {
            min: vals[0],
            q1: quantile_sorted(&vals, 0.25),
            median: quantile_sorted(&vals, 0.5),
            q3: quantile_sorted(&vals, 0.75),
            max: vals[vals.len() - 1],
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            available: vals.len(),
            unavailable: self.rows.len() - vals.len(),
        })
    }

    /// `node,seen,reshared,theta,available`; unavailable rows carry the fallback.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "node,seen,reshared,theta,available")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.node,
                r.seen,
                r.reshared,
                r.theta.unwrap_or(self.fallback),
                r.theta.is_some()
            )?;
        }
        Ok(())
    }

    /// Summary table with the columns Min, 1st Qu., Median, 3rd Qu., Max, Mean, N.A.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "min,q1,median,q3,max,mean,na")?;
        match self.summary() {
            Some(s) => writeln!(
                out,
                "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
                s.min, s.q1, s.median, s.q3, s.max, s.mean, s.unavailable
            )?,
            None => writeln!(out, "NA,NA,NA,NA,NA,NA,{}", self.rows.len())?,
        }
        Ok(())
    }
}

/// Linear-interpolation quantile of sorted data (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-node reshare probability from a trace: the fraction of posts seen
/// from followees that the node went on to reshare.
///
/// A node has *seen* post `p` when some followee emitted `p` strictly before
/// the node's own event for `p` (or the node never emitted `p`); it
/// *reshared* `p` when its own event came after such a followee event. The
/// source of a post is excluded from that post's counts.
pub fn estimate_theta(trace: &ReshareTrace, g: &SocialGraph, fallback: f64) -> Result<ThetaEstimate> {
    check_probability("fallback theta", fallback)?;
    trace.check_graph(g)?;
    let n = g.node_count();
    let mut seen = vec![0usize; n];
    let mut reshared = vec![0usize; n];
    let mut exposure: HashMap<NodeId, f64> = HashMap::new();
    let mut own: HashMap<NodeId, f64> = HashMap::new();
    for events in trace.events_by_post() {
        let Some(source) = events.first().map(|e| e.node) else { continue };
        exposure.clear();
        own.clear();
        for e in &events {
            own.entry(e.node).or_insert(e.timestamp);
            for &f in g.followers(e.node) {
                exposure.entry(f).and_modify(|t| *t = t.min(e.timestamp)).or_insert(e.timestamp);
            }
        }
        for (&f, &first_exposure) in &exposure {
            if f == source {
                continue;
            }
            match own.get(&f) {
                None => seen[f] += 1,
                Some(&t) if first_exposure < t => {
                    seen[f] += 1;
                    reshared[f] += 1;
                }
                Some(_) => {}
            }
        }
    }
    let rows = (0..n)
        .map(|node| ThetaRow {
            node,
            seen: seen[node],
            reshared: reshared[node],
            theta: (seen[node] > 0).then(|| reshared[node] as f64 / seen[node] as f64),
        })
        .collect();
    Ok(ThetaEstimate { rows, fallback })
}
