//! Opinion updates driven by cascades: the per-exposure update rule, the
//! sequential synthetic-cascade engine, and replay of recorded reshare traces.

use std::collections::HashMap;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::cascade::{sample_cascade_in, ReshareModel, ReshareTrace};
use crate::error::{Error, Result};
use crate::fj::{check_len, GossipParameters, Susceptibility};
use crate::graph::{follower_layers, InfluenceMatrix, LayerDecomposition, NodeId, SocialGraph};

/// How the prejudice term enters the multi-predecessor average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// `(1 - h_i) u_i` inside the average, once per predecessor: the result is
    /// a convex combination of `x_i`, the `x_j` and `u_i`.
    #[default]
    Convex,
    /// A single `(1 - h_i) u_i` term divided by `|φ|` along with the sum.
    /// Weights add up to less than one when `|φ| > 1`.
    Literal,
}

impl FromStr for UpdateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "convex" => Ok(Self::Convex),
            "literal" => Ok(Self::Literal),
            other => Err(Error::InvalidParameter(format!("unknown update mode {other:?} (convex|literal)"))),
        }
    }
}

impl std::fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Convex => "convex",
            Self::Literal => "literal",
        })
    }
}

/// New opinion of a node exposed to `terms = [(γ_ij, x_j), …]` at once.
/// Returns `None` for an empty exposure.
pub fn fjc_update_terms(x_i: f64, u_i: f64, h_i: f64, terms: &[(f64, f64)], mode: UpdateMode) -> Option<f64> {
    if terms.is_empty() {
        return None;
    }
    let k = terms.len() as f64;
    let social: f64 = terms.iter().map(|&(gamma, x_j)| h_i * ((1.0 - gamma) * x_i + gamma * x_j)).sum();
    let anchor = (1.0 - h_i) * u_i;
    Some(match mode {
        UpdateMode::Convex => (social + k * anchor) / k,
        UpdateMode::Literal => (social + anchor) / k,
    })
}

/// Applies the update rule to node `i` with predecessor set `phi`.
pub fn fjc_update(
    i: NodeId,
    x: &[f64],
    u: &[f64],
    phi: &[NodeId],
    params: &GossipParameters,
    mode: UpdateMode,
) -> Result<f64> {
    let terms: Vec<(f64, f64)> = phi.iter().map(|&j| (params.gamma(i, j), x[j])).collect();
    fjc_update_terms(x[i], u[i], params.h(i), &terms, mode).ok_or(Error::EmptyPredecessors { node: i })
}

/// Ordered post sources `r_1 … r_N`; repeats allowed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SeedSchedule(Vec<NodeId>);

impl SeedSchedule {
    pub fn new(g: &SocialGraph, roots: Vec<NodeId>) -> Result<Self> {
        for &r in &roots {
            g.check_node(r)?;
        }
        Ok(Self(roots))
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One opinion write, for the audit log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpinionUpdate {
    pub cascade: usize,
    pub layer: usize,
    pub node: NodeId,
    pub old: f64,
    pub new: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeRecord {
    pub index: usize,
    pub root: NodeId,
    pub size: usize,
    pub depth: usize,
    /// Filled only when update recording is switched on.
    pub updates: Vec<OpinionUpdate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FjcRunRecord {
    pub initial: Vec<f64>,
    pub final_opinions: Vec<f64>,
    pub cascades: Vec<CascadeRecord>,
}

impl FjcRunRecord {
    /// `x_final - u` per node.
    pub fn shifts(&self) -> Vec<f64> {
        self.final_opinions.iter().zip(&self.initial).map(|(x, u)| x - u).collect()
    }

    /// `node,u,x_final,shift`.
    pub fn write_nodes_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "node,u,x_final,shift")?;
        for (i, (u, x)) in self.initial.iter().zip(&self.final_opinions).enumerate() {
            writeln!(out, "{i},{u},{x},{}", x - u)?;
        }
        Ok(())
    }

    /// `index,root,size,depth`.
    pub fn write_cascades_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "index,root,size,depth")?;
        for c in &self.cascades {
            writeln!(out, "{},{},{},{}", c.index, c.root, c.size, c.depth)?;
        }
        Ok(())
    }

    /// One JSON object per recorded opinion update.
    pub fn write_event_log<W: Write>(&self, mut out: W) -> Result<()> {
        for u in self.cascades.iter().flat_map(|c| &c.updates) {
            let line = serde_json::json!({
                "cascade": u.cascade,
                "layer": u.layer,
                "node": u.node,
                "old": u.old,
                "new": u.new,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Layer decompositions for the distinct roots of a schedule.
#[derive(Debug, Clone)]
pub struct PreparedSchedule {
    schedule: SeedSchedule,
    layers: HashMap<NodeId, LayerDecomposition>,
}

impl PreparedSchedule {
    pub fn schedule(&self) -> &SeedSchedule {
        &self.schedule
    }
}

/// Shared, immutable state for FJC runs on one graph.
#[derive(Debug, Clone)]
pub struct FjcEngine<'g> {
    graph: &'g SocialGraph,
    params: GossipParameters,
    mode: UpdateMode,
    record_updates: bool,
}

impl<'g> FjcEngine<'g> {
    pub fn new(graph: &'g SocialGraph, w: &InfluenceMatrix, lambda: &Susceptibility, mode: UpdateMode) -> Result<Self> {
        check_len(graph.node_count(), w.dim())?;
        check_len(graph.node_count(), lambda.len())?;
        let params = GossipParameters::from_graph(graph, w, lambda)?;
        Ok(Self { graph, params, mode, record_updates: false })
    }

    /// Keep every opinion write in the run record.
    pub fn with_update_log(mut self, on: bool) -> Self {
        self.record_updates = on;
        self
    }

    pub fn params(&self) -> &GossipParameters {
        &self.params
    }

    pub fn mode(&self) -> UpdateMode {
        self.mode
    }

    pub fn prepare(&self, schedule: &SeedSchedule) -> Result<PreparedSchedule> {
        let mut layers = HashMap::new();
        for &r in schedule.roots() {
            if let std::collections::hash_map::Entry::Vacant(e) = layers.entry(r) {
                e.insert(follower_layers(self.graph, r)?);
            }
        }
        Ok(PreparedSchedule { schedule: schedule.clone(), layers })
    }

    /// Runs the posts of `prepared` one after another. Within a cascade,
    /// layer `l` reads the opinions left by layer `l - 1`; nodes outside the
    /// cascade and the root itself keep their opinions.
    pub fn run<R: Rng + ?Sized>(
        &self,
        u: &[f64],
        prepared: &PreparedSchedule,
        model: &ReshareModel,
        rng: &mut R,
    ) -> Result<FjcRunRecord> {
        check_len(self.graph.node_count(), u.len())?;
        model.check_nodes(self.graph.node_count())?;
        let mut x = u.to_vec();
        let mut cascades = Vec::with_capacity(prepared.schedule.len());
        let mut staged: Vec<f64> = Vec::new();
        for (index, &root) in prepared.schedule.roots().iter().enumerate() {
            let layers = &prepared.layers[&root];
            let c = sample_cascade_in(self.graph, layers, model, rng);
            if c.depth() == 0 {
                log::debug!("post {index}: root {root} has no followers, nothing to update");
            }
            let mut updates = Vec::new();
            for l in 1..=c.depth() {
                staged.clear();
                for (&i, phi) in c.layers()[l].iter().zip(c.layer_predecessors(l)) {
                    staged.push(fjc_update(i, &x, u, phi, &self.params, self.mode)?);
                }
                for (&i, &new) in c.layers()[l].iter().zip(&staged) {
                    if self.record_updates {
                        updates.push(OpinionUpdate { cascade: index, layer: l, node: i, old: x[i], new });
                    }
                    x[i] = new;
                }
            }
            cascades.push(CascadeRecord { index, root, size: c.size(), depth: c.depth(), updates });
        }
        Ok(FjcRunRecord { initial: u.to_vec(), final_opinions: x, cascades })
    }

    /// Replays a trace: each event `(t, p, i)` exposes every follower of `i`
    /// to `i`'s current opinion, one event at a time. No tree structure and
    /// no one-post-at-a-time ordering is imposed; a node may be updated many
    /// times per post.
    pub fn replay(&self, u: &[f64], trace: &ReshareTrace) -> Result<FjcRunRecord> {
        check_len(self.graph.node_count(), u.len())?;
        trace.check_graph(self.graph)?;
        let mut x = u.to_vec();
        let mut cascades: Vec<CascadeRecord> = trace
            .post_sources()
            .into_iter()
            .enumerate()
            .map(|(index, root)| CascadeRecord { index, root, size: 0, depth: 0, updates: Vec::new() })
            .collect();
        for e in trace.events() {
            let rec = &mut cascades[e.post];
            rec.size += 1;
            for &f in self.graph.followers(e.node) {
                let new = fjc_update(f, &x, u, &[e.node], &self.params, self.mode)?;
                if self.record_updates {
                    rec.updates.push(OpinionUpdate { cascade: e.post, layer: 0, node: f, old: x[f], new });
                }
                x[f] = new;
            }
        }
        Ok(FjcRunRecord { initial: u.to_vec(), final_opinions: x, cascades })
    }
}

/// One FJC run in convex mode.
#[allow(clippy::too_many_arguments)]
pub fn run_fjc<R: Rng + ?Sized>(
    g: &SocialGraph,
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
    u: &[f64],
    schedule: &SeedSchedule,
    model: &ReshareModel,
    rng: &mut R,
) -> Result<FjcRunRecord> {
    let engine = FjcEngine::new(g, w, lambda, UpdateMode::Convex)?;
    let prepared = engine.prepare(schedule)?;
    engine.run(u, &prepared, model, rng)
}

/// Trace replay in convex mode (every exposure is a single predecessor, so
/// both modes agree here).
pub fn replay_trace(
    g: &SocialGraph,
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
    u: &[f64],
    trace: &ReshareTrace,
) -> Result<FjcRunRecord> {
    FjcEngine::new(g, w, lambda, UpdateMode::Convex)?.replay(u, trace)
}
