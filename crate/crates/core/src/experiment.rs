//! Experiment configuration and Monte Carlo orchestration.
//!
//! A run builds the graph, susceptibilities, initial opinions and post
//! schedule once, computes the FJ baseline in closed form, then executes
//! independent FJC runs with one rng stream per run and aggregates opinion
//! shifts and polarization.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cascade::{estimate_theta, ReshareModel, ReshareTrace, ThetaEstimate, UnknownNodes};
use crate::error::{Error, Result};
use crate::fj::{fj_fixed_point, influence_map, Susceptibility, DEFAULT_INFLUENCE_MAP_CAP};
use crate::fjc::{FjcEngine, PreparedSchedule, SeedSchedule, UpdateMode};
use crate::graph::{
    generate_barabasi_albert, karate_club, largest_strongly_connected_component, load_edge_list, pagerank, path_graph,
    InfluenceMatrix, NodeId, NodeMap, SocialGraph, Subgraph, DEFAULT_DAMPING, DEFAULT_PAGERANK_MAX_ITER,
    DEFAULT_PAGERANK_TOL,
};
use crate::polarization::{
    polarizing_b1, polarizing_b2, polarizing_heuristic, read_opinions_csv, PolarizationMetric, DEFAULT_HEURISTIC_ALPHA,
};

const STREAM_GRAPH: u64 = 1;
const STREAM_SEEDS: u64 = 2;
const STREAM_RUN_BASE: u64 = 1_000;

/// Independent rng stream `stream` under `master_seed`.
pub fn rng_stream(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Rng used to draw the post schedule.
pub fn schedule_rng(master_seed: u64) -> ChaCha8Rng {
    rng_stream(master_seed, STREAM_SEEDS)
}

/// Rng for Monte Carlo run `run`.
pub fn run_rng(master_seed: u64, run: usize) -> ChaCha8Rng {
    rng_stream(master_seed, STREAM_RUN_BASE + run as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphSource {
    EdgeList(PathBuf),
    Karate,
    BarabasiAlbert { n: usize, k: usize },
    Path(usize),
}

impl FromStr for GraphSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num =
            |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("bad number {v:?} in graph spec {s:?}")));
        match parts.as_slice() {
            ["karate"] => Ok(Self::Karate),
            ["ba", n, k] => Ok(Self::BarabasiAlbert { n: num(n)?, k: num(k)? }),
            ["path", n] => Ok(Self::Path(num(n)?)),
            ["file", ..] => Ok(Self::EdgeList(PathBuf::from(&s["file:".len()..]))),
            _ => Ok(Self::EdgeList(PathBuf::from(s))),
        }
    }
}

impl fmt::Display for GraphSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EdgeList(p) => write!(f, "file:{}", p.display()),
            Self::Karate => f.write_str("karate"),
            Self::BarabasiAlbert { n, k } => write!(f, "ba:{n}:{k}"),
            Self::Path(n) => write!(f, "path:{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SusceptibilityStrategy {
    /// Rescaled PageRank.
    Proportional,
    /// Rescaled inverse PageRank.
    Inverse,
    Uniform(f64),
}

pub const DEFAULT_UNIFORM_SUSCEPTIBILITY: f64 = 0.6;
/// Rescaled susceptibilities span `[RESCALE_MARGIN, 1 - RESCALE_MARGIN]`.
pub const RESCALE_MARGIN: f64 = 0.01;

impl FromStr for SusceptibilityStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.split_once(':') {
            None if lower == "proportional" => Ok(Self::Proportional),
            None if lower == "inverse" => Ok(Self::Inverse),
            None if lower == "uniform" => Ok(Self::Uniform(DEFAULT_UNIFORM_SUSCEPTIBILITY)),
            Some(("uniform", c)) => {
                c.parse().map(Self::Uniform).map_err(|_| Error::Config(format!("bad uniform susceptibility {c:?}")))
            }
            _ => {
                Err(Error::Config(format!("unknown susceptibility strategy {s:?} (proportional|inverse|uniform[:c])")))
            }
        }
    }
}

impl fmt::Display for SusceptibilityStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Proportional => f.write_str("proportional"),
            Self::Inverse => f.write_str("inverse"),
            Self::Uniform(c) => write!(f, "uniform:{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialOpinions {
    B1,
    B2Unit,
    /// L2 ball of the given radius; `None` picks the largest radius that stays in `[-1,1]`.
    B2Radius(Option<f64>),
    Heuristic,
    File(PathBuf),
}

impl FromStr for InitialOpinions {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "b1" => Ok(Self::B1),
            "b2" | "b2:1" => Ok(Self::B2Unit),
            "b2t" => Ok(Self::B2Radius(None)),
            "heuristic" | "heu" => Ok(Self::Heuristic),
            _ if lower.starts_with("b2t:") => lower[4..]
                .parse()
                .map(|t| Self::B2Radius(Some(t)))
                .map_err(|_| Error::Config(format!("bad radius in {s:?}"))),
            _ if lower.starts_with("file:") => Ok(Self::File(PathBuf::from(&s[5..]))),
            _ => Err(Error::Config(format!("unknown initial opinions {s:?} (b1|b2|b2t[:t]|heuristic|file:PATH)"))),
        }
    }
}

impl fmt::Display for InitialOpinions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::B1 => f.write_str("b1"),
            Self::B2Unit => f.write_str("b2"),
            Self::B2Radius(None) => f.write_str("b2t"),
            Self::B2Radius(Some(t)) => write!(f, "b2t:{t}"),
            Self::Heuristic => f.write_str("heuristic"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaSpec {
    Global(f64),
    /// Per-node estimates from the configured trace.
    FromTrace,
}

impl FromStr for ThetaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("trace") {
            return Ok(Self::FromTrace);
        }
        let p: f64 = s.parse().map_err(|_| Error::Config(format!("bad theta {s:?} (a probability or \"trace\")")))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("theta {p} is not a probability")));
        }
        Ok(Self::Global(p))
    }
}

impl fmt::Display for ThetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Global(p) => write!(f, "{p}"),
            Self::FromTrace => f.write_str("trace"),
        }
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub graph: GraphSource,
    /// Edge-list files only: treat lines as directed follow edges.
    pub directed: bool,
    /// Restrict to the largest strongly connected component.
    pub lscc: bool,
    pub lambda: SusceptibilityStrategy,
    pub init: InitialOpinions,
    pub heuristic_alpha: f64,
    pub theta: ThetaSpec,
    pub trace: Option<PathBuf>,
    pub theta_fallback: f64,
    /// Keep only the nodes of the K largest trace cascades (plus connecting paths).
    pub top_cascades: Option<usize>,
    pub seeds: usize,
    pub seed: u64,
    pub runs: usize,
    pub mode: UpdateMode,
    pub damping: f64,
    pub influence_cap: usize,
    pub threads: Option<usize>,
    pub per_run_output: bool,
    pub event_log: bool,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            graph: GraphSource::Karate,
            directed: false,
            lscc: false,
            lambda: SusceptibilityStrategy::Uniform(DEFAULT_UNIFORM_SUSCEPTIBILITY),
            init: InitialOpinions::B2Unit,
            heuristic_alpha: DEFAULT_HEURISTIC_ALPHA,
            theta: ThetaSpec::Global(0.5),
            trace: None,
            theta_fallback: 0.0,
            top_cascades: None,
            seeds: 15,
            seed: 42,
            runs: 1000,
            mode: UpdateMode::Convex,
            damping: DEFAULT_DAMPING,
            influence_cap: DEFAULT_INFLUENCE_MAP_CAP,
            threads: None,
            per_run_output: false,
            event_log: false,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl ExperimentConfig {
    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "graph" => self.graph = v.parse()?,
            "directed" => self.directed = parse_bool(key, v)?,
            "lscc" => self.lscc = parse_bool(key, v)?,
            "lambda_strategy" | "lambda" => self.lambda = v.parse()?,
            "init_opinions" | "init" => self.init = v.parse()?,
            "heuristic_alpha" => self.heuristic_alpha = parse_num(key, v)?,
            "theta" => self.theta = v.parse()?,
            "trace" => self.trace = (!v.is_empty()).then(|| PathBuf::from(v)),
            "theta_fallback" => self.theta_fallback = parse_num(key, v)?,
            "top_cascades" => {
                self.top_cascades = if v.is_empty() || v == "none" { None } else { Some(parse_num(key, v)?) }
            }
            "seeds" => self.seeds = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "runs" => self.runs = parse_num(key, v)?,
            "eq10_mode" | "mode" => self.mode = v.parse()?,
            "damping" => self.damping = parse_num(key, v)?,
            "influence_cap" => self.influence_cap = parse_num(key, v)?,
            "threads" => self.threads = if v.is_empty() || v == "auto" { None } else { Some(parse_num(key, v)?) },
            "per_run_output" => self.per_run_output = parse_bool(key, v)?,
            "event_log" => self.event_log = parse_bool(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` lines; `#` starts a comment.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", k + 1)))?;
            cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", k + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.theta_fallback) {
            return Err(Error::Config(format!("theta_fallback {} is not a probability", self.theta_fallback)));
        }
        if let SusceptibilityStrategy::Uniform(c) = self.lambda {
            if !(0.0..1.0).contains(&c) {
                return Err(Error::Config(format!("uniform susceptibility {c} must lie in [0,1)")));
            }
        }
        if !(self.heuristic_alpha > 0.0 && self.heuristic_alpha < 1.0) {
            return Err(Error::Config(format!("heuristic_alpha {} must lie in (0,1)", self.heuristic_alpha)));
        }
        if self.theta == ThetaSpec::FromTrace && self.trace.is_none() {
            return Err(Error::Config("theta = trace needs a trace file".into()));
        }
        Ok(())
    }

    /// The same `key = value` text `from_kv_str` reads.
    pub fn to_kv_string(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let lines = [
            ("graph", self.graph.to_string()),
            ("directed", self.directed.to_string()),
            ("lscc", self.lscc.to_string()),
            ("lambda_strategy", self.lambda.to_string()),
            ("init_opinions", self.init.to_string()),
            ("heuristic_alpha", self.heuristic_alpha.to_string()),
            ("theta", self.theta.to_string()),
            ("trace", opt(self.trace.as_ref().map(|p| p.display().to_string()))),
            ("theta_fallback", self.theta_fallback.to_string()),
            ("top_cascades", opt(self.top_cascades.map(|k| k.to_string()))),
            ("seeds", self.seeds.to_string()),
            ("seed", self.seed.to_string()),
            ("runs", self.runs.to_string()),
            ("eq10_mode", self.mode.to_string()),
            ("damping", self.damping.to_string()),
            ("influence_cap", self.influence_cap.to_string()),
            ("threads", opt(self.threads.map(|t| t.to_string()))),
            ("per_run_output", self.per_run_output.to_string()),
            ("event_log", self.event_log.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Builds (or loads) the graph named by the config, before any restriction.
pub fn build_graph(cfg: &ExperimentConfig) -> Result<(SocialGraph, NodeMap)> {
    let g = match &cfg.graph {
        GraphSource::EdgeList(path) => {
            let file =
                File::open(path).map_err(|e| Error::Config(format!("cannot open graph {}: {e}", path.display())))?;
            return load_edge_list(BufReader::new(file), cfg.directed);
        }
        GraphSource::Karate => karate_club(),
        GraphSource::Path(n) => path_graph(*n)?,
        GraphSource::BarabasiAlbert { n, k } => {
            generate_barabasi_albert(*n, *k, &mut rng_stream(cfg.seed, STREAM_GRAPH))?
        }
    };
    let map = NodeMap::identity(g.node_count());
    Ok((g, map))
}

/// Graph after the optional LSCC restriction.
pub fn load_graph(cfg: &ExperimentConfig) -> Result<(SocialGraph, NodeMap)> {
    let (g, map) = build_graph(cfg)?;
    if !cfg.lscc {
        return Ok((g, map));
    }
    let sub = largest_strongly_connected_component(&g);
    log::info!("largest strongly connected component: {} of {} nodes", sub.graph.node_count(), g.node_count());
    let map = map.restrict(&sub);
    Ok((sub.graph, map))
}

/// Affine map of `values` onto `[RESCALE_MARGIN, 1 - RESCALE_MARGIN]`;
/// constant input maps to 0.5.
pub fn rescale_open_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-9 * hi.abs().max(lo.abs()) {
        return vec![0.5; values.len()];
    }
    let span = 1.0 - 2.0 * RESCALE_MARGIN;
    values.iter().map(|v| RESCALE_MARGIN + span * (v - lo) / (hi - lo)).collect()
}

pub fn assign_susceptibility(
    g: &SocialGraph,
    strategy: SusceptibilityStrategy,
    damping: f64,
) -> Result<Susceptibility> {
    let values = match strategy {
        SusceptibilityStrategy::Uniform(c) => vec![c; g.node_count()],
        SusceptibilityStrategy::Proportional => {
            rescale_open_unit(&pagerank(g, damping, DEFAULT_PAGERANK_TOL, DEFAULT_PAGERANK_MAX_ITER)?)
        }
        SusceptibilityStrategy::Inverse => {
            let p = pagerank(g, damping, DEFAULT_PAGERANK_TOL, DEFAULT_PAGERANK_MAX_ITER)?;
            rescale_open_unit(&p.iter().map(|v| 1.0 / v).collect::<Vec<_>>())
        }
    };
    Susceptibility::new(values)
}

/// `count` distinct nodes drawn uniformly, in draw order.
pub fn select_seeds<R: Rng + ?Sized>(g: &SocialGraph, count: usize, rng: &mut R) -> Result<SeedSchedule> {
    if count > g.node_count() {
        return Err(Error::InvalidParameter(format!(
            "cannot pick {count} distinct seeds from {} nodes",
            g.node_count()
        )));
    }
    SeedSchedule::new(g, sample(rng, g.node_count(), count).into_vec())
}

/// Initial opinions and a one-line description of where they came from.
pub fn initial_opinions(
    cfg: &ExperimentConfig,
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
) -> Result<(Vec<f64>, String)> {
    if let InitialOpinions::File(path) = &cfg.init {
        let file =
            File::open(path).map_err(|e| Error::Config(format!("cannot open opinions {}: {e}", path.display())))?;
        let u = read_opinions_csv(BufReader::new(file), w.dim())?;
        return Ok((u, format!("file {}", path.display())));
    }
    let h = influence_map(w, lambda, cfg.influence_cap)?;
    Ok(match cfg.init {
        InitialOpinions::B1 => (polarizing_b1(&h), "B1(1): vertex of the unit L1 ball".into()),
        InitialOpinions::B2Unit => (polarizing_b2(&h, 1.0)?, "B2(1): top right-singular vector of H".into()),
        InitialOpinions::B2Radius(t) => {
            let t = t.unwrap_or_else(|| crate::polarization::default_b2_radius(&h));
            (polarizing_b2(&h, t)?, format!("B2(t): top right-singular vector of H scaled to radius {t}"))
        }
        InitialOpinions::Heuristic => (
            polarizing_heuristic(&h, cfg.heuristic_alpha)?,
            format!("heuristic: thresholded sign of the top singular vector, alpha {}", cfg.heuristic_alpha),
        ),
        InitialOpinions::File(_) => unreachable!(),
    })
}

/// Shared inputs of every run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub graph: SocialGraph,
    pub node_map: NodeMap,
    pub influence: InfluenceMatrix,
    pub lambda: Susceptibility,
    pub u: Vec<f64>,
    pub u_provenance: String,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig, graph: SocialGraph, node_map: NodeMap) -> Result<Self> {
        let influence = InfluenceMatrix::from_graph(&graph)?;
        let lambda = assign_susceptibility(&graph, cfg.lambda, cfg.damping)?;
        let (u, u_provenance) = initial_opinions(cfg, &influence, &lambda)?;
        Ok(Self { graph, node_map, influence, lambda, u, u_provenance })
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let (g, map) = load_graph(cfg)?;
        Self::new(cfg, g, map)
    }
}

/// Empirical CDF as (value, cumulative fraction) at each distinct value.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    pub points: Vec<(f64, f64)>,
    pub samples: usize,
}

impl Ecdf {
    pub fn from_samples(mut values: Vec<f64>) -> Self {
        values.retain(|v| !v.is_nan());
        // fold -0.0 into 0.0
        values.iter_mut().for_each(|v| *v += 0.0);
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let mut points: Vec<(f64, f64)> = Vec::new();
        for (k, &v) in values.iter().enumerate() {
            let frac = (k + 1) as f64 / n as f64;
            match points.last_mut() {
                Some(last) if last.0 == v => last.1 = frac,
                _ => points.push((v, frac)),
            }
        }
        Self { points, samples: n }
    }

    /// `F(x)`: fraction of samples `≤ x`.
    pub fn eval(&self, x: f64) -> f64 {
        let k = self.points.partition_point(|p| p.0 <= x);
        if k == 0 {
            0.0
        } else {
            self.points[k - 1].1
        }
    }

    /// Two-sample Kolmogorov–Smirnov distance `sup |F - G|`.
    pub fn ks_distance(&self, other: &Ecdf) -> f64 {
        self.points.iter().chain(&other.points).map(|&(x, _)| (self.eval(x) - other.eval(x)).abs()).fold(0.0, f64::max)
    }
}

/// Shifts `x_final - u` pooled over every run and node.
pub fn opinion_shift_ecdf(u: &[f64], finals: &[Vec<f64>]) -> Result<Ecdf> {
    let mut shifts = Vec::with_capacity(u.len() * finals.len());
    for x in finals {
        crate::fj::check_len(u.len(), x.len())?;
        shifts.extend(x.iter().zip(u).map(|(a, b)| a - b));
    }
    Ok(Ecdf::from_samples(shifts))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolarizationRow {
    pub model: String,
    pub metric: PolarizationMetric,
    pub initial: f64,
    /// Mean over runs for Monte Carlo models.
    pub final_value: f64,
    pub delta: f64,
}

fn polarization_rows(model: &str, u: &[f64], finals: &[Vec<f64>]) -> Result<Vec<PolarizationRow>> {
    PolarizationMetric::ALL
        .iter()
        .map(|&metric| {
            let initial = metric.evaluate(u)?;
            let mut total = 0.0;
            for x in finals {
                total += metric.evaluate(x)?;
            }
            let final_value = if finals.is_empty() { initial } else { total / finals.len() as f64 };
            Ok(PolarizationRow { model: model.to_string(), metric, initial, final_value, delta: final_value - initial })
        })
        .collect()
}

/// Results of an experiment, ready to be written out.
#[derive(Debug, Clone)]
pub struct AggregateReport {
    pub node_map: NodeMap,
    pub initial: Vec<f64>,
    pub lambda: Vec<f64>,
    pub schedule: Vec<NodeId>,
    pub fj_final: Vec<f64>,
    pub fjc_finals: Vec<Vec<f64>>,
    pub fjc_mean: Vec<f64>,
    pub real_final: Option<Vec<f64>>,
    /// Keyed by model name: "FJ", "FJC", and "Real" for replays.
    pub ecdfs: Vec<(String, Ecdf)>,
    pub polarization: Vec<PolarizationRow>,
    pub ks: Vec<(String, f64)>,
    pub theta: Option<ThetaEstimate>,
    /// Ordered `key = value` lines for `manifest.txt`.
    pub manifest: Vec<(String, String)>,
    pub event_log: Option<Vec<u8>>,
}

impl AggregateReport {
    pub fn polarization_row(&self, model: &str, metric: PolarizationMetric) -> Option<&PolarizationRow> {
        self.polarization.iter().find(|r| r.model == model && r.metric == metric)
    }

    pub fn ecdf(&self, model: &str) -> Option<&Ecdf> {
        self.ecdfs.iter().find(|(m, _)| m == model).map(|(_, e)| e)
    }

    /// Mean absolute shift of a model's finals, pooled over runs and nodes.
    pub fn mean_abs_shift(&self, model: &str) -> Option<f64> {
        let finals: Vec<&Vec<f64>> = match model {
            "FJ" => vec![&self.fj_final],
            "FJC" => self.fjc_finals.iter().collect(),
            "Real" => self.real_final.iter().collect(),
            _ => return None,
        };
        let count = finals.len() * self.initial.len();
        let total: f64 = finals.iter().flat_map(|x| x.iter().zip(&self.initial).map(|(a, b)| (a - b).abs())).sum();
        (count > 0).then(|| total / count as f64)
    }

    /// Writes every CSV plus `manifest.txt` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };

        let mut out = create("shifts_ecdf.csv")?;
        writeln!(out, "model,shift,cdf")?;
        for (model, e) in &self.ecdfs {
            for (x, f) in &e.points {
                writeln!(out, "{model},{x},{f}")?;
            }
        }
        out.flush()?;

        let mut out = create("polarization.csv")?;
        writeln!(out, "model,metric,initial,final,delta")?;
        for r in &self.polarization {
            writeln!(out, "{},{},{},{},{}", r.model, r.metric.name(), r.initial, r.final_value, r.delta)?;
        }
        out.flush()?;

        let mut out = create("final_opinions.csv")?;
        let real = self.real_final.is_some();
        writeln!(out, "node,u,lambda,fj,fjc_mean{}", if real { ",real" } else { "" })?;
        for i in 0..self.initial.len() {
            write!(out, "{i},{},{},{},{}", self.initial[i], self.lambda[i], self.fj_final[i], self.fjc_mean[i])?;
            if let Some(r) = &self.real_final {
                write!(out, ",{}", r[i])?;
            }
            writeln!(out)?;
        }
        out.flush()?;

        if !self.ks.is_empty() {
            let mut out = create("fidelity.csv")?;
            writeln!(out, "comparison,ks_distance")?;
            for (name, d) in &self.ks {
                writeln!(out, "{name},{d}")?;
            }
            out.flush()?;
        }

        if let Some(theta) = &self.theta {
            theta.write_csv(create("theta_report.csv")?)?;
            theta.write_summary_csv(create("theta_summary.csv")?)?;
        }

        if !self.fjc_finals.is_empty() && self.manifest.iter().any(|(k, v)| k == "per_run_output" && v == "true") {
            let mut out = create("run_finals.csv")?;
            writeln!(out, "run,node,x_final")?;
            for (r, x) in self.fjc_finals.iter().enumerate() {
                for (i, v) in x.iter().enumerate() {
                    writeln!(out, "{r},{i},{v}")?;
                }
            }
            out.flush()?;
        }

        if let Some(log) = &self.event_log {
            fs::write(dir.join("events.jsonl"), log)?;
        }

        self.node_map.write_csv(create("node_map.csv")?)?;

        let mut out = create("manifest.txt")?;
        for (k, v) in &self.manifest {
            writeln!(out, "{k} = {v}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn thread_pool(threads: Option<usize>) -> Result<Option<rayon::ThreadPool>> {
    threads
        .map(|t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {t} worker threads: {e}")))
        })
        .transpose()
}

/// Final opinions of `runs` independent FJC runs, in run order.
pub fn run_many(
    engine: &FjcEngine<'_>,
    prepared: &PreparedSchedule,
    u: &[f64],
    model: &ReshareModel,
    runs: usize,
    master_seed: u64,
    threads: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let work = || {
        (0..runs)
            .into_par_iter()
            .map(|k| engine.run(u, prepared, model, &mut run_rng(master_seed, k)).map(|r| r.final_opinions))
            .collect::<Result<Vec<_>>>()
    };
    match thread_pool(threads)? {
        Some(pool) => pool.install(work),
        None => work(),
    }
}

fn mean_vector(finals: &[Vec<f64>], fallback: &[f64]) -> Vec<f64> {
    if finals.is_empty() {
        return fallback.to_vec();
    }
    let mut mean = vec![0.0; fallback.len()];
    for x in finals {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= finals.len() as f64);
    mean
}

fn load_trace(cfg: &ExperimentConfig, map: &NodeMap, unknown: UnknownNodes) -> Result<ReshareTrace> {
    let path = cfg.trace.as_ref().ok_or_else(|| Error::Config("no trace file configured".into()))?;
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open trace {}: {e}", path.display())))?;
    ReshareTrace::from_csv(BufReader::new(file), map, unknown)
}

fn base_manifest(cfg: &ExperimentConfig, setup: &Setup) -> Vec<(String, String)> {
    let mut m: Vec<(String, String)> = cfg
        .to_kv_string()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    m.push(("version".into(), env!("CARGO_PKG_VERSION").into()));
    m.push(("nodes".into(), setup.graph.node_count().to_string()));
    m.push(("edges".into(), setup.graph.edge_count().to_string()));
    m.push(("initial_opinions_source".into(), setup.u_provenance.clone()));
    m
}

fn direction_lines(report: &AggregateReport, against: &str) -> Vec<(String, String)> {
    PolarizationMetric::ALL
        .iter()
        .filter_map(|&metric| {
            let a = report.polarization_row("FJC", metric)?;
            let b = report.polarization_row(against, metric)?;
            let rel = if a.delta > b.delta {
                ">"
            } else if a.delta < b.delta {
                "<"
            } else {
                "="
            };
            Some((
                format!("direction.{}", metric.name()),
                format!("delta FJC {} delta {against} ({} vs {})", rel, a.delta, b.delta),
            ))
        })
        .collect()
}

/// Synthetic-cascade experiment: FJ baseline against `cfg.runs` FJC runs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let started = Instant::now();
    let setup = Setup::from_config(cfg)?;
    let g = &setup.graph;
    let schedule = select_seeds(g, cfg.seeds, &mut schedule_rng(cfg.seed))?;
    let (model, theta) = match cfg.theta {
        ThetaSpec::Global(p) => (ReshareModel::global(p)?, None),
        ThetaSpec::FromTrace => {
            let trace = load_trace(cfg, &setup.node_map, UnknownNodes::DropPost)?;
            let est = estimate_theta(&trace, g, cfg.theta_fallback)?;
            (est.model(), Some(est))
        }
    };
    let fj_final = fj_fixed_point(&setup.influence, &setup.lambda, &setup.u)?;
    let engine = FjcEngine::new(g, &setup.influence, &setup.lambda, cfg.mode)?;
    let prepared = engine.prepare(&schedule)?;
    let fjc_finals = run_many(&engine, &prepared, &setup.u, &model, cfg.runs, cfg.seed, cfg.threads)?;
    let event_log = event_log(cfg, &engine, &prepared, &setup.u, &model)?;

    let mut polarization = polarization_rows("FJ", &setup.u, std::slice::from_ref(&fj_final))?;
    polarization.extend(polarization_rows("FJC", &setup.u, &fjc_finals)?);
    let ecdfs = vec![
        ("FJ".to_string(), opinion_shift_ecdf(&setup.u, std::slice::from_ref(&fj_final))?),
        ("FJC".to_string(), opinion_shift_ecdf(&setup.u, &fjc_finals)?),
    ];
    let mut manifest = base_manifest(cfg, &setup);
    manifest.push(("schedule".into(), format!("{:?}", schedule.roots())));
    let mut report = AggregateReport {
        node_map: setup.node_map.clone(),
        initial: setup.u.clone(),
        lambda: setup.lambda.values().to_vec(),
        schedule: schedule.roots().to_vec(),
        fjc_mean: mean_vector(&fjc_finals, &setup.u),
        fj_final,
        fjc_finals,
        real_final: None,
        ecdfs,
        polarization,
        ks: Vec::new(),
        theta,
        manifest,
        event_log,
    };
    let ks = report.ecdf("FJC").unwrap().ks_distance(report.ecdf("FJ").unwrap());
    report.ks.push(("FJC-vs-FJ".into(), ks));
    let directions = direction_lines(&report, "FJ");
    report.manifest.extend(directions);
    report.manifest.push(("mean_abs_shift.FJ".into(), report.mean_abs_shift("FJ").unwrap().to_string()));
    report.manifest.push(("mean_abs_shift.FJC".into(), report.mean_abs_shift("FJC").unwrap().to_string()));
    report.manifest.push(("wall_time_seconds".into(), format!("{:.3}", started.elapsed().as_secs_f64())));
    Ok(report)
}

fn event_log(
    cfg: &ExperimentConfig,
    engine: &FjcEngine<'_>,
    prepared: &PreparedSchedule,
    u: &[f64],
    model: &ReshareModel,
) -> Result<Option<Vec<u8>>> {
    if !cfg.event_log {
        return Ok(None);
    }
    let rec = engine.clone().with_update_log(true).run(u, prepared, model, &mut run_rng(cfg.seed, 0))?;
    let mut buf = Vec::new();
    rec.write_event_log(&mut buf)?;
    Ok(Some(buf))
}

/// Induced subgraph on the nodes of the `k` largest posts of `trace`, plus
/// shortest follow paths to and from an anchor node so the result stays
/// strongly connected; finally restricted to its largest strongly connected
/// component. A stand-in for a Steiner-tree extraction, not equivalent to one.
pub fn top_cascade_subgraph(g: &SocialGraph, trace: &ReshareTrace, k: usize) -> Result<Subgraph> {
    trace.check_graph(g)?;
    let mut posts: Vec<(usize, Vec<NodeId>)> = trace
        .events_by_post()
        .into_iter()
        .map(|ev| ev.iter().map(|e| e.node).collect::<Vec<_>>())
        .enumerate()
        .collect();
    posts.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let terminals: BTreeSet<NodeId> = posts.into_iter().take(k).flat_map(|(_, nodes)| nodes).collect();
    let Some(&anchor) = terminals.iter().next() else {
        return Err(Error::InvalidParameter("trace has no events to build a subgraph from".into()));
    };
    let mut keep = terminals.clone();
    for &t in &terminals {
        for (from, to) in [(t, anchor), (anchor, t)] {
            match shortest_follow_path(g, from, to) {
                Some(path) => keep.extend(path),
                None => log::warn!("no follow path from {from} to {to}; node {t} may drop out"),
            }
        }
    }
    let keep: Vec<NodeId> = keep.into_iter().collect();
    let first = g.induced_subgraph(&keep)?;
    let second = largest_strongly_connected_component(&first.graph);
    let new_to_old: Vec<NodeId> = second.new_to_old.iter().map(|&m| first.new_to_old[m]).collect();
    let mut old_to_new = vec![None; g.node_count()];
    for (new, &old) in new_to_old.iter().enumerate() {
        old_to_new[old] = Some(new);
    }
    Ok(Subgraph { graph: second.graph, old_to_new, new_to_old })
}

/// BFS along follow edges (`i → j` when `i` follows `j`).
fn shortest_follow_path(g: &SocialGraph, from: NodeId, to: NodeId) -> Option<Vec<NodeId>> {
    let mut parent = vec![usize::MAX; g.node_count()];
    parent[from] = from;
    let mut queue = VecDeque::from([from]);
    while let Some(i) = queue.pop_front() {
        if i == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = parent[cur];
                path.push(cur);
            }
            return Some(path);
        }
        for &j in g.followees(i) {
            if parent[j] == usize::MAX {
                parent[j] = i;
                queue.push_back(j);
            }
        }
    }
    None
}

/// Replays a recorded trace ("Real") and compares it with FJC driven by the
/// trace's post sources and estimated per-node θ, and with the FJ baseline.
pub fn replay_experiment(cfg: &ExperimentConfig) -> Result<AggregateReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (mut g, mut map) = load_graph(cfg)?;
    if let Some(k) = cfg.top_cascades {
        let trace = load_trace(cfg, &map, UnknownNodes::DropPost)?;
        let sub = top_cascade_subgraph(&g, &trace, k)?;
        log::info!("top-{k} cascade subgraph: {} nodes, {} edges", sub.graph.node_count(), sub.graph.edge_count());
        map = map.restrict(&sub);
        g = sub.graph;
    }
    let unknown = if cfg.lscc || cfg.top_cascades.is_some() { UnknownNodes::DropPost } else { UnknownNodes::Error };
    let trace = load_trace(cfg, &map, unknown)?;
    let setup = Setup::new(cfg, g, map)?;
    let g = &setup.graph;

    let estimate = estimate_theta(&trace, g, cfg.theta_fallback)?;
    let model = match cfg.theta {
        ThetaSpec::Global(p) => ReshareModel::global(p)?,
        ThetaSpec::FromTrace => estimate.model(),
    };
    let schedule = SeedSchedule::new(g, trace.post_sources())?;

    let fj_final = fj_fixed_point(&setup.influence, &setup.lambda, &setup.u)?;
    let engine = FjcEngine::new(g, &setup.influence, &setup.lambda, cfg.mode)?;
    let real = engine.replay(&setup.u, &trace)?.final_opinions;
    let prepared = engine.prepare(&schedule)?;
    let fjc_finals = run_many(&engine, &prepared, &setup.u, &model, cfg.runs, cfg.seed, cfg.threads)?;
    let event_log = event_log(cfg, &engine, &prepared, &setup.u, &model)?;

    let mut polarization = polarization_rows("Real", &setup.u, std::slice::from_ref(&real))?;
    polarization.extend(polarization_rows("FJC", &setup.u, &fjc_finals)?);
    polarization.extend(polarization_rows("FJ", &setup.u, std::slice::from_ref(&fj_final))?);
    let real_ecdf = opinion_shift_ecdf(&setup.u, std::slice::from_ref(&real))?;
    let fjc_ecdf = opinion_shift_ecdf(&setup.u, &fjc_finals)?;
    let fj_ecdf = opinion_shift_ecdf(&setup.u, std::slice::from_ref(&fj_final))?;
    let ks = vec![
        ("FJC-vs-Real".to_string(), fjc_ecdf.ks_distance(&real_ecdf)),
        ("FJ-vs-Real".to_string(), fj_ecdf.ks_distance(&real_ecdf)),
    ];
    let mut manifest = base_manifest(cfg, &setup);
    manifest.push(("posts".into(), trace.post_count().to_string()));
    manifest.push(("events".into(), trace.events().len().to_string()));
    if let Some(s) = estimate.summary() {
        manifest.push(("theta_mean".into(), s.mean.to_string()));
        manifest.push(("theta_unavailable".into(), s.unavailable.to_string()));
    }
    for (name, d) in &ks {
        manifest.push((format!("ks.{name}"), d.to_string()));
    }
    let mut report = AggregateReport {
        node_map: setup.node_map.clone(),
        initial: setup.u.clone(),
        lambda: setup.lambda.values().to_vec(),
        schedule: schedule.roots().to_vec(),
        fjc_mean: mean_vector(&fjc_finals, &setup.u),
        fj_final,
        fjc_finals,
        real_final: Some(real),
        ecdfs: vec![("Real".into(), real_ecdf), ("FJC".into(), fjc_ecdf), ("FJ".into(), fj_ecdf)],
        polarization,
        ks,
        theta: Some(estimate),
        manifest,
        event_log,
    };
    for model in ["Real", "FJC", "FJ"] {
        if let Some(v) = report.mean_abs_shift(model) {
            report.manifest.push((format!("mean_abs_shift.{model}"), v.to_string()));
        }
    }
    report.manifest.push(("wall_time_seconds".into(), format!("{:.3}", started.elapsed().as_secs_f64())));
    Ok(report)
}

/// Runs `f` and writes its report; on failure a manifest with the error is
/// still written so partial output directories are recognisable.
pub fn run_to_dir<F>(cfg: &ExperimentConfig, f: F) -> Result<AggregateReport>
where
    F: FnOnce(&ExperimentConfig) -> Result<AggregateReport>,
{
    match f(cfg) {
        Ok(report) => {
            report.write_outputs(&cfg.out_dir)?;
            Ok(report)
        }
        Err(e) => {
            fs::create_dir_all(&cfg.out_dir)?;
            let mut text = cfg.to_kv_string();
            text.push_str(&format!("status = failed: {e}\n"));
            fs::write(cfg.out_dir.join("manifest.txt"), text)?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::directed_cycle;

    #[test]
    fn uniform_strategy() {
        let g = karate_club();
        let l = assign_susceptibility(&g, SusceptibilityStrategy::Uniform(0.6), DEFAULT_DAMPING).unwrap();
        assert!(l.values().iter().all(|&v| v == 0.6));
    }

    #[test]
    fn constant_pagerank_maps_to_half() {
        let g = directed_cycle(6).unwrap();
        for s in [SusceptibilityStrategy::Proportional, SusceptibilityStrategy::Inverse] {
            let l = assign_susceptibility(&g, s, DEFAULT_DAMPING).unwrap();
            assert!(l.values().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn star_rescale_extremes() {
        let g = SocialGraph::from_edges(4, [(1, 0), (2, 0), (3, 0)]).unwrap();
        let l = assign_susceptibility(&g, SusceptibilityStrategy::Proportional, DEFAULT_DAMPING).unwrap();
        assert!((l[0] - 0.99).abs() < 1e-12);
        for i in 1..4 {
            assert!((l[i] - 0.01).abs() < 1e-12);
        }
        let l = assign_susceptibility(&g, SusceptibilityStrategy::Inverse, DEFAULT_DAMPING).unwrap();
        assert!((l[0] - 0.01).abs() < 1e-12 && (l[1] - 0.99).abs() < 1e-12);
    }

    #[test]
    fn seed_selection() {
        let g = karate_club();
        let s = select_seeds(&g, 34, &mut rng_stream(3, 2)).unwrap();
        let mut all = s.roots().to_vec();
        all.sort_unstable();
        assert_eq!(all, (0..34).collect::<Vec<_>>());
        let a = select_seeds(&g, 15, &mut rng_stream(3, 2)).unwrap();
        let b = select_seeds(&g, 15, &mut rng_stream(3, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.roots().iter().collect::<BTreeSet<_>>().len(), 15);
        assert!(select_seeds(&g, 35, &mut rng_stream(3, 2)).is_err());
    }

    #[test]
    fn ecdf_examples() {
        let u = vec![0.1, 0.2, 0.3];
        let e = opinion_shift_ecdf(&u, std::slice::from_ref(&u)).unwrap();
        assert_eq!(e.points, vec![(0.0, 1.0)]);
        let e = Ecdf::from_samples(vec![1.0, -1.0, 0.0]);
        let fracs: Vec<f64> = e.points.iter().map(|p| p.1).collect();
        assert_eq!(fracs, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(e.eval(-2.0), 0.0);
        assert_eq!(e.eval(0.5), 2.0 / 3.0);
        assert!(opinion_shift_ecdf(&u, &[vec![0.0; 2]]).is_err());
    }

    #[test]
    fn ks_distance_examples() {
        let a = Ecdf::from_samples(vec![0.0, 1.0]);
        assert_eq!(a.ks_distance(&a), 0.0);
        let b = Ecdf::from_samples(vec![2.0, 3.0]);
        assert_eq!(a.ks_distance(&b), 1.0);
        let c = Ecdf::from_samples(vec![0.0, 2.0]);
        assert_eq!(a.ks_distance(&c), 0.5);
    }

    #[test]
    fn config_round_trip() {
        let text = "graph = ba:100:6\nlambda_strategy = inverse # comment\ninit_opinions = b2t:0.8\ntheta = 0.1\nseeds = 5\nruns = 20\neq10_mode = literal\nthreads = 2\n";
        let cfg = ExperimentConfig::from_kv_str(text).unwrap();
        assert_eq!(cfg.graph, GraphSource::BarabasiAlbert { n: 100, k: 6 });
        assert_eq!(cfg.lambda, SusceptibilityStrategy::Inverse);
        assert_eq!(cfg.init, InitialOpinions::B2Radius(Some(0.8)));
        assert_eq!(cfg.mode, UpdateMode::Literal);
        assert_eq!(ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::from_kv_str("runs = 0\n").is_err());
        assert!(ExperimentConfig::from_kv_str("colour = blue\n").is_err());
        assert!(ExperimentConfig::from_kv_str("theta = 1.5\n").is_err());
        assert!(ExperimentConfig::from_kv_str("theta = trace\n").is_err());
        assert!(ExperimentConfig::from_kv_str("no equals sign\n").is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("karate".parse::<GraphSource>().unwrap(), GraphSource::Karate);
        assert_eq!("path:3".parse::<GraphSource>().unwrap(), GraphSource::Path(3));
        assert_eq!("file:a:b.txt".parse::<GraphSource>().unwrap(), GraphSource::EdgeList("a:b.txt".into()));
        assert_eq!("uniform:0.3".parse::<SusceptibilityStrategy>().unwrap(), SusceptibilityStrategy::Uniform(0.3));
        assert_eq!("uniform".parse::<SusceptibilityStrategy>().unwrap(), SusceptibilityStrategy::Uniform(0.6));
        assert_eq!("heuristic".parse::<InitialOpinions>().unwrap(), InitialOpinions::Heuristic);
        assert!("b3".parse::<InitialOpinions>().is_err());
    }

    #[test]
    fn empty_schedule_gives_step_at_zero() {
        let cfg = ExperimentConfig { seeds: 0, runs: 1, ..ExperimentConfig::default() };
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.ecdf("FJC").unwrap().points, vec![(0.0, 1.0)]);
        for m in PolarizationMetric::ALL {
            assert_eq!(r.polarization_row("FJC", m).unwrap().delta, 0.0);
        }
    }

    #[test]
    fn baseline_delta_matches_direct_computation() {
        let cfg = ExperimentConfig { runs: 10, theta: ThetaSpec::Global(0.3), ..ExperimentConfig::default() };
        let r = run_experiment(&cfg).unwrap();
        for m in PolarizationMetric::ALL {
            let direct = crate::polarization::polarization_value(m, &r.initial, &r.fj_final).unwrap();
            assert_eq!(r.polarization_row("FJ", m).unwrap().delta, direct);
            let mean_delta = r
                .fjc_finals
                .iter()
                .map(|x| crate::polarization::polarization_value(m, &r.initial, x).unwrap())
                .sum::<f64>()
                / 10.0;
            assert!((r.polarization_row("FJC", m).unwrap().delta - mean_delta).abs() < 1e-12);
        }
    }

    #[test]
    fn top_cascade_subgraph_keeps_terminals_connected() {
        let g = karate_club();
        let trace = ReshareTrace::new(vec![
            (0.0, "a", 0),
            (1.0, "a", 5),
            (2.0, "a", 16),
            (0.0, "b", 25),
            (1.0, "b", 24),
            (0.0, "c", 9),
        ])
        .unwrap();
        let sub = top_cascade_subgraph(&g, &trace, 2).unwrap();
        for t in [0, 5, 16, 24, 25] {
            assert!(sub.old_to_new[t].is_some(), "terminal {t} missing");
        }
        assert!(sub.graph.dangling_nodes().is_empty());
        let whole = largest_strongly_connected_component(&sub.graph);
        assert_eq!(whole.graph.node_count(), sub.graph.node_count());
    }
}
