use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fjc_core::cascade::{estimate_theta, ReshareModel, ReshareTrace, UnknownNodes};
use fjc_core::experiment::{
    build_graph, load_graph, replay_experiment, run_experiment, run_rng, run_to_dir, schedule_rng, select_seeds,
    ExperimentConfig, Setup, ThetaSpec,
};
use fjc_core::fj::{fj_fixed_point, fj_iterate_until};
use fjc_core::fjc::FjcEngine;
use fjc_core::polarization::{write_opinions_csv, PolarizationMetric};

#[derive(Parser)]
#[command(name = "fjc", version, about = "Friedkin-Johnsen opinion dynamics over information cascades")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a graph and write it as an edge list.
    GenGraph {
        #[command(flatten)]
        common: Common,
        /// Output edge-list file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the FJ fixed point in closed form.
    SolveFj {
        #[command(flatten)]
        common: Common,
        /// Also iterate the synchronous map and report the gap.
        #[arg(long)]
        check: bool,
    },
    /// Run a single FJC simulation and write per-node and per-cascade tables.
    SimulateFjc {
        #[command(flatten)]
        common: Common,
    },
    /// Compare a recorded trace with FJC and FJ predictions.
    ReplayTrace {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate per-node reshare probabilities from a trace.
    EstimateTheta {
        #[command(flatten)]
        common: Common,
    },
    /// Write the initial-opinion vector selected by --init-opinions.
    PolarizingVector {
        #[command(flatten)]
        common: Common,
        /// Output CSV (default: <out-dir>/polarizing_vector.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo experiment: FJ baseline against repeated FJC runs.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Default)]
struct Common {
    /// Graph: edge-list path, file:PATH, karate, ba:N:K or path:N.
    #[arg(long)]
    graph: Option<String>,
    /// Flat key = value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master rng seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of Monte Carlo runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Reshare probability, or "trace" to estimate it per node.
    #[arg(long)]
    theta: Option<String>,
    /// proportional, inverse or uniform[:c].
    #[arg(long)]
    lambda_strategy: Option<String>,
    /// b1, b2, b2t[:t], heuristic or file:PATH.
    #[arg(long)]
    init_opinions: Option<String>,
    /// convex or literal.
    #[arg(long)]
    eq10_mode: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Reshare trace CSV (timestamp,post_id,node_id).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Number of seed nodes posting per run.
    #[arg(long)]
    seeds: Option<usize>,
    /// Treat edge-list lines as directed follow edges.
    #[arg(long)]
    directed: bool,
    /// Restrict to the largest strongly connected component.
    #[arg(long)]
    lscc: bool,
    /// Any other config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("graph", self.graph.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("runs", self.runs.map(|v| v.to_string())),
            ("theta", self.theta.clone()),
            ("lambda_strategy", self.lambda_strategy.clone()),
            ("init_opinions", self.init_opinions.clone()),
            ("eq10_mode", self.eq10_mode.clone()),
            ("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string())),
            ("trace", self.trace.as_ref().map(|p| p.display().to_string())),
            ("seeds", self.seeds.map(|v| v.to_string())),
            ("directed", self.directed.then(|| "true".to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        if self.lscc {
            cfg.lscc = true;
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
            cfg.set(k, v).with_context(|| format!("--set {kv:?}"))?;
        }
        Ok(cfg)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_polarization(rows: &[(String, PolarizationMetric, f64, f64)]) {
    println!("{:<6} {:<4} {:>14} {:>14} {:>14}", "model", "idx", "initial", "final", "delta");
    for (model, metric, initial, fin) in rows {
        println!("{model:<6} {:<4} {initial:>14.6} {fin:>14.6} {:>14.6}", metric.name(), fin - initial);
    }
}

fn gen_graph(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.config()?;
    let (g, _) = build_graph(&cfg)?;
    g.write_edge_list(create(out)?)?;
    println!("wrote {} nodes, {} edges to {}", g.node_count(), g.edge_count(), out.display());
    Ok(())
}

fn solve_fj(common: &Common, check: bool) -> Result<()> {
    let cfg = common.config()?;
    let setup = Setup::from_config(&cfg)?;
    let started = Instant::now();
    let z = fj_fixed_point(&setup.influence, &setup.lambda, &setup.u)?;
    log::info!("fixed point solved in {:.3}s", started.elapsed().as_secs_f64());
    if check {
        let it = fj_iterate_until(&setup.influence, &setup.lambda, &setup.u, 1e-13, 1_000_000)?;
        let gap = z.iter().zip(&it).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("max |closed form - iteration| = {gap:e}");
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let mut out = create(&cfg.out_dir.join("final_opinions.csv"))?;
    writeln!(out, "node,u,lambda,fj")?;
    for (i, zi) in z.iter().enumerate() {
        writeln!(out, "{i},{},{},{zi}", setup.u[i], setup.lambda[i])?;
    }
    out.flush()?;
    let mut out = create(&cfg.out_dir.join("polarization.csv"))?;
    writeln!(out, "model,metric,initial,final,delta")?;
    let mut rows = Vec::new();
    for metric in PolarizationMetric::ALL {
        let (a, b) = (metric.evaluate(&setup.u)?, metric.evaluate(&z)?);
        writeln!(out, "FJ,{},{a},{b},{}", metric.name(), b - a)?;
        rows.push(("FJ".to_string(), metric, a, b));
    }
    out.flush()?;
    print_polarization(&rows);
    Ok(())
}

fn simulate_fjc(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    cfg.validate()?;
    let setup = Setup::from_config(&cfg)?;
    let g = &setup.graph;
    let model = match cfg.theta {
        ThetaSpec::Global(p) => ReshareModel::global(p)?,
        ThetaSpec::FromTrace => {
            let trace = read_trace(&cfg, &setup)?;
            estimate_theta(&trace, g, cfg.theta_fallback)?.model()
        }
    };
    // same streams as `experiment`, so this is its run 0
    let schedule = select_seeds(g, cfg.seeds, &mut schedule_rng(cfg.seed))?;
    let engine = FjcEngine::new(g, &setup.influence, &setup.lambda, cfg.mode)?.with_update_log(cfg.event_log);
    let prepared = engine.prepare(&schedule)?;
    let rec = engine.run(&setup.u, &prepared, &model, &mut run_rng(cfg.seed, 0))?;
    fs::create_dir_all(&cfg.out_dir)?;
    rec.write_nodes_csv(create(&cfg.out_dir.join("nodes.csv"))?)?;
    rec.write_cascades_csv(create(&cfg.out_dir.join("cascades.csv"))?)?;
    if cfg.event_log {
        rec.write_event_log(create(&cfg.out_dir.join("events.jsonl"))?)?;
    }
    let reached: usize = rec.cascades.iter().map(|c| c.size).sum();
    println!("{} posts, {reached} nodes reached in total", rec.cascades.len());
    let rows: Vec<_> = PolarizationMetric::ALL
        .iter()
        .map(|&m| Ok(("FJC".to_string(), m, m.evaluate(&setup.u)?, m.evaluate(&rec.final_opinions)?)))
        .collect::<Result<_>>()?;
    print_polarization(&rows);
    Ok(())
}

fn read_trace(cfg: &ExperimentConfig, setup: &Setup) -> Result<ReshareTrace> {
    let Some(path) = &cfg.trace else { bail!("--trace is required") };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let unknown = if cfg.lscc { UnknownNodes::DropPost } else { UnknownNodes::Error };
    Ok(ReshareTrace::from_csv(BufReader::new(file), &setup.node_map, unknown)?)
}

fn estimate(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (g, map) = load_graph(&cfg)?;
    let Some(path) = &cfg.trace else { bail!("--trace is required") };
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let unknown = if cfg.lscc { UnknownNodes::DropPost } else { UnknownNodes::Error };
    let trace = ReshareTrace::from_csv(BufReader::new(file), &map, unknown)?;
    let est = estimate_theta(&trace, &g, cfg.theta_fallback)?;
    fs::create_dir_all(&cfg.out_dir)?;
    est.write_csv(create(&cfg.out_dir.join("theta_report.csv"))?)?;
    est.write_summary_csv(create(&cfg.out_dir.join("theta_summary.csv"))?)?;
    match est.summary() {
        Some(s) => {
            println!("{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}", "min", "q1", "median", "q3", "max", "mean", "n/a");
            println!(
                "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6}",
                s.min, s.q1, s.median, s.q3, s.max, s.mean, s.unavailable
            );
        }
        None => println!("no node saw a post; every estimate falls back to {}", cfg.theta_fallback),
    }
    Ok(())
}

fn polarizing_vector(common: &Common, out: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let setup = Setup::from_config(&cfg)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join("polarizing_vector.csv"));
    write_opinions_csv(create(&path)?, &setup.u_provenance, &setup.u)?;
    let l1: f64 = setup.u.iter().map(|v| v.abs()).sum();
    let l2 = setup.u.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("{}: L1 {l1:.6}, L2 {l2:.6} -> {}", setup.u_provenance, path.display());
    Ok(())
}

fn summarize(report: &fjc_core::AggregateReport, out_dir: &Path) {
    let rows: Vec<_> =
        report.polarization.iter().map(|r| (r.model.clone(), r.metric, r.initial, r.final_value)).collect();
    print_polarization(&rows);
    for (name, d) in &report.ks {
        println!("KS {name}: {d:.6}");
    }
    println!("outputs in {}", out_dir.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match &cli.command {
        Command::GenGraph { common, out } => gen_graph(common, out),
        Command::SolveFj { common, check } => solve_fj(common, *check),
        Command::SimulateFjc { common } => simulate_fjc(common),
        Command::EstimateTheta { common } => estimate(common),
        Command::PolarizingVector { common, out } => polarizing_vector(common, out.as_deref()),
        Command::ReplayTrace { common } => {
            let mut cfg = common.config()?;
            if common.theta.is_none() && common.config.is_none() {
                cfg.theta = ThetaSpec::FromTrace;
            }
            let report = run_to_dir(&cfg, replay_experiment)?;
            summarize(&report, &cfg.out_dir);
            Ok(())
        }
        Command::Experiment { common } => {
            let cfg = common.config()?;
            let report = run_to_dir(&cfg, run_experiment)?;
            summarize(&report, &cfg.out_dir);
            Ok(())
        }
    }
}
