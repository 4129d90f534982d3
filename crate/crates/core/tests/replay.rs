use std::fs::File;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fjc_core::cascade::{generate_ic_trace, sample_cascade, trace_from_realizations, ReshareModel, ReshareTrace};
use fjc_core::experiment::{replay_experiment, run_to_dir, ExperimentConfig, GraphSource, ThetaSpec};
use fjc_core::graph::{generate_barabasi_albert, NodeMap, SocialGraph};

/// Complete binary tree where every node follows its parent and the root
/// follows the last leaf.
fn tree(depth: usize) -> SocialGraph {
    let n = (1 << (depth + 1)) - 1;
    let mut edges: Vec<(usize, usize)> = (1..n).map(|k| (k, (k - 1) / 2)).collect();
    edges.push((0, n - 1));
    SocialGraph::from_edges(n, edges).unwrap()
}

fn write_graph(g: &SocialGraph, path: &Path) {
    g.write_edge_list(File::create(path).unwrap()).unwrap();
}

fn write_trace(t: &ReshareTrace, n: usize, path: &Path) {
    t.write_csv(File::create(path).unwrap(), &NodeMap::identity(n)).unwrap();
}

fn replay_config(dir: &Path, runs: usize) -> ExperimentConfig {
    ExperimentConfig {
        graph: GraphSource::EdgeList(dir.join("graph.txt")),
        directed: true,
        trace: Some(dir.join("trace.csv")),
        theta: ThetaSpec::FromTrace,
        runs,
        out_dir: dir.join("out"),
        ..ExperimentConfig::default()
    }
}

#[test]
fn fjc_generated_trace_replays_with_zero_ks() {
    let dir = tempfile::tempdir().unwrap();
    let g = tree(3);
    let model = ReshareModel::global(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cascades: Vec<_> = (0..3).map(|_| sample_cascade(&g, 0, &model, &mut rng).unwrap()).collect();
    write_graph(&g, &dir.path().join("graph.txt"));
    write_trace(&trace_from_realizations(&cascades), g.node_count(), &dir.path().join("trace.csv"));

    let report = run_to_dir(&replay_config(dir.path(), 20), replay_experiment).unwrap();
    let ks: Vec<f64> = report.ks.iter().filter(|(k, _)| k == "FJC-vs-Real").map(|(_, d)| *d).collect();
    assert_eq!(ks, vec![0.0]);
    for x in &report.fjc_finals {
        assert_eq!(x, report.real_final.as_ref().unwrap());
    }
    for name in ["shifts_ecdf.csv", "polarization.csv", "final_opinions.csv", "theta_report.csv", "manifest.txt"] {
        assert!(dir.path().join("out").join(name).exists(), "{name} missing");
    }
}

#[test]
fn empty_trace_collapses_to_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let g = tree(2);
    write_graph(&g, &dir.path().join("graph.txt"));
    std::fs::write(dir.path().join("trace.csv"), "timestamp,post_id,node_id\n").unwrap();
    let report = replay_experiment(&replay_config(dir.path(), 3)).unwrap();
    assert_eq!(report.ecdf("Real").unwrap().points, vec![(0.0, 1.0)]);
    assert_eq!(report.ecdf("FJC").unwrap().points, vec![(0.0, 1.0)]);
    let fj = report.ecdf("FJ").unwrap();
    assert!(fj.points.len() > 1);
    assert_eq!(report.schedule, Vec::<usize>::new());
}

#[test]
fn low_theta_trace_barely_moves_opinions() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let g = generate_barabasi_albert(300, 3, &mut rng).unwrap();
    let model = ReshareModel::global(0.0156).unwrap();
    let sources: Vec<usize> = (0..40).map(|_| rng.random_range(0..300)).collect();
    let trace = generate_ic_trace(&g, &model, &sources, &mut rng).unwrap();
    write_graph(&g, &dir.path().join("graph.txt"));
    write_trace(&trace, g.node_count(), &dir.path().join("trace.csv"));

    let report = replay_experiment(&replay_config(dir.path(), 50)).unwrap();
    let real = report.mean_abs_shift("Real").unwrap();
    let fjc = report.mean_abs_shift("FJC").unwrap();
    let fj = report.mean_abs_shift("FJ").unwrap();
    assert!(real < fj / 2.0, "real {real} vs fj {fj}");
    assert!(fjc < fj / 2.0, "fjc {fjc} vs fj {fj}");
    let ks = |name: &str| report.ks.iter().find(|(k, _)| k == name).unwrap().1;
    assert!(ks("FJC-vs-Real") < ks("FJ-vs-Real"));
}

#[test]
fn top_cascade_restriction_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = generate_barabasi_albert(120, 2, &mut rng).unwrap();
    let model = ReshareModel::global(0.2).unwrap();
    let trace = generate_ic_trace(&g, &model, &[0, 5, 9, 40, 77], &mut rng).unwrap();
    write_graph(&g, &dir.path().join("graph.txt"));
    write_trace(&trace, g.node_count(), &dir.path().join("trace.csv"));
    let cfg = ExperimentConfig { top_cascades: Some(2), ..replay_config(dir.path(), 5) };
    let report = replay_experiment(&cfg).unwrap();
    assert!(report.initial.len() < 120);
    assert_eq!(report.node_map.len(), report.initial.len());
}
