use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fjc_core::cascade::{predecessors, sample_cascade, trace_from_realizations, ReshareModel};
use fjc_core::experiment::{Ecdf, ExperimentConfig};
use fjc_core::fj::{fj_fixed_point, fj_step, influence_map, Susceptibility};
use fjc_core::fjc::{FjcEngine, SeedSchedule, UpdateMode};
use fjc_core::graph::{follower_layers, InfluenceMatrix, SocialGraph};
use fjc_core::polarization::{polarizing_b1, polarizing_b2, polarizing_heuristic};
use fjc_core::{estimate_theta, fj_residual};

/// Digraph on `n` nodes where node `i` always follows `(i + 1 + off_i) % n`,
/// plus extra edges from `extra`.
fn graph_strategy() -> impl Strategy<Value = SocialGraph> {
    (2usize..14)
        .prop_flat_map(|n| (Just(n), prop::collection::vec(0..n - 1, n), prop::collection::vec((0..n, 0..n), 0..3 * n)))
        .prop_map(|(n, offs, extra)| {
            let mut edges: Vec<(usize, usize)> = offs.iter().enumerate().map(|(i, o)| (i, (i + 1 + o) % n)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            SocialGraph::from_edges(n, edges).unwrap()
        })
}

fn setup_strategy() -> impl Strategy<Value = (SocialGraph, Vec<f64>, Vec<f64>)> {
    graph_strategy().prop_flat_map(|g| {
        let n = g.node_count();
        (Just(g), prop::collection::vec(0.0..0.95f64, n), prop::collection::vec(-1.0..=1.0f64, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn influence_rows_are_stochastic(g in graph_strategy()) {
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        for i in 0..g.node_count() {
            prop_assert!((w.matrix().row_sum(i) - 1.0).abs() < 1e-12);
            prop_assert_eq!(w.row(i).0, g.followees(i));
        }
    }

    #[test]
    fn fixed_point_is_a_fixed_point((g, lambda, u) in setup_strategy()) {
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let lambda = Susceptibility::new(lambda).unwrap();
        let z = fj_fixed_point(&w, &lambda, &u).unwrap();
        let rhs: Vec<f64> = u.iter().zip(lambda.values()).map(|(u, l)| (1.0 - l) * u).collect();
        prop_assert!(fj_residual(&w, lambda.values(), &z, &rhs) < 1e-10);
        let again = fj_step(&z, &w, &lambda, &u).unwrap();
        for (a, b) in again.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        // convex combination of prejudices
        prop_assert!(z.iter().all(|x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn cascade_layers_respect_bfs(g in graph_strategy(), theta in 0.0..=1.0f64, seed in any::<u64>()) {
        let model = ReshareModel::global(theta).unwrap();
        let root = (seed as usize) % g.node_count();
        let o = follower_layers(&g, root).unwrap();
        let c = sample_cascade(&g, root, &model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(c.layers()[0].as_slice(), &[root][..]);
        if o.eccentricity() > 0 {
            prop_assert_eq!(c.layers()[1].as_slice(), o.layer(1));
        }
        let mut seen = std::collections::HashSet::new();
        for (l, layer) in c.layers().iter().enumerate() {
            for &i in layer {
                prop_assert!(seen.insert(i), "node {} placed twice", i);
                prop_assert_eq!(o.distance(i), Some(l));
                if l == 0 {
                    continue;
                }
                let phi = predecessors(&c, i).unwrap();
                prop_assert!(!phi.is_empty());
                for &j in phi {
                    prop_assert!(l == 1 || g.has_edge(i, j));
                    prop_assert_eq!(c.position(j).map(|p| p.0), Some(l - 1));
                    prop_assert_eq!(c.reshared(j), Some(true));
                }
            }
        }
        // nodes in the deepest BFS layer never reshare
        if c.depth() == o.eccentricity() && c.depth() > 0 {
            prop_assert!(c.layer_reshared(c.depth()).iter().all(|s| !s));
        }
        prop_assert!(c.size() <= o.reachable_count());
    }

    #[test]
    fn convex_runs_stay_in_domain((g, lambda, u) in setup_strategy(), theta in 0.0..=1.0f64, seed in any::<u64>()) {
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let lambda = Susceptibility::new(lambda).unwrap();
        let n = g.node_count();
        let roots = (0..4).map(|k| (seed as usize + 3 * k) % n).collect();
        let schedule = SeedSchedule::new(&g, roots).unwrap();
        let engine = FjcEngine::new(&g, &w, &lambda, UpdateMode::Convex).unwrap().with_update_log(true);
        let prepared = engine.prepare(&schedule).unwrap();
        let model = ReshareModel::global(theta).unwrap();
        let rec = engine.run(&u, &prepared, &model, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(rec.final_opinions.iter().all(|x| (-1.0..=1.0).contains(x)));
        prop_assert_eq!(rec.cascades.len(), 4);
        // nodes that were never updated keep their prejudice
        let updated: std::collections::HashSet<usize> =
            rec.cascades.iter().flat_map(|c| c.updates.iter().map(|up| up.node)).collect();
        for i in (0..n).filter(|i| !updated.contains(i)) {
            prop_assert_eq!(rec.final_opinions[i], u[i]);
        }
    }

    #[test]
    fn ecdf_is_a_distribution(values in prop::collection::vec(-2.0..2.0f64, 1..200)) {
        let e = Ecdf::from_samples(values.clone());
        prop_assert_eq!(e.samples, values.len());
        prop_assert!((e.points.last().unwrap().1 - 1.0).abs() < 1e-15);
        for pair in e.points.windows(2) {
            prop_assert!(pair[0].0 < pair[1].0);
            prop_assert!(pair[0].1 < pair[1].1);
        }
        for &v in &values {
            let below = values.iter().filter(|&&x| x <= v).count() as f64 / values.len() as f64;
            prop_assert!((e.eval(v) - below).abs() < 1e-12);
        }
        prop_assert_eq!(e.ks_distance(&e), 0.0);
    }

    #[test]
    fn polarizing_vector_norms(g in graph_strategy(), lambda in 0.05..0.95f64, radius in 0.1..3.0f64) {
        let n = g.node_count();
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let h = influence_map(&w, &Susceptibility::uniform(n, lambda).unwrap(), 5000).unwrap();
        let b1 = polarizing_b1(&h);
        prop_assert!((b1.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        let b2 = polarizing_b2(&h, radius).unwrap();
        prop_assert!((b2.iter().map(|v| v * v).sum::<f64>().sqrt() - radius).abs() < 1e-12);
        let heu = polarizing_heuristic(&h, 0.1).unwrap();
        prop_assert!(heu.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
        prop_assert!(heu.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn trace_estimates_are_probabilities(g in graph_strategy(), seed in any::<u64>()) {
        let model = ReshareModel::global(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.node_count();
        let cs: Vec<_> = (0..3).map(|k| sample_cascade(&g, (seed as usize + k) % n, &model, &mut rng).unwrap()).collect();
        let est = estimate_theta(&trace_from_realizations(&cs), &g, 0.0).unwrap();
        for row in &est.rows {
            if let Some(t) = row.theta {
                prop_assert!((0.0..=1.0).contains(&t));
                prop_assert!(row.reshared <= row.seen);
            }
        }
    }
}

#[test]
fn config_text_round_trips_for_defaults() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap(), cfg);
}
