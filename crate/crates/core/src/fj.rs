//! Classical Friedkin–Johnsen dynamics: the synchronous update, its closed
//! form fixed point, the asynchronous gossip variant, and the dense map from
//! prejudices to final opinions.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{degree_for_gossip, InfluenceMatrix, NodeId, SocialGraph};
use crate::linsolve::{fj_residual, FjOperator, SolverChoice};

/// Per-node susceptibility `λ_i ∈ [0,1]`, with at least one node partially
/// anchored (`λ_i < 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Susceptibility(Vec<f64>);

impl Susceptibility {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("susceptibility of node {i} is {v}, outside [0,1]")));
        }
        if values.iter().all(|&v| v == 1.0) {
            return Err(Error::InvalidParameter(
                "all susceptibilities equal 1 (Λ = I): the dynamics reduce to DeGroot averaging and have no unique fixed point".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn uniform(node_count: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; node_count])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<NodeId> for Susceptibility {
    type Output = f64;
    fn index(&self, i: NodeId) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, got })
    }
}

/// One synchronous step: `x'_i = λ_i Σ_j w_ij x_j + (1 - λ_i) u_i`.
pub fn fj_step(x: &[f64], w: &InfluenceMatrix, lambda: &Susceptibility, u: &[f64]) -> Result<Vec<f64>> {
    let n = w.dim();
    check_len(n, x.len())?;
    check_len(n, u.len())?;
    check_len(n, lambda.len())?;
    let mut next = vec![0.0; n];
    step_into(x, w, lambda.values(), u, &mut next);
    Ok(next)
}

fn step_into(x: &[f64], w: &InfluenceMatrix, lambda: &[f64], u: &[f64], out: &mut [f64]) {
    for (i, slot) in out.iter_mut().enumerate() {
        let (cols, vals) = w.row(i);
        let social: f64 = cols.iter().zip(vals).map(|(&j, &wij)| wij * x[j]).sum();
        *slot = lambda[i] * social + (1.0 - lambda[i]) * u[i];
    }
}

fn rhs(lambda: &[f64], u: &[f64]) -> Vec<f64> {
    lambda.iter().zip(u).map(|(l, ui)| (1.0 - l) * ui).collect()
}

/// Stable opinions `z = (I - ΛW)⁻¹ (I - Λ) u`, by direct solve.
pub fn fj_fixed_point(w: &InfluenceMatrix, lambda: &Susceptibility, u: &[f64]) -> Result<Vec<f64>> {
    fj_fixed_point_with(w, lambda, u, SolverChoice::Auto)
}

pub fn fj_fixed_point_with(
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
    u: &[f64],
    solver: SolverChoice,
) -> Result<Vec<f64>> {
    let n = w.dim();
    check_len(n, u.len())?;
    check_len(n, lambda.len())?;
    let b = rhs(lambda.values(), u);
    let z = FjOperator::new(w, lambda.values(), solver).solve(&b)?;
    let residual = fj_residual(w, lambda.values(), &z, &b);
    if residual >= 1e-10 {
        return Err(Error::Singular(format!("fixed-point residual {residual:e} after solve")));
    }
    Ok(z)
}

/// Iterates [`fj_step`] from `x(0) = u` until the sup-norm change is below `tol`.
pub fn fj_iterate_until(
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
    u: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = w.dim();
    check_len(n, u.len())?;
    check_len(n, lambda.len())?;
    let mut x = u.to_vec();
    let mut next = vec![0.0; n];
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        step_into(&x, w, lambda.values(), u, &mut next);
        change = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut next);
        if change < tol {
            return Ok(x);
        }
    }
    Err(Error::NotConverged { method: "fj iteration", iterations: max_iter, residual: change, last: x })
}

/// Gossip coefficients `h_i` and `γ_ij`, stored on the sparsity of `W`
/// plus the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipParameters {
    h: Vec<f64>,
    row_offsets: Vec<usize>,
    cols: Vec<NodeId>,
    gamma: Vec<f64>,
    gamma_diag: Vec<f64>,
}

impl GossipParameters {
    pub fn h(&self, i: NodeId) -> f64 {
        self.h[i]
    }

    pub fn h_values(&self) -> &[f64] {
        &self.h
    }

    /// `γ_ij`; zero off the sparsity pattern.
    pub fn gamma(&self, i: NodeId, j: NodeId) -> f64 {
        if i == j {
            return self.gamma_diag[i];
        }
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        self.cols[range.clone()].binary_search(&j).map_or(0.0, |k| self.gamma[range.start + k])
    }

    pub fn gamma_row(&self, i: NodeId) -> (&[NodeId], &[f64]) {
        let range = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.cols[range.clone()], &self.gamma[range])
    }

    /// Convenience constructor that takes `d_i` from the graph.
    pub fn from_graph(g: &SocialGraph, w: &InfluenceMatrix, lambda: &Susceptibility) -> Result<Self> {
        let degrees = (0..g.node_count()).map(|i| degree_for_gossip(g, i)).collect::<Result<Vec<_>>>()?;
        gossip_parameters(w, lambda, &degrees)
    }
}

/// `h_i = 1 - (1 - λ_i)/d_i`, `γ_ij = λ_i w_ij / h_i` for `i ≠ j`, and
/// `γ_ii = (d_i(1 - h_i) + h_i - (1 - λ_i w_ii)) / h_i`.
///
/// When `h_i = 0` (λ_i = 0 and d_i = 1) the node is fully anchored and its
/// γ row is set to zero.
pub fn gossip_parameters(w: &InfluenceMatrix, lambda: &Susceptibility, degrees: &[usize]) -> Result<GossipParameters> {
    let n = w.dim();
    check_len(n, lambda.len())?;
    check_len(n, degrees.len())?;
    let m = w.matrix();
    let mut h = Vec::with_capacity(n);
    let mut gamma = vec![0.0; m.nnz()];
    let mut gamma_diag = vec![0.0; n];
    for i in 0..n {
        let d = degrees[i];
        if d == 0 {
            return Err(Error::NoFollowees { node: i });
        }
        let li = lambda[i];
        let hi = 1.0 - (1.0 - li) / d as f64;
        h.push(hi);
        if hi <= 0.0 {
            log::warn!("node {i}: h_i = 0 (λ_i = 0, d_i = 1); gossip row set to zero, node stays at its prejudice");
            continue;
        }
        let wii = m.get(i, i);
        gamma_diag[i] = (d as f64 * (1.0 - hi) + hi - (1.0 - li * wii)) / hi;
        let range = m.row_offsets()[i]..m.row_offsets()[i + 1];
        for k in range {
            gamma[k] = li * m.values()[k] / hi;
        }
    }
    Ok(GossipParameters { h, row_offsets: m.row_offsets().to_vec(), cols: m.cols().to_vec(), gamma, gamma_diag })
}

/// Result of an asynchronous run.
#[derive(Debug, Clone, PartialEq)]
pub struct AsyncOutcome {
    pub last: Vec<f64>,
    /// Average of `x(0), …, x(steps)`.
    pub time_average: Vec<f64>,
}

/// Asynchronous gossip FJ. Each step picks a follow edge `(i, j)` uniformly
/// and moves the follower `i` towards its followee `j`:
/// `x_i ← h_i[(1 - γ_ij) x_i + γ_ij x_j] + (1 - h_i) u_i`.
pub fn fj_async_run<R: Rng + ?Sized>(
    g: &SocialGraph,
    w: &InfluenceMatrix,
    lambda: &Susceptibility,
    u: &[f64],
    steps: u64,
    rng: &mut R,
) -> Result<AsyncOutcome> {
    let n = g.node_count();
    check_len(n, w.dim())?;
    check_len(n, u.len())?;
    let params = GossipParameters::from_graph(g, w, lambda)?;
    let m = w.matrix();
    let entry_row: Vec<NodeId> =
        (0..n).flat_map(|i| std::iter::repeat_n(i, m.row_offsets()[i + 1] - m.row_offsets()[i])).collect();

    let mut x = u.to_vec();
    // Running sums are only touched when a value changes: node i has held
    // x[i] since time since[i].
    let mut sum = vec![0.0; n];
    let mut since = vec![0u64; n];
    for t in 1..=steps {
        let k = rng.random_range(0..m.nnz());
        let i = entry_row[k];
        let j = m.cols()[k];
        let hi = params.h[i];
        let gij = params.gamma[k];
        let new = hi * ((1.0 - gij) * x[i] + gij * x[j]) + (1.0 - hi) * u[i];
        sum[i] += x[i] * (t - since[i]) as f64;
        since[i] = t;
        x[i] = new;
    }
    let total = (steps + 1) as f64;
    let time_average = (0..n).map(|i| (sum[i] + x[i] * (steps + 1 - since[i]) as f64) / total).collect();
    Ok(AsyncOutcome { last: x, time_average })
}

/// Dense influence map `H = (I - ΛW)⁻¹ (I - Λ)`, mapping prejudices to
/// stable opinions.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMap(DMatrix<f64>);

pub const DEFAULT_INFLUENCE_MAP_CAP: usize = 5_000;

impl InfluenceMap {
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::InvalidParameter(format!(
                "influence map must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        (&self.0 * nalgebra::DVector::from_column_slice(u)).iter().copied().collect()
    }

    /// Little-endian `u64` dimension followed by the row-major `f64` entries.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.dim();
        out.write_all(&(n as u64).to_le_bytes())?;
        for i in 0..n {
            for j in 0..n {
                out.write_all(&self.0[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: std::io::Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let n = u64::from_le_bytes(word) as usize;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                input.read_exact(&mut word)?;
                m[(i, j)] = f64::from_le_bytes(word);
            }
        }
        Self::from_matrix(m)
    }
}

/// Builds `H` column by column: column `j` solves `(I - ΛW) h = (1 - λ_j) e_j`.
pub fn influence_map(w: &InfluenceMatrix, lambda: &Susceptibility, cap: usize) -> Result<InfluenceMap> {
    let n = w.dim();
    check_len(n, lambda.len())?;
    if n > cap {
        return Err(Error::TooLarge(format!(
            "the dense influence map for {n} nodes needs {:.1} GiB; cap is {cap} nodes (extract a subgraph or raise the cap)",
            (n * n * 8) as f64 / (1u64 << 30) as f64
        )));
    }
    let op = FjOperator::new(w, lambda.values(), SolverChoice::Auto);
    let columns = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0 - lambda[j];
            op.solve(&e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (j, col) in columns.iter().enumerate() {
        m.set_column(j, &nalgebra::DVector::from_column_slice(col));
    }
    Ok(InfluenceMap(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{directed_cycle, karate_club, path_graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> (SocialGraph, InfluenceMatrix) {
        let g = path_graph(3).unwrap();
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        (g, w)
    }

    /// Hand solution of the path instance: with λ = 0.5 and u = (1,0,-1),
    /// z_1 = 0.5 z_2 + 0.5, z_2 = 0.25 (z_1 + z_3), z_3 = 0.5 z_2 - 0.5;
    /// antisymmetry forces z_2 = 0, hence z = (0.5, 0, -0.5).
    const PATH_Z: [f64; 3] = [0.5, 0.0, -0.5];

    #[test]
    fn step_with_zero_susceptibility_returns_prejudice() {
        let (_, w) = path3();
        let lambda = Susceptibility::uniform(3, 0.0).unwrap();
        let u = [0.3, -0.2, 0.9];
        assert_eq!(fj_step(&[1.0, 1.0, 1.0], &w, &lambda, &u).unwrap(), u.to_vec());
    }

    #[test]
    fn consensus_is_fixed_under_full_averaging() {
        let w = InfluenceMatrix::from_graph(&directed_cycle(5).unwrap()).unwrap();
        // fj_step itself does not need Λ ≠ I; bypass the constructor check.
        let lambda = Susceptibility(vec![1.0; 5]);
        let x = vec![0.4; 5];
        let next = fj_step(&x, &w, &lambda, &[0.0; 5]).unwrap();
        for v in next {
            assert!((v - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn step_on_path() {
        let (_, w) = path3();
        let lambda = Susceptibility::uniform(3, 0.5).unwrap();
        let u = [1.0, 0.0, -1.0];
        assert_eq!(fj_step(&u, &w, &lambda, &u).unwrap(), PATH_Z.to_vec());
    }

    #[test]
    fn step_shape_mismatch() {
        let (_, w) = path3();
        let lambda = Susceptibility::uniform(3, 0.5).unwrap();
        assert!(matches!(
            fj_step(&[0.0; 2], &w, &lambda, &[0.0; 3]),
            Err(Error::ShapeMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn susceptibility_validation() {
        assert!(Susceptibility::uniform(3, 1.0).is_err());
        assert!(Susceptibility::new(vec![0.5, 1.2]).is_err());
        assert!(Susceptibility::new(vec![1.0, 0.999]).is_ok());
    }

    #[test]
    fn fixed_point_examples() {
        let (_, w) = path3();
        let u = [1.0, 0.0, -1.0];
        let z = fj_fixed_point(&w, &Susceptibility::uniform(3, 0.5).unwrap(), &u).unwrap();
        for (a, b) in z.iter().zip(PATH_Z) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = fj_fixed_point(&w, &Susceptibility::uniform(3, 0.0).unwrap(), &u).unwrap();
        assert_eq!(z, u.to_vec());
    }

    #[test]
    fn solvers_agree_on_karate() {
        let g = karate_club();
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let lambda = Susceptibility::new((0..34).map(|i| 0.1 + 0.8 * (i as f64 / 33.0)).collect()).unwrap();
        let u: Vec<f64> = (0..34).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let dense = fj_fixed_point_with(&w, &lambda, &u, SolverChoice::DenseLu).unwrap();
        let gs = fj_fixed_point_with(&w, &lambda, &u, SolverChoice::GaussSeidel).unwrap();
        for (a, b) in dense.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn iteration_examples() {
        let (_, w) = path3();
        let u = [1.0, 0.0, -1.0];
        let x = fj_iterate_until(&w, &Susceptibility::uniform(3, 0.0).unwrap(), &u, 1e-12, 1).unwrap();
        assert_eq!(x, u.to_vec());
        let x = fj_iterate_until(&w, &Susceptibility::uniform(3, 0.5).unwrap(), &u, 1e-12, 1000).unwrap();
        for (a, b) in x.iter().zip(PATH_Z) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn iteration_reports_last_residual() {
        let g = karate_club();
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let u: Vec<f64> = (0..34).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        match fj_iterate_until(&w, &Susceptibility::uniform(34, 0.9).unwrap(), &u, 1e-12, 3) {
            Err(Error::NotConverged { iterations, residual, last, .. }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 1e-12);
                assert_eq!(last.len(), 34);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gossip_parameter_examples() {
        // node 1 of the path has two followees, each weighted 0.5
        let (_, w) = path3();
        let lambda = Susceptibility::uniform(3, 0.5).unwrap();
        let p = gossip_parameters(&w, &lambda, &[1, 2, 1]).unwrap();
        assert_eq!(p.h(1), 0.75);
        assert!((p.gamma(1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.gamma(0, 2), 0.0);
        // diagonal: (d(1-h) + h - 1) / h with w_ii = 0
        assert!((p.gamma(1, 1) - (2.0 * 0.25 + 0.75 - 1.0) / 0.75).abs() < 1e-15);

        let lambda = Susceptibility::new(vec![0.0, 0.5, 0.5]).unwrap();
        let p = gossip_parameters(&w, &lambda, &[1, 2, 1]).unwrap();
        assert_eq!(p.h(0), 0.0);
        assert_eq!(p.gamma(0, 1), 0.0);

        assert!(matches!(gossip_parameters(&w, &lambda, &[1, 0, 1]), Err(Error::NoFollowees { node: 1 })));
    }

    #[test]
    fn async_run_without_steps_averages_to_prejudice() {
        let (g, w) = path3();
        let u = [1.0, 0.0, -1.0];
        let out =
            fj_async_run(&g, &w, &Susceptibility::uniform(3, 0.5).unwrap(), &u, 0, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert_eq!(out.time_average, u.to_vec());
        assert_eq!(out.last, u.to_vec());
    }

    #[test]
    fn async_run_keeps_consensus() {
        let g = directed_cycle(4).unwrap();
        let w = InfluenceMatrix::from_graph(&g).unwrap();
        let lambda = Susceptibility(vec![1.0; 4]);
        let u = vec![-0.3; 4];
        let out = fj_async_run(&g, &w, &lambda, &u, 10_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for (a, b) in out.last.iter().zip(&out.time_average) {
            assert!((a + 0.3).abs() < 1e-15 && (b + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn async_time_average_tracks_fixed_point_on_path() {
        let (g, w) = path3();
        let lambda = Susceptibility::uniform(3, 0.5).unwrap();
        let u = [1.0, 0.0, -1.0];
        let out = fj_async_run(&g, &w, &lambda, &u, 1_000_000, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        for (a, b) in out.time_average.iter().zip(PATH_Z) {
            assert!((a - b).abs() < 0.02, "{:?}", out.time_average);
        }
    }

    #[test]
    fn influence_map_examples() {
        let (_, w) = path3();
        let h = influence_map(&w, &Susceptibility::uniform(3, 0.0).unwrap(), 10).unwrap();
        assert_eq!(h.matrix(), &DMatrix::<f64>::identity(3, 3));
        let h = influence_map(&w, &Susceptibility::uniform(3, 0.5).unwrap(), 10).unwrap();
        for (a, b) in h.apply(&[1.0, 0.0, -1.0]).iter().zip(PATH_Z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(influence_map(&w, &Susceptibility::uniform(3, 0.5).unwrap(), 2), Err(Error::TooLarge(_))));
    }

    #[test]
    fn influence_map_binary_layout() {
        let (_, w) = path3();
        let h = influence_map(&w, &Susceptibility::uniform(3, 0.5).unwrap(), 10).unwrap();
        let mut buf = Vec::new();
        h.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 9 * 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        assert_eq!(&buf[8..16], &h.matrix()[(0, 0)].to_le_bytes());
        assert_eq!(&buf[16..24], &h.matrix()[(0, 1)].to_le_bytes());
        assert_eq!(InfluenceMap::read_binary(buf.as_slice()).unwrap(), h);
    }
}
