//! Polarization indices and the initial-opinion vectors that maximise them
//! under the FJ map.
//!
//! The vector constructions follow the extremal characterisations:
//! `‖H u‖₁` over the unit cross-polytope peaks at a vertex `±e_j`, and
//! `‖H u‖₂` over an L2 ball peaks along the top right-singular vector of `H`.
//! The heuristic keeps the sign of that singular vector on its dominant
//! entries and zeroes the rest.

use std::io::Write;
use std::str::FromStr;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::fj::InfluenceMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolarizationMetric {
    /// Mean squared opinion.
    P2,
    /// Sum of squared opinions.
    P3,
    /// Sum of absolute opinions.
    P4,
}

impl PolarizationMetric {
    pub const ALL: [PolarizationMetric; 3] = [Self::P2, Self::P3, Self::P4];

    pub fn evaluate(self, x: &[f64]) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::InvalidParameter("polarization of an empty opinion vector".into()));
        }
        if x.iter().any(|v| v.abs() > 1.0 + 1e-12) {
            log::warn!("opinion vector leaves [-1,1]; polarization computed anyway");
        }
        let sq: f64 = x.iter().map(|v| v * v).sum();
        Ok(match self {
            Self::P2 => sq / x.len() as f64,
            Self::P3 => sq,
            Self::P4 => x.iter().map(|v| v.abs()).sum(),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::P2 => "P2",
            Self::P3 => "P3",
            Self::P4 => "P4",
        }
    }
}

impl FromStr for PolarizationMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            "P4" => Ok(Self::P4),
            other => Err(Error::InvalidParameter(format!("unknown metric {other:?}"))),
        }
    }
}

pub fn p2(x: &[f64]) -> Result<f64> {
    PolarizationMetric::P2.evaluate(x)
}

pub fn p3(x: &[f64]) -> Result<f64> {
    PolarizationMetric::P3.evaluate(x)
}

pub fn p4(x: &[f64]) -> Result<f64> {
    PolarizationMetric::P4.evaluate(x)
}

/// `Φ(z) - Φ(u)`: positive exactly when the dynamics polarised this input.
pub fn polarization_value(metric: PolarizationMetric, u: &[f64], z: &[f64]) -> Result<f64> {
    crate::fj::check_len(u.len(), z.len())?;
    Ok(metric.evaluate(z)? - metric.evaluate(u)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarizationReport {
    pub metric: PolarizationMetric,
    pub initial: f64,
    pub final_value: f64,
}

impl PolarizationReport {
    pub fn new(metric: PolarizationMetric, u: &[f64], z: &[f64]) -> Result<Self> {
        crate::fj::check_len(u.len(), z.len())?;
        Ok(Self { metric, initial: metric.evaluate(u)?, final_value: metric.evaluate(z)? })
    }

    pub fn delta(&self) -> f64 {
        self.final_value - self.initial
    }
}

/// `e_j*` where column `j*` of `H` has the largest L1 norm (first on ties).
pub fn polarizing_b1(h: &InfluenceMap) -> Vec<f64> {
    let m = h.matrix();
    let mut best = 0;
    let mut best_norm = f64::NEG_INFINITY;
    for j in 0..m.ncols() {
        let norm = m.column(j).iter().map(|v| v.abs()).sum::<f64>();
        if norm > best_norm {
            best_norm = norm;
            best = j;
        }
    }
    let mut u = vec![0.0; m.ncols()];
    u[best] = 1.0;
    u
}

pub const SINGULAR_TOL: f64 = 1e-10;
pub const SINGULAR_MAX_ITER: usize = 100_000;

/// Top right-singular pair of `H` by power iteration on `HᵀH`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularPair {
    /// Unit vector, largest-magnitude entry positive.
    pub vector: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub fn top_right_singular_vector(h: &InfluenceMap) -> SingularPair {
    let m = h.matrix();
    let n = m.ncols();
    let gram = m.transpose() * m;
    // Fixed, non-symmetric start so the output is reproducible.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 101) as f64 / 202.0);
    v.normalize_mut();
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=SINGULAR_MAX_ITER {
        iterations = it;
        let mut next = &gram * &v;
        let norm = next.norm();
        if norm == 0.0 {
            break;
        }
        next /= norm;
        let change = (&next - &v).amax();
        v = next;
        if change < SINGULAR_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!(
            "power iteration for the top singular vector stopped after {iterations} iterations without converging"
        );
    }
    let pivot = v.iamax();
    if v[pivot] < 0.0 {
        v.neg_mut();
    }
    let value = (m * &v).norm();
    SingularPair { vector: v.iter().copied().collect(), value, iterations, converged }
}

/// `radius · v₁`.
pub fn polarizing_b2(h: &InfluenceMap, radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("radius {radius} must be positive")));
    }
    Ok(top_right_singular_vector(h).vector.into_iter().map(|x| radius * x).collect())
}

/// `1/‖v₁‖_∞`: the largest radius that keeps `radius · v₁` inside `[-1,1]`.
pub fn default_b2_radius(h: &InfluenceMap) -> f64 {
    let v = top_right_singular_vector(h).vector;
    1.0 / v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `sign(v_i)` where `|v_i| ≥ α·max|v|`, else 0.
pub fn threshold_sign(v: &[f64], alpha: f64) -> Vec<f64> {
    let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut out: Vec<f64> =
        v.iter().map(|&x| if x.abs() >= alpha * peak && x != 0.0 { x.signum() } else { 0.0 }).collect();
    if out.iter().all(|&x| x == 0.0) {
        log::warn!("threshold {alpha} zeroed every entry; keeping the largest one");
        if let Some((k, &x)) = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())) {
            out[k] = if x < 0.0 { -1.0 } else { 1.0 };
        }
    }
    out
}

pub const DEFAULT_HEURISTIC_ALPHA: f64 = 0.1;

/// Extreme opinions on the dominant entries of `v₁`, neutral elsewhere.
pub fn polarizing_heuristic(h: &InfluenceMap, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("heuristic threshold {alpha} must lie in (0,1)")));
    }
    Ok(threshold_sign(&top_right_singular_vector(h).vector, alpha))
}

/// The four polarizing initial conditions for one influence map.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizingVectorSet {
    pub b1: Vec<f64>,
    pub b2_unit: Vec<f64>,
    pub b2_radius: Vec<f64>,
    pub radius: f64,
    pub heuristic: Vec<f64>,
    pub alpha: f64,
}

impl PolarizingVectorSet {
    pub fn build(h: &InfluenceMap, radius: Option<f64>, alpha: f64) -> Result<Self> {
        let radius = radius.unwrap_or_else(|| default_b2_radius(h));
        Ok(Self {
            b1: polarizing_b1(h),
            b2_unit: polarizing_b2(h, 1.0)?,
            b2_radius: polarizing_b2(h, radius)?,
            radius,
            heuristic: polarizing_heuristic(h, alpha)?,
            alpha,
        })
    }
}

/// `node,opinion` CSV preceded by one `#` provenance line.
pub fn write_opinions_csv<W: Write>(mut out: W, provenance: &str, values: &[f64]) -> Result<()> {
    writeln!(out, "# {provenance}")?;
    writeln!(out, "node,opinion")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(out, "{i},{v}")?;
    }
    Ok(())
}

/// Reads `node,opinion` CSV; `#` lines are skipped and every node must appear once.
pub fn read_opinions_csv<R: std::io::Read>(input: R, node_count: usize) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
    let mut values = vec![None; node_count];
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let line = k + 2;
        let parse_err = |what: &str| Error::Parse { line, message: format!("bad {what}") };
        let node: usize = record.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("node id"))?;
        let value: f64 = record.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("opinion"))?;
        if node >= node_count {
            return Err(Error::NodeOutOfRange { node, node_count });
        }
        if values[node].replace(value).is_some() {
            return Err(Error::Parse { line, message: format!("node {node} listed twice") });
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::InvalidParameter(format!("no opinion given for node {i}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn diag(values: &[f64]) -> InfluenceMap {
        InfluenceMap::from_matrix(DMatrix::from_diagonal(&DVector::from_column_slice(values))).unwrap()
    }

    #[test]
    fn metric_examples() {
        for m in PolarizationMetric::ALL {
            assert_eq!(m.evaluate(&[0.0; 4]).unwrap(), 0.0);
        }
        let x = [1.0, -1.0, 0.0];
        assert!((p2(&x).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p3(&x).unwrap(), 2.0);
        assert_eq!(p4(&x).unwrap(), 2.0);
        let ones = [1.0; 5];
        assert_eq!((p2(&ones).unwrap(), p3(&ones).unwrap(), p4(&ones).unwrap()), (1.0, 5.0, 5.0));
        assert!(p2(&[]).is_err());
    }

    #[test]
    fn polarization_value_examples() {
        let u = [0.2, -0.4];
        assert_eq!(polarization_value(PolarizationMetric::P4, &u, &u).unwrap(), 0.0);
        // FJ on the 3-node path with λ = 0.5 maps (1,0,-1) to (0.5,0,-0.5)
        let d = polarization_value(PolarizationMetric::P4, &[1.0, 0.0, -1.0], &[0.5, 0.0, -0.5]).unwrap();
        assert_eq!(d, -1.0);
        assert_eq!(polarization_value(PolarizationMetric::P3, &[0.0, 0.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert!(polarization_value(PolarizationMetric::P3, &[0.0], &[1.0, -1.0]).is_err());
        let r = PolarizationReport::new(PolarizationMetric::P2, &[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(r.delta(), 0.5);
    }

    #[test]
    fn b1_picks_dominant_column() {
        assert_eq!(polarizing_b1(&diag(&[2.0, 1.0])), vec![1.0, 0.0]);
        assert_eq!(polarizing_b1(&diag(&[1.0, 1.0, 1.0])), vec![1.0, 0.0, 0.0]);
        assert_eq!(polarizing_b1(&diag(&[1.0, 3.0])), vec![0.0, 1.0]);
    }

    #[test]
    fn b2_on_diagonal() {
        let u = polarizing_b2(&diag(&[2.0, 1.0]), 1.0).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-9 && u[1].abs() < 1e-5);
        let u = polarizing_b2(&diag(&[2.0, 1.0]), 0.5).unwrap();
        assert!((u[0] - 0.5).abs() < 1e-9);
        assert!(polarizing_b2(&diag(&[2.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn b2_on_identity_is_reproducible_unit_vector() {
        let a = polarizing_b2(&diag(&[1.0; 4]), 1.0).unwrap();
        let b = polarizing_b2(&diag(&[1.0; 4]), 1.0).unwrap();
        assert_eq!(a, b);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_vector_matches_svd() {
        let m = DMatrix::from_row_slice(3, 3, &[0.6, 0.2, 0.1, 0.1, 0.5, 0.3, 0.2, 0.2, 0.4]);
        let h = InfluenceMap::from_matrix(m.clone()).unwrap();
        let pair = top_right_singular_vector(&h);
        let svd = m.svd(true, true);
        let k = svd.singular_values.imax();
        let mut v: Vec<f64> = svd.v_t.unwrap().row(k).iter().copied().collect();
        let pivot = v.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        assert!(pair.converged);
        assert!((pair.value - svd.singular_values[k]).abs() < 1e-9);
        for (a, b) in pair.vector.iter().zip(&v) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn threshold_sign_examples() {
        assert_eq!(threshold_sign(&[0.9, 0.05, -0.8], 0.1), vec![1.0, 0.0, -1.0]);
        assert_eq!(threshold_sign(&[0.9, 0.05, -0.8], 0.999), vec![1.0, 0.0, 0.0]);
        assert_eq!(threshold_sign(&[0.5, -0.5, 0.1], 0.99), vec![1.0, -1.0, 0.0]);
        assert!(polarizing_heuristic(&diag(&[1.0, 2.0]), 1.0).is_err());
    }

    #[test]
    fn opinions_csv_round_trip() {
        let mut buf = Vec::new();
        write_opinions_csv(&mut buf, "construction=test", &[0.5, -1.0, 0.0]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# construction=test\nnode,opinion\n"));
        assert_eq!(read_opinions_csv(buf.as_slice(), 3).unwrap(), vec![0.5, -1.0, 0.0]);
        assert!(read_opinions_csv(buf.as_slice(), 4).is_err());
        assert!(read_opinions_csv("node,opinion\n0,1\n0,2\n".as_bytes(), 1).is_err());
    }
}
