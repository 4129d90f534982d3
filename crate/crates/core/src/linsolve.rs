//! Solvers for the fixed-point system `(I - ΛW) z = b`.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};
use crate::graph::InfluenceMatrix;

/// Above this many nodes the dense LU gives way to Gauss–Seidel.
pub const DENSE_SOLVE_LIMIT: usize = 3_000;
pub const ITERATIVE_TOL: f64 = 1e-12;
pub const ITERATIVE_MAX_ITER: usize = 100_000;
const REFINEMENT_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverChoice {
    #[default]
    Auto,
    DenseLu,
    GaussSeidel,
}

/// `‖(I - ΛW) z - b‖_∞`.
pub fn fj_residual(w: &InfluenceMatrix, lambda: &[f64], z: &[f64], rhs: &[f64]) -> f64 {
    (0..w.dim())
        .map(|i| {
            let (cols, vals) = w.row(i);
            let wz: f64 = cols.iter().zip(vals).map(|(&j, &wij)| wij * z[j]).sum();
            (z[i] - lambda[i] * wz - rhs[i]).abs()
        })
        .fold(0.0, f64::max)
}

/// Prepared operator `I - ΛW`, factorised up front when dense.
pub(crate) struct FjOperator<'a> {
    w: &'a InfluenceMatrix,
    lambda: &'a [f64],
    lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl<'a> FjOperator<'a> {
    pub fn new(w: &'a InfluenceMatrix, lambda: &'a [f64], choice: SolverChoice) -> Self {
        let n = w.dim();
        let dense = match choice {
            SolverChoice::Auto => n <= DENSE_SOLVE_LIMIT,
            SolverChoice::DenseLu => true,
            SolverChoice::GaussSeidel => false,
        };
        let lu = dense.then(|| {
            let mut a = DMatrix::<f64>::identity(n, n);
            for i in 0..n {
                let (cols, vals) = w.row(i);
                for (&j, &wij) in cols.iter().zip(vals) {
                    a[(i, j)] -= lambda[i] * wij;
                }
            }
            a.lu()
        });
        Self { w, lambda, lu }
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match &self.lu {
            Some(lu) => self.solve_dense(lu, rhs),
            None => self.solve_gauss_seidel(rhs),
        }
    }

    fn solve_dense(&self, lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, rhs: &[f64]) -> Result<Vec<f64>> {
        let b = DVector::from_column_slice(rhs);
        let mut z = lu
            .solve(&b)
            .ok_or_else(|| Error::Singular("I - ΛW has a zero pivot; is Λ = I or the graph disconnected?".into()))?;
        for _ in 0..REFINEMENT_ROUNDS {
            let r = self.residual_vector(z.as_slice(), rhs);
            if r.iter().fold(0.0f64, |m, v| m.max(v.abs())) < ITERATIVE_TOL {
                break;
            }
            if let Some(dz) = lu.solve(&DVector::from_vec(r)) {
                z += dz;
            }
        }
        let z: Vec<f64> = z.iter().copied().collect();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("solution is not finite".into()));
        }
        Ok(z)
    }

    /// `rhs - (I - ΛW) z`.
    fn residual_vector(&self, z: &[f64], rhs: &[f64]) -> Vec<f64> {
        (0..self.w.dim())
            .map(|i| {
                let (cols, vals) = self.w.row(i);
                let wz: f64 = cols.iter().zip(vals).map(|(&j, &wij)| wij * z[j]).sum();
                rhs[i] - (z[i] - self.lambda[i] * wz)
            })
            .collect()
    }

    fn solve_gauss_seidel(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.w.dim();
        let mut z = rhs.to_vec();
        let mut residual = f64::INFINITY;
        for _ in 0..ITERATIVE_MAX_ITER {
            for i in 0..n {
                let (cols, vals) = self.w.row(i);
                let mut off = 0.0;
                let mut diag = 0.0;
                for (&j, &wij) in cols.iter().zip(vals) {
                    if j == i {
                        diag += wij;
                    } else {
                        off += wij * z[j];
                    }
                }
                z[i] = (rhs[i] + self.lambda[i] * off) / (1.0 - self.lambda[i] * diag);
            }
            residual = fj_residual(self.w, self.lambda, &z, rhs);
            if residual < ITERATIVE_TOL {
                return Ok(z);
            }
        }
        Err(Error::NotConverged { method: "gauss-seidel", iterations: ITERATIVE_MAX_ITER, residual, last: z })
    }
}
