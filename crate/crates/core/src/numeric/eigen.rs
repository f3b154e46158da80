//! Dominant eigenvalue of symmetric positive-semidefinite matrices by power
//! iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
pub const RAYLEIGH_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 10_000;
/// Largest accepted `‖Sv − ρv‖ / max(1, ρ)` before the estimate is polished.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;
const MAX_SQUARINGS: usize = 64;
const RESTART_SEED: u64 = 0x005e_ed0f_e16e;

/// Outcome of a power-iteration solve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenEstimate {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// `true` when successive Rayleigh quotients met the tolerance, `false`
    /// when the iteration cap was hit.
    pub converged: bool,
    pub restarted: bool,
    /// Iterations spent on powers `S^(2^k)` after plain iteration stalled
    /// short of the residual tolerance (nearly repeated top eigenvalues).
    pub polish_steps: usize,
}

/// Largest eigenvalue of a symmetric PSD matrix.
///
/// The input is symmetrized as `(S + S^T)/2` after checking its asymmetry is
/// within [`SYMMETRY_TOLERANCE`]. Iteration starts from the normalized
/// all-ones vector; if the Rayleigh quotient stagnates at zero (the start
/// vector lies in the null space) it restarts once from a fixed-seed random
/// vector.
pub fn dominant_eigenvalue(s: &Matrix) -> Result<EigenEstimate> {
    let asym = s.max_asymmetry().ok_or(Error::Shape {
        op: "dominant_eigenvalue",
        left: s.shape(),
        right: (s.cols(), s.rows()),
    })?;
    if asym > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let sym = s.symmetrized();
    let n = sym.rows();
    if n == 0 {
        return Ok(EigenEstimate {
            value: 0.0,
            vector: Vec::new(),
            iterations: 0,
            converged: true,
            restarted: false,
            polish_steps: 0,
        });
    }

    let start = vec![1.0 / (n as f64).sqrt(); n];
    let mut est = iterate(&sym, start);
    if est.value.abs() < f64::EPSILON * sym.frobenius_norm().max(1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let iterations = est.iterations;
        est = iterate(&sym, v);
        est.iterations += iterations;
        est.restarted = true;
    }
    if residual(&sym, &est) > RESIDUAL_TOLERANCE * est.value.abs().max(1.0) {
        est = polish(&sym, est);
    }
    Ok(est)
}

fn residual(s: &Matrix, est: &EigenEstimate) -> f64 {
    let w = s.mul_vec(&est.vector);
    let r: Vec<f64> = w.iter().zip(&est.vector).map(|(a, b)| a - est.value * b).collect();
    norm(&r)
}

/// Power iteration on repeated squares of `S`: the step matrix after `k`
/// squarings is `S^(2^k)` (rescaled), which separates a close second
/// eigenvalue in `O(log)` rather than `O(1/gap)` steps.
fn polish(s: &Matrix, mut est: EigenEstimate) -> EigenEstimate {
    let scale = s.frobenius_norm();
    if scale == 0.0 || est.vector.is_empty() {
        return est;
    }
    let mut step = s.scale(1.0 / scale);
    let mut prev = est.value;
    for k in 1..=MAX_SQUARINGS {
        step = step.matmul(&step);
        let fro = step.frobenius_norm();
        if fro == 0.0 {
            break;
        }
        step = step.scale(1.0 / fro);
        let w = step.mul_vec(&est.vector);
        let nw = norm(&w);
        if nw == 0.0 {
            break;
        }
        est.vector = w.into_iter().map(|x| x / nw).collect();
        est.value = dot(&est.vector, &s.mul_vec(&est.vector));
        est.polish_steps = k;
        let settled = (est.value - prev).abs() < RAYLEIGH_TOLERANCE;
        if settled && residual(s, &est) <= RESIDUAL_TOLERANCE * est.value.abs().max(1.0) {
            est.converged = true;
            break;
        }
        prev = est.value;
    }
    est
}

fn iterate(s: &Matrix, mut v: Vec<f64>) -> EigenEstimate {
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut prev = f64::NAN;
    for it in 1..=MAX_ITERATIONS {
        let w = s.mul_vec(&v);
        let rq = dot(&v, &w);
        let nw = norm(&w);
        if nw == 0.0 {
            // v is in the null space: the quotient is exactly zero.
            return EigenEstimate {
                value: 0.0,
                vector: v,
                iterations: it,
                converged: true,
                restarted: false,
                polish_steps: 0,
            };
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (rq - prev).abs() < RAYLEIGH_TOLERANCE {
            let w = s.mul_vec(&v);
            return EigenEstimate {
                value: dot(&v, &w),
                vector: v,
                iterations: it,
                converged: true,
                restarted: false,
                polish_steps: 0,
            };
        }
        prev = rq;
    }
    let w = s.mul_vec(&v);
    EigenEstimate {
        value: dot(&v, &w),
        vector: v,
        iterations: MAX_ITERATIONS,
        converged: false,
        restarted: false,
        polish_steps: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_diagonal() {
        let e = dominant_eigenvalue(&Matrix::identity(3)).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
        let mut d = Matrix::zeros(3, 3);
        d[(0, 0)] = 1.0;
        d[(1, 1)] = 2.0;
        d[(2, 2)] = 5.0;
        let e = dominant_eigenvalue(&d).unwrap();
        assert!((e.value - 5.0).abs() < 1e-9);
        assert!(e.converged);
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(
            dominant_eigenvalue(&m),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn restarts_when_start_is_in_null_space() {
        // ones vector is annihilated by the centering projector.
        let n = 4;
        let p = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0 - 1.0 / n as f64
            } else {
                -1.0 / n as f64
            }
        });
        let e = dominant_eigenvalue(&p).unwrap();
        assert!(e.restarted);
        assert!((e.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn close_top_eigenvalues_are_resolved() {
        let mut d = Matrix::zeros(3, 3);
        d[(0, 0)] = 1.0;
        d[(1, 1)] = 1.0 - 1e-7;
        d[(2, 2)] = 0.3;
        // rotate so the start vector mixes all directions unevenly
        let q = Matrix::from_rows(&[
            vec![0.6, 0.8, 0.0],
            vec![-0.8, 0.6, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let s = q.matmul(&d).matmul(&q.transpose()).symmetrized();
        let e = dominant_eigenvalue(&s).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12, "{}", e.value);
    }

    #[test]
    fn zero_matrix() {
        let e = dominant_eigenvalue(&Matrix::zeros(3, 3)).unwrap();
        assert_eq!(e.value, 0.0);
    }
}
