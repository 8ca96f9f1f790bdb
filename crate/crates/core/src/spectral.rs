//! Spectral quantities: layer operator norms and extreme Hessian eigenvalues.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{norm2, Matrix};
use crate::net::Params;

const POWER_MAX_ITERS: usize = 10_000;
const POWER_REL_TOL: f64 = 1e-13;

/// Operator 2-norm of `m` by power iteration on `mᵀm`, started from the
/// normalized all-ones vector.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let fro = m.frobenius();
    if fro == 0.0 {
        return 0.0;
    }
    let n = m.cols();
    let start = vec![1.0 / (n as f64).sqrt(); n];
    let sigma = power_iterate(m, start);
    // ‖M‖₂ ≥ ‖M‖_F / √rank; falling short means the start vector missed the
    // top singular subspace.
    let floor = fro / (m.rows().min(m.cols()) as f64).sqrt();
    if sigma >= floor * (1.0 - 1e-12) {
        return sigma;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    power_iterate(m, v).max(sigma)
}

fn power_iterate(m: &Matrix, mut v: Vec<f64>) -> f64 {
    let mut u = vec![0.0; m.rows()];
    let mut w = vec![0.0; m.cols()];
    let mut sigma = 0.0_f64;
    for _ in 0..POWER_MAX_ITERS {
        m.mul_vec_into(&v, &mut u);
        let next = norm2(&u);
        m.tr_mul_vec_into(&u, &mut w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return next;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        let done = (next - sigma).abs() <= POWER_REL_TOL * next;
        sigma = next;
        if done {
            break;
        }
    }
    m.mul_vec_into(&v, &mut u);
    norm2(&u).max(sigma)
}

/// `‖W‖_* = max_i ‖W_i‖₂`, the largest layer operator norm.
pub fn star_norm(params: &Params) -> f64 {
    params.layers().iter().map(spectral_norm).fold(0.0, f64::max)
}

/// Extreme eigenpairs of a symmetric matrix with their residuals.
#[derive(Clone, Debug, Serialize)]
pub struct EigenReport {
    pub min: f64,
    pub max: f64,
    /// `‖M v − μ v‖` for the minimal eigenpair.
    pub min_residual: f64,
    pub max_residual: f64,
    pub asymmetry: f64,
}

const SYMMETRY_TOL: f64 = 1e-8;

pub fn max_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Full symmetric eigensolve; rejects matrices asymmetric beyond `10⁻⁸·max(1, max|M_ij|)`.
pub fn symmetric_extremes(m: &Matrix) -> Result<EigenReport> {
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::invalid(format!("expected a nonempty square matrix, got {:?}", m.shape())));
    }
    let scale = m.as_slice().iter().fold(1.0_f64, |s, v| s.max(v.abs()));
    let asymmetry = max_asymmetry(m);
    if asymmetry > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!(
            "matrix is not symmetric: max |M_ij - M_ji| = {asymmetry:.3e}"
        )));
    }
    let n = m.rows();
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = SymmetricEigen::new(dm.clone());
    let (imin, imax) = eig.eigenvalues.iter().enumerate().fold((0, 0), |(lo, hi), (k, &v)| {
        (
            if v < eig.eigenvalues[lo] { k } else { lo },
            if v > eig.eigenvalues[hi] { k } else { hi },
        )
    });
    let residual = |k: usize| {
        let v = eig.eigenvectors.column(k);
        (&dm * v - v * eig.eigenvalues[k]).norm()
    };
    Ok(EigenReport {
        min: eig.eigenvalues[imin],
        max: eig.eigenvalues[imax],
        min_residual: residual(imin),
        max_residual: residual(imax),
        asymmetry,
    })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    symmetric_extremes(m).map(|r| r.min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn fixture_star_norm_is_sqrt_two() {
        let w = fixtures::t1_params();
        assert!((star_norm(&w) - 2f64.sqrt()).abs() < 1e-14);
        assert_eq!(star_norm(&Params::zeros(w.arch())), 0.0);
    }

    #[test]
    fn identity_layers_have_unit_norm() {
        let w = Params::from_matrices(vec![Matrix::identity(3), Matrix::identity(3), Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]])]).unwrap();
        assert!((star_norm(&w) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn start_vector_in_null_space_is_recovered() {
        // The all-ones start is orthogonal to the only right singular vector.
        let m = Matrix::from_rows(&[&[1.0, -1.0]]);
        assert!((spectral_norm(&m) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn extremes_of_diagonal_matrices() {
        let lam = 0.3;
        let m = Matrix::from_fn(4, 4, |i, j| if i == j { lam } else { 0.0 });
        assert!((min_eigenvalue(&m).unwrap() - lam).abs() < 1e-15);
        let d = Matrix::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, -2.0, 0.0], &[0.0, 0.0, 5.0]]);
        let r = symmetric_extremes(&d).unwrap();
        assert_eq!((r.min, r.max), (-2.0, 5.0));
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        assert!(matches!(min_eigenvalue(&m), Err(Error::InvalidInput(_))));
    }
}
