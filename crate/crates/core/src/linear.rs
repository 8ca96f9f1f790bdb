//! Linear networks: every switch held on.
//!
//! The loss of a linear net is invariant under `W_i ↦ W_i Rᵀ`, `W_{i+1} ↦ R W_{i+1}`
//! for any rotation `R`, so a nonzero critical point is never isolated. The
//! audits here replay that argument numerically.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::descent::DescentOptions;
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::matrix::Matrix;
use crate::net::{Architecture, Dataset, Direction, Params, Switching};
use crate::region::{self, u_statistic};
use crate::rng;
use crate::serde_f17;
use crate::spectral::star_norm;

const ORTHO_TOL: f64 = 1e-12;
const DET_TOL: f64 = 1e-10;

/// `ℓ_λ` with all switches on.
pub fn linear_loss(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    data.check_arch(params.arch())?;
    Ok(loss::reg_loss_with(params, data, cfg, Switching::Linear))
}

pub fn linear_gradient(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<Direction> {
    loss::gradient_with(params, data, cfg, Switching::Linear)
}

pub fn linear_laplacian(params: &Params, data: &Dataset) -> Result<f64> {
    data.check_arch(params.arch())?;
    Ok(loss::laplacian_with(params, data, Switching::Linear))
}

/// A rotation `R` of the units of layer `layer + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationPlan {
    layer: usize,
    rotation: Matrix,
}

impl RotationPlan {
    pub fn new(layer: usize, rotation: Matrix) -> Result<Self> {
        let (n, m) = rotation.shape();
        if n != m || n == 0 {
            return Err(Error::invalid(format!("rotation must be square, got {n}x{m}")));
        }
        let gram = rotation.transpose().matmul(&rotation);
        let err = gram.max_abs_diff(&Matrix::identity(n));
        if !(err <= ORTHO_TOL) {
            return Err(Error::invalid(format!("R^T R deviates from I by {err:e}")));
        }
        let det = DMatrix::from_row_slice(n, n, rotation.as_slice()).determinant();
        if !((det - 1.0).abs() <= DET_TOL) {
            return Err(Error::invalid(format!("det R = {det}, expected +1")));
        }
        Ok(Self { layer, rotation })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn rotation(&self) -> &Matrix {
        &self.rotation
    }
}

/// Rotation by `angle` in the `(p, q)` coordinate plane of `ℝⁿ`.
pub fn givens(n: usize, p: usize, q: usize, angle: f64) -> Matrix {
    assert!(p < n && q < n && p != q, "givens plane ({p}, {q}) invalid for n = {n}");
    let mut r = Matrix::identity(n);
    let (s, c) = angle.sin_cos();
    let mut set = |i, j, v| r.as_mut_slice()[i * n + j] = v;
    set(p, p, c);
    set(q, q, c);
    set(p, q, -s);
    set(q, p, s);
    r
}

/// Product of `factors` Givens rotations in random planes with angles uniform
/// in `[−π, π)`.
pub fn random_rotation(n: usize, factors: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut r = Matrix::identity(n);
    if n < 2 {
        return r;
    }
    for _ in 0..factors {
        let p = rng.random_range(0..n);
        let mut q = rng.random_range(0..n - 1);
        if q >= p {
            q += 1;
        }
        let angle = rng.random_range(-PI..PI);
        r = givens(n, p, q, angle).matmul(&r);
    }
    r
}

/// `(W₀, …, W_i Rᵀ, R W_{i+1}, …, W_H)`.
pub fn rotate_weights(params: &Params, plan: &RotationPlan) -> Result<Params> {
    let h = params.arch().hidden_layers();
    let i = plan.layer;
    if i >= h {
        return Err(Error::invalid(format!("rotation layer {i} out of range 0..{h}")));
    }
    let n = params.arch().widths()[i + 1];
    if plan.rotation.rows() != n {
        return Err(Error::invalid(format!(
            "layer {} has {n} units, rotation is {}x{}",
            i + 1,
            plan.rotation.rows(),
            plan.rotation.cols()
        )));
    }
    let mut out = params.clone();
    *out.layer_mut(i) = params.layer(i).matmul(&plan.rotation.transpose());
    *out.layer_mut(i + 1) = plan.rotation.matmul(params.layer(i + 1));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NetMode {
    Linear,
    Relu,
}

impl NetMode {
    fn switching(self) -> Switching<'static> {
        match self {
            NetMode::Linear => Switching::Linear,
            NetMode::Relu => Switching::Relu,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RotationCheck {
    pub layer: usize,
    #[serde(with = "serde_f17")]
    pub angle: f64,
    #[serde(with = "serde_f17")]
    pub loss_rotated: f64,
    #[serde(with = "serde_f17")]
    pub abs_diff: f64,
    /// `‖W̃ − W‖`.
    #[serde(with = "serde_f17")]
    pub distance: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DegeneracyReport {
    pub mode: NetMode,
    #[serde(with = "serde_f17")]
    pub loss: f64,
    #[serde(with = "serde_f17")]
    pub tolerance: f64,
    pub checks: Vec<RotationCheck>,
    /// Layers skipped because `W_i = 0` or layer `i + 1` has a single unit.
    pub not_applicable: Vec<usize>,
    pub all_hold: bool,
    /// Some rotation moved `W` without changing `ℓ_λ`.
    pub continuum: bool,
}

/// The two columns of `W_i` with the largest norms, so the rotation moves `W`
/// as much as possible.
fn widest_plane(w: &Matrix) -> (usize, usize) {
    let mut norms: Vec<(f64, usize)> = (0..w.cols())
        .map(|j| ((0..w.rows()).map(|r| w[(r, j)] * w[(r, j)]).sum(), j))
        .collect();
    norms.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    (norms[0].1, norms[1].1)
}

/// Rotates every applicable layer by each angle and compares `ℓ_λ`, requiring
/// `|ℓ_λ(W̃) − ℓ_λ(W)| ≤ 10⁻¹⁰ (1 + ℓ_λ(W))`.
pub fn degeneracy_audit(params: &Params, data: &Dataset, cfg: &LossConfig, angles: &[f64], mode: NetMode) -> Result<DegeneracyReport> {
    data.check_arch(params.arch())?;
    if params.is_zero() {
        return Err(Error::invalid("degeneracy audit needs W != 0"));
    }
    let switching = mode.switching();
    let base = loss::reg_loss_with(params, data, cfg, switching);
    let tolerance = 1e-10 * (1.0 + base);
    let mut checks = Vec::new();
    let mut not_applicable = Vec::new();
    for i in 0..params.arch().hidden_layers() {
        let w = params.layer(i);
        if w.cols() < 2 || w.as_slice().iter().all(|&v| v == 0.0) {
            not_applicable.push(i);
            continue;
        }
        let (p, q) = widest_plane(w);
        for &angle in angles {
            let plan = RotationPlan::new(i, givens(w.cols(), p, q, angle))?;
            let rotated = rotate_weights(params, &plan)?;
            let loss_rotated = loss::reg_loss_with(&rotated, data, cfg, switching);
            let abs_diff = (loss_rotated - base).abs();
            checks.push(RotationCheck {
                layer: i,
                angle,
                loss_rotated,
                abs_diff,
                distance: rotated.distance(params),
                holds: abs_diff <= tolerance,
            });
        }
    }
    let all_hold = checks.iter().all(|c| c.holds);
    let continuum = all_hold && checks.iter().any(|c| c.distance > 0.0);
    Ok(DegeneracyReport {
        mode,
        loss: base,
        tolerance,
        checks,
        not_applicable,
        all_hold,
        continuum,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub start: usize,
    pub converged: bool,
    pub iterations: usize,
    #[serde(with = "serde_f17")]
    pub grad_norm: f64,
    #[serde(with = "serde_f17")]
    pub reg_loss: f64,
    #[serde(with = "serde_f17")]
    pub loss: f64,
    #[serde(with = "serde_f17")]
    pub weight_norm: f64,
    #[serde(with = "serde_f17")]
    pub star_norm: f64,
    #[serde(with = "serde_f17")]
    pub statistic: f64,
    pub in_u_lambda: bool,
    pub nonzero: bool,
    #[serde(skip)]
    pub params: Params,
}

impl CriticalPoint {
    /// A converged nonzero point inside `U(λ)`.
    pub fn is_violation(&self) -> bool {
        self.converged && self.in_u_lambda && self.nonzero
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalSearchReport {
    pub arch: Architecture,
    #[serde(with = "serde_f17")]
    pub lambda: f64,
    #[serde(with = "serde_f17")]
    pub threshold: f64,
    pub seed: u64,
    pub points: Vec<CriticalPoint>,
    pub converged: usize,
    pub violations: usize,
}

impl CriticalSearchReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

pub const NONZERO_TOL: f64 = 1e-6;

/// Gradient-norm tolerance relative to `1 + ‖g₀‖`. Tighter than the
/// `10⁻⁸` that defines a critical point so that descent onto `W = 0` lands
/// well inside the `‖W‖ ≤ 10⁻⁶` zero test.
const SEARCH_REL_TOL: f64 = 1e-10;

/// Multi-start descent of the linear-mode `ℓ_λ`, tagging each point with
/// membership in `U(λ)`. Each start is drawn from stream `(seed, k)`.
pub fn critical_search(arch: &Architecture, data: &Dataset, cfg: &LossConfig, starts: usize, seed: u64) -> Result<CriticalSearchReport> {
    data.check_arch(arch)?;
    if !arch.hidden_widths_exceed_one() {
        return Err(Error::invalid(format!(
            "linear audit requires every hidden width > 1, got {arch}"
        )));
    }
    if !(cfg.lambda > 0.0) {
        return Err(Error::invalid("linear audit requires lambda > 0"));
    }
    let h = arch.hidden_layers();
    let threshold = region::u_lambda_threshold(cfg.lambda, h, data.radius());
    let opts = DescentOptions {
        rel_grad_tol: SEARCH_REL_TOL,
        ..DescentOptions::default()
    };
    let points: Vec<CriticalPoint> = (0..starts)
        .map(|k| {
            let start = Params::he_init(arch, 1.0, &mut rng::stream(seed, k as u64));
            let out = region::minimize_reg_loss(data, cfg, start, opts, Switching::Linear);
            let converged = out.grad_norm <= 1e-8 * (1.0 + out.initial_grad_norm);
            let l = loss::loss_with(&out.params, data, Switching::Linear);
            let star = star_norm(&out.params);
            let statistic = u_statistic(l, star, h);
            CriticalPoint {
                start: k,
                converged,
                iterations: out.iterations,
                grad_norm: out.grad_norm,
                reg_loss: out.value,
                loss: l,
                weight_norm: out.params.norm(),
                star_norm: star,
                statistic,
                in_u_lambda: statistic < threshold,
                nonzero: out.params.norm() > NONZERO_TOL,
                params: out.params,
            }
        })
        .collect();
    let converged = points.iter().filter(|p| p.converged).count();
    let violations = points.iter().filter(|p| p.is_violation()).count();
    Ok(CriticalSearchReport {
        arch: arch.clone(),
        lambda: cfg.lambda,
        threshold,
        seed,
        points,
        converged,
        violations,
    })
}
