//! The training error `ℓ`, its weight-decayed form `ℓ_λ`, and their first and
//! second derivatives on frozen pieces.
//!
//! All per-sample reductions run in sample order so results are bit-reproducible.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::net::{self, Dataset, Direction, Params, SwitchSignature, Switching, Trace};

/// Weight-decay coefficient `λ ≥ 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be finite and >= 0, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn unregularized() -> Self {
        Self { lambda: 0.0 }
    }
}

/// Default cap on the parameter count for dense Hessians.
pub const HESSIAN_CAP: usize = 4096;

fn check(params: &Params, data: &Dataset) -> Result<()> {
    data.check_arch(params.arch())
}

/// Residuals `e_i = y(a_i, W) − f(a_i)` under the given switching.
pub fn residuals_with(params: &Params, data: &Dataset, switching: Switching<'_>) -> Vec<f64> {
    data.inputs()
        .iter()
        .enumerate()
        .map(|(i, a)| net::trace(params, a, switching, i).output() - data.label(i))
        .collect()
}

pub fn residuals(params: &Params, data: &Dataset) -> Result<Vec<f64>> {
    check(params, data)?;
    Ok(residuals_with(params, data, Switching::Relu))
}

pub(crate) fn loss_with(params: &Params, data: &Dataset, switching: Switching<'_>) -> f64 {
    let sum: f64 = residuals_with(params, data, switching).iter().map(|e| e * e).sum();
    sum / (2.0 * data.len() as f64)
}

/// Training error `ℓ(W) = (1/2N) Σ (f(a_i) − y(a_i, W))²`.
pub fn loss(params: &Params, data: &Dataset) -> Result<f64> {
    check(params, data)?;
    Ok(loss_with(params, data, Switching::Relu))
}

pub(crate) fn reg_loss_with(params: &Params, data: &Dataset, cfg: &LossConfig, switching: Switching<'_>) -> f64 {
    loss_with(params, data, switching) + 0.5 * cfg.lambda * params.norm_sq()
}

/// `ℓ_λ(W) = ℓ(W) + (λ/2)‖W‖²`.
pub fn reg_loss(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    check(params, data)?;
    Ok(reg_loss_with(params, data, cfg, Switching::Relu))
}

/// `ℓ_λ` with every switch held at `sig`.
pub fn frozen_reg_loss(params: &Params, data: &Dataset, cfg: &LossConfig, sig: &SwitchSignature) -> Result<f64> {
    check(params, data)?;
    if sig.num_samples() != data.len() {
        return Err(Error::invalid("signature and dataset sample counts differ"));
    }
    Ok(reg_loss_with(params, data, cfg, Switching::Frozen(sig)))
}

/// Reverse pass: `out += scale · ∂(seed·y)/∂W` for one traced sample.
fn backprop(params: &Params, tr: &Trace, seed: f64, scale: f64, out: &mut Params) {
    let depth = params.layers().len();
    let mut delta = vec![tr.masks[depth][0] * seed];
    for l in (0..depth).rev() {
        out.layer_mut(l).add_outer(scale, &tr.acts[l], &delta);
        if l > 0 {
            let mut next = params.layer(l).mul_vec(&delta);
            for (d, &m) in next.iter_mut().zip(&tr.masks[l]) {
                *d *= m;
            }
            delta = next;
        }
    }
}

pub(crate) fn gradient_over(
    params: &Params,
    data: &Dataset,
    indices: impl ExactSizeIterator<Item = usize>,
    cfg: &LossConfig,
    switching: Switching<'_>,
) -> Direction {
    let n = indices.len();
    let mut grad = Params::zeros(params.arch());
    let scale = 1.0 / n as f64;
    for i in indices {
        let tr = net::trace(params, data.input(i), switching, i);
        let e = tr.output() - data.label(i);
        if e != 0.0 {
            backprop(params, &tr, e, scale, &mut grad);
        }
    }
    grad.axpy(cfg.lambda, params);
    grad
}

/// `∇ℓ_λ(W)` by backpropagation, with ReLU derivative `1{x > 0}`.
pub fn gradient(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<Direction> {
    check(params, data)?;
    Ok(gradient_over(params, data, 0..data.len(), cfg, Switching::Relu))
}

/// Gradient of the mini-batch loss `(1/2B) Σ_{i∈batch} e_i² + (λ/2)‖W‖²`.
pub fn batch_gradient(params: &Params, data: &Dataset, batch: &[usize], cfg: &LossConfig) -> Result<Direction> {
    check(params, data)?;
    if batch.is_empty() || batch.iter().any(|&i| i >= data.len()) {
        return Err(Error::invalid("mini-batch indices out of range or empty"));
    }
    Ok(gradient_over(params, data, batch.iter().copied(), cfg, Switching::Relu))
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub gradient: Direction,
    /// Some pre-activation lies within the boundary tolerance, so the value is
    /// the gradient of the frozen piece rather than a true derivative.
    pub boundary_warning: bool,
}

pub fn gradient_flagged(params: &Params, data: &Dataset, cfg: &LossConfig, boundary_tol: f64) -> Result<GradientReport> {
    let gradient = gradient(params, data, cfg)?;
    let sig = net::switch_signature(params, data, boundary_tol)?;
    Ok(GradientReport {
        gradient,
        boundary_warning: sig.any_boundary(),
    })
}

/// `∇ℓ_λ` of the frozen or linear network.
pub fn gradient_with(params: &Params, data: &Dataset, cfg: &LossConfig, switching: Switching<'_>) -> Result<Direction> {
    check(params, data)?;
    Ok(gradient_over(params, data, 0..data.len(), cfg, switching))
}

/// Hessian-vector product of one sample's `½e²`, scaled and accumulated.
///
/// Forward-over-reverse (R-operator) with the switches of `tr` held fixed.
fn hvp_sample(params: &Params, dir: &Direction, tr: &Trace, residual: f64, scale: f64, out: &mut Params) {
    let depth = params.layers().len();
    // Forward tangent: rh_l = d h_l / dt along W + tX.
    let mut rh: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
    rh.push(vec![0.0; tr.acts[0].len()]);
    for l in 0..depth {
        let mut rz = dir.layer(l).tr_mul_vec(&tr.acts[l]);
        let wr = params.layer(l).tr_mul_vec(&rh[l]);
        for ((z, w), &m) in rz.iter_mut().zip(&wr).zip(&tr.masks[l + 1]) {
            *z = m * (*z + w);
        }
        rh.push(rz);
    }
    let out_mask = tr.masks[depth][0];
    let mut delta = vec![out_mask * residual];
    let mut rdelta = vec![out_mask * rh[depth][0]];
    for l in (0..depth).rev() {
        let g = out.layer_mut(l);
        g.add_outer(scale, &rh[l], &delta);
        g.add_outer(scale, &tr.acts[l], &rdelta);
        if l > 0 {
            let w = params.layer(l);
            let mut next_r = dir.layer(l).mul_vec(&delta);
            let wr = w.mul_vec(&rdelta);
            let mut next = w.mul_vec(&delta);
            for ((nr, &x), (nd, &m)) in next_r.iter_mut().zip(&wr).zip(next.iter_mut().zip(&tr.masks[l])) {
                *nr = m * (*nr + x);
                *nd *= m;
            }
            delta = next;
            rdelta = next_r;
        }
    }
}

pub(crate) fn hvp_with(params: &Params, data: &Dataset, cfg: &LossConfig, dir: &Direction, switching: Switching<'_>) -> Direction {
    let mut out = Params::zeros(params.arch());
    let scale = 1.0 / data.len() as f64;
    for (i, a) in data.inputs().iter().enumerate() {
        let tr = net::trace(params, a, switching, i);
        let e = tr.output() - data.label(i);
        hvp_sample(params, dir, &tr, e, scale, &mut out);
    }
    out.axpy(cfg.lambda, dir);
    out
}

fn check_dir(params: &Params, dir: &Direction) -> Result<()> {
    if params.arch() != dir.arch() {
        return Err(Error::invalid("direction shape does not match the parameters"));
    }
    Ok(())
}

/// `H(ℓ_λ)(W) · X` on the frozen piece at `W`, without forming the Hessian.
pub fn hvp(params: &Params, data: &Dataset, cfg: &LossConfig, dir: &Direction) -> Result<Direction> {
    check(params, data)?;
    check_dir(params, dir)?;
    Ok(hvp_with(params, data, cfg, dir, Switching::Relu))
}

/// Hessian-vector product of the frozen or linear network.
pub fn hvp_switched(params: &Params, data: &Dataset, cfg: &LossConfig, dir: &Direction, switching: Switching<'_>) -> Result<Direction> {
    check(params, data)?;
    check_dir(params, dir)?;
    Ok(hvp_with(params, data, cfg, dir, switching))
}

/// Applies `S_{l+1} M_lᵀ` layer by layer, taking `M_l = X_l` where `use_dir[l]`.
fn insertion_chain(params: &Params, dir: &Direction, tr: &Trace, use_dir: &[bool]) -> f64 {
    let mut v = tr.acts[0].clone();
    for (l, &x) in use_dir.iter().enumerate() {
        let m = if x { dir.layer(l) } else { params.layer(l) };
        let mut z = m.tr_mul_vec(&v);
        for (zi, &s) in z.iter_mut().zip(&tr.masks[l + 1]) {
            *zi *= s;
        }
        v = z;
    }
    v[0]
}

/// First and second `t`-derivatives at `t = 0` of `ỹ(a, W + tX)` for one sample,
/// as the sums over single and pairwise insertions of `X̃_i = S_{i+1} X_i S_i`.
pub(crate) fn frozen_output_derivatives(params: &Params, dir: &Direction, tr: &Trace) -> (f64, f64) {
    let depth = params.layers().len();
    let mut use_dir = vec![false; depth];
    let mut first = 0.0;
    for i in 0..depth {
        use_dir[i] = true;
        first += insertion_chain(params, dir, tr, &use_dir);
        use_dir[i] = false;
    }
    let mut second = 0.0;
    for i in 0..depth {
        for j in (i + 1)..depth {
            use_dir[i] = true;
            use_dir[j] = true;
            second += 2.0 * insertion_chain(params, dir, tr, &use_dir);
            use_dir[i] = false;
            use_dir[j] = false;
        }
    }
    (first, second)
}

pub(crate) fn directional_second_with(params: &Params, data: &Dataset, cfg: &LossConfig, dir: &Direction, switching: Switching<'_>) -> f64 {
    let mut sum = 0.0;
    for (i, a) in data.inputs().iter().enumerate() {
        let tr = net::trace(params, a, switching, i);
        let e = tr.output() - data.label(i);
        let (d1, d2) = frozen_output_derivatives(params, dir, &tr);
        sum += d1 * d1 + e * d2;
    }
    sum / data.len() as f64 + cfg.lambda * dir.norm_sq()
}

/// `d²/dt²|₀` of the frozen `ℓ_λ(W + tX)`:
/// `(1/N) Σ [(dỹ_i/dt)² + e_i · d²ỹ_i/dt²] + λ‖X‖²`.
pub fn directional_second(params: &Params, data: &Dataset, cfg: &LossConfig, dir: &Direction) -> Result<f64> {
    check(params, data)?;
    check_dir(params, dir)?;
    Ok(directional_second_with(params, data, cfg, dir, Switching::Relu))
}

/// Dense Hessian of the frozen `ℓ_λ`, symmetrized.
#[derive(Clone, Debug)]
pub struct Hessian {
    pub matrix: Matrix,
    /// Largest `|H_ij − H_ji|` before symmetrization.
    pub max_asymmetry: f64,
}

pub(crate) fn full_hessian_with(params: &Params, data: &Dataset, cfg: &LossConfig, switching: Switching<'_>, cap: usize) -> Result<Hessian> {
    check(params, data)?;
    let m = params.num_params();
    if m > cap {
        return Err(Error::Resource(format!(
            "dense Hessian needs {m} parameters but the cap is {cap}; use Hessian-vector product bounds instead"
        )));
    }
    let arch = params.arch();
    // Traces do not depend on the direction, so compute them once.
    let traces: Vec<(Trace, f64)> = data
        .inputs()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let tr = net::trace(params, a, switching, i);
            let e = tr.output() - data.label(i);
            (tr, e)
        })
        .collect();
    let scale = 1.0 / data.len() as f64;
    let mut h = Matrix::zeros(m, m);
    for k in 0..m {
        let dir = Params::basis(arch, k);
        let mut col = Params::zeros(arch);
        for (tr, e) in &traces {
            hvp_sample(params, &dir, tr, *e, scale, &mut col);
        }
        col.axpy(cfg.lambda, &dir);
        for (j, v) in col.iter().enumerate() {
            h[(j, k)] = *v;
        }
    }
    let max_asymmetry = crate::spectral::max_asymmetry(&h);
    for i in 0..m {
        for j in (i + 1)..m {
            let avg = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = avg;
            h[(j, i)] = avg;
        }
    }
    Ok(Hessian { matrix: h, max_asymmetry })
}

/// Dense `m × m` Hessian of the frozen `ℓ_λ` at `W`; column `k` is `hvp(e_k)`.
pub fn full_hessian(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<Hessian> {
    full_hessian_with(params, data, cfg, Switching::Relu, HESSIAN_CAP)
}

pub fn full_hessian_capped(params: &Params, data: &Dataset, cfg: &LossConfig, cap: usize) -> Result<Hessian> {
    full_hessian_with(params, data, cfg, Switching::Relu, cap)
}

pub(crate) fn laplacian_with(params: &Params, data: &Dataset, switching: Switching<'_>) -> f64 {
    let depth = params.layers().len();
    let mut total = 0.0;
    for (i, a) in data.inputs().iter().enumerate() {
        let tr = net::trace(params, a, switching, i);
        // ∂ỹ/∂W_l = h_l δ_{l+1}ᵀ, whose squared Frobenius norm is ‖h_l‖²‖δ_{l+1}‖².
        let mut delta = vec![tr.masks[depth][0]];
        for l in (0..depth).rev() {
            total += dot(&tr.acts[l], &tr.acts[l]) * dot(&delta, &delta);
            if l > 0 {
                let mut next = params.layer(l).mul_vec(&delta);
                for (d, &m) in next.iter_mut().zip(&tr.masks[l]) {
                    *d *= m;
                }
                delta = next;
            }
        }
    }
    total / data.len() as f64
}

/// Laplacian of the frozen `ℓ`: `(1/N) Σ_i Σ_w (∂ỹ_i/∂w)²`, the Hessian trace.
pub fn laplacian(params: &Params, data: &Dataset) -> Result<f64> {
    check(params, data)?;
    Ok(laplacian_with(params, data, Switching::Relu))
}
