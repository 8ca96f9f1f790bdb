//! The set `U(λ, θ)` where `ℓ_λ` is piecewise `θ`-strongly convex, and the
//! certificates built on it.
//!
//! `U(λ, θ) = { W : ℓ(W)^{1/2} ‖W‖_*^{H−1} < (λ − θ) / (√2 H(H+1) r) }`.
//! On this set every frozen piece of `ℓ_λ` has Hessian `≥ θ I`, because the
//! frozen second derivative of `ℓ` is bounded below by
//! `−√2 H(H+1) ‖W‖_*^{H−1} r ℓ(W)^{1/2} ‖X‖²`.

use serde::Serialize;

use crate::descent::{self, DescentOptions, DescentOutcome};
use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::net::{self, Architecture, Dataset, Params, SwitchSignature, Switching};
use crate::rng;
use crate::serde_f17;
use crate::spectral::{self, star_norm};

/// Parameters of the region `U(λ, θ)` for a network with `H` hidden layers and
/// inputs of norm at most `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegionSpec {
    pub lambda: f64,
    pub theta: f64,
    pub radius: f64,
    pub hidden_layers: usize,
}

impl RegionSpec {
    pub fn new(lambda: f64, theta: f64, radius: f64, hidden_layers: usize) -> Result<Self> {
        if !(theta > 0.0 && lambda > theta && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "region needs lambda > theta > 0, got lambda = {lambda}, theta = {theta}"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid(format!("input radius must be positive, got {radius}")));
        }
        if hidden_layers == 0 {
            return Err(Error::invalid("at least one hidden layer is required"));
        }
        Ok(Self {
            lambda,
            theta,
            radius,
            hidden_layers,
        })
    }

    /// Spec matching a network's depth and a dataset's declared radius.
    pub fn for_data(lambda: f64, theta: f64, arch: &Architecture, data: &Dataset) -> Result<Self> {
        RegionSpec::new(lambda, theta, data.radius(), arch.hidden_layers())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig { lambda: self.lambda }
    }
}

fn depth_factor(h: usize) -> f64 {
    let h = h as f64;
    std::f64::consts::SQRT_2 * h * (h + 1.0)
}

/// `(λ − θ) / (√2 H(H+1) r)`.
pub fn u_threshold(spec: &RegionSpec) -> f64 {
    (spec.lambda - spec.theta) / (depth_factor(spec.hidden_layers) * spec.radius)
}

/// Threshold of `U(λ) = ∪_{θ>0} U(λ, θ)`: `λ / (√2 H(H+1) r)`.
pub fn u_lambda_threshold(lambda: f64, hidden_layers: usize, radius: f64) -> f64 {
    lambda / (depth_factor(hidden_layers) * radius)
}

/// `ℓ(W)^{1/2} ‖W‖_*^{H−1}`, the quantity compared against [`u_threshold`].
pub fn u_statistic(loss_value: f64, star: f64, hidden_layers: usize) -> f64 {
    loss_value.sqrt() * star.powi(hidden_layers as i32 - 1)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct Membership {
    pub in_u: bool,
    #[serde(with = "serde_f17")]
    pub statistic: f64,
    #[serde(with = "serde_f17")]
    pub threshold: f64,
    /// `threshold − statistic`; membership is exactly `margin > 0`.
    #[serde(with = "serde_f17")]
    pub margin: f64,
}

fn check_depth(params: &Params, spec: &RegionSpec) -> Result<()> {
    if params.arch().hidden_layers() != spec.hidden_layers {
        return Err(Error::invalid(format!(
            "region spec assumes H = {}, network has H = {}",
            spec.hidden_layers,
            params.arch().hidden_layers()
        )));
    }
    Ok(())
}

pub(crate) fn membership_from(loss_value: f64, star: f64, spec: &RegionSpec) -> Membership {
    let statistic = u_statistic(loss_value, star, spec.hidden_layers);
    let threshold = u_threshold(spec);
    let margin = threshold - statistic;
    Membership {
        in_u: margin > 0.0,
        statistic,
        threshold,
        margin,
    }
}

/// Strict membership test `W ∈ U(λ, θ)`, no slack.
pub fn u_membership(params: &Params, data: &Dataset, spec: &RegionSpec) -> Result<Membership> {
    check_depth(params, spec)?;
    let l = loss::loss(params, data)?;
    Ok(membership_from(l, star_norm(params), spec))
}

/// Lower bound on the frozen second derivative of `ℓ` per unit `‖X‖²`:
/// `−√2 H(H+1) ‖W‖_*^{H−1} r ℓ(W)^{1/2}`.
pub fn curvature_floor(params: &Params, data: &Dataset, radius: f64) -> Result<f64> {
    let l = loss::loss(params, data)?;
    let h = params.arch().hidden_layers();
    Ok(-depth_factor(h) * star_norm(params).powi(h as i32 - 1) * radius * l.sqrt())
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvatureAudit {
    pub trials: usize,
    pub seed: u64,
    #[serde(with = "serde_f17")]
    pub floor: f64,
    /// Smallest observed frozen second derivative over unit directions.
    #[serde(with = "serde_f17")]
    pub min_second: f64,
    /// `min_second − floor`.
    #[serde(with = "serde_f17")]
    pub worst_slack: f64,
    pub violations: usize,
    /// `(seed, trial)` of the first violating direction.
    pub reproducer: Option<(u64, usize)>,
}

impl CurvatureAudit {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks the curvature floor against `trials` random unit directions on the
/// frozen `ℓ` (no weight decay), using the dataset's declared radius.
pub fn audit_curvature_floor(params: &Params, data: &Dataset, trials: usize, seed: u64) -> Result<CurvatureAudit> {
    let floor = curvature_floor(params, data, data.radius())?;
    let cfg = LossConfig::unregularized();
    let mut min_second = f64::INFINITY;
    let mut violations = 0;
    let mut reproducer = None;
    for t in 0..trials {
        let mut stream = rng::stream(seed, t as u64);
        let dir = rng::unit_direction(params.arch(), &mut stream);
        let second = loss::directional_second(params, data, &cfg, &dir)?;
        min_second = min_second.min(second);
        // Floating-point allowance only; the bound itself has no slack.
        if second - floor < -1e-12 * (second.abs() + floor.abs()) {
            violations += 1;
            reproducer.get_or_insert((seed, t));
        }
    }
    Ok(CurvatureAudit {
        trials,
        seed,
        floor,
        min_second,
        worst_slack: min_second - floor,
        violations,
        reproducer,
    })
}

/// Loss level below which `U(λ, θ)` captures every global minimizer of `ℓ_λ`
/// for some `θ > 0`: `λ^{1+1/H} / (2 (H(H+1) r)^{2/H})`.
pub fn global_min_capture(lambda: f64, hidden_layers: usize, radius: f64) -> Result<f64> {
    if !(lambda > 0.0 && radius > 0.0) || hidden_layers == 0 {
        return Err(Error::invalid("capture bound needs lambda > 0, r > 0, H >= 1"));
    }
    let h = hidden_layers as f64;
    Ok(lambda.powf(1.0 + 1.0 / h) / (2.0 * (h * (h + 1.0) * radius).powf(2.0 / h)))
}

#[derive(Clone, Debug, Serialize)]
pub struct CaptureReport {
    #[serde(with = "serde_f17")]
    pub bound: f64,
    /// Best `ℓ_λ` found by multi-start descent, an upper bound on `inf ℓ_λ`.
    #[serde(with = "serde_f17")]
    pub inf_upper_estimate: f64,
    pub starts: usize,
    pub captured: bool,
}

/// Multi-start estimate of `inf ℓ_λ`, compared with [`global_min_capture`].
pub fn capture_check(arch: &Architecture, data: &Dataset, lambda: f64, starts: usize, seed: u64) -> Result<CaptureReport> {
    data.check_arch(arch)?;
    let cfg = LossConfig::new(lambda)?;
    let bound = global_min_capture(lambda, arch.hidden_layers(), data.radius())?;
    let best = (0..starts)
        .map(|k| {
            let mut stream = rng::stream(seed, k as u64);
            let start = Params::he_init(arch, 1.0, &mut stream);
            minimize_reg_loss(data, &cfg, start, DescentOptions::default(), Switching::Relu).value
        })
        .fold(f64::INFINITY, f64::min);
    Ok(CaptureReport {
        bound,
        inf_upper_estimate: best,
        starts,
        captured: best < bound,
    })
}

pub(crate) fn minimize_reg_loss(data: &Dataset, cfg: &LossConfig, start: Params, opts: DescentOptions, switching: Switching<'_>) -> DescentOutcome {
    descent::minimize(
        |p| {
            (
                loss::reg_loss_with(p, data, cfg, switching),
                loss::gradient_over(p, data, 0..data.len(), cfg, switching),
            )
        },
        start,
        opts,
    )
}

/// Pointwise piecewise-strong-convexity certificate.
#[derive(Clone, Debug, Serialize)]
pub struct Certificate {
    pub in_u: bool,
    #[serde(with = "serde_f17")]
    pub margin: f64,
    #[serde(with = "serde_f17")]
    pub statistic: f64,
    #[serde(with = "serde_f17")]
    pub threshold: f64,
    #[serde(with = "serde_f17")]
    pub loss: f64,
    #[serde(with = "serde_f17")]
    pub star_norm: f64,
    /// Smallest eigenvalue of the frozen `ℓ_λ` Hessian.
    #[serde(with = "serde_f17")]
    pub min_eig: f64,
    #[serde(with = "serde_f17")]
    pub max_eig: f64,
    #[serde(with = "serde_f17")]
    pub eig_residual: f64,
    pub certified: bool,
    #[serde(skip)]
    pub signature: SwitchSignature,
}

pub const CERTIFY_EIG_TOL: f64 = 1e-8;

/// Membership in `U(λ, θ)` plus the eigenvalue floor of the frozen piece at `W`.
pub fn certify(params: &Params, data: &Dataset, spec: &RegionSpec) -> Result<Certificate> {
    check_depth(params, spec)?;
    let l = loss::loss(params, data)?;
    let star = star_norm(params);
    let m = membership_from(l, star, spec);
    let hessian = loss::full_hessian(params, data, &spec.loss_config())?;
    let eig = spectral::symmetric_extremes(&hessian.matrix)?;
    let signature = net::switch_signature(params, data, net::default_boundary_tol(params))?;
    Ok(Certificate {
        in_u: m.in_u,
        margin: m.margin,
        statistic: m.statistic,
        threshold: m.threshold,
        loss: l,
        star_norm: star,
        min_eig: eig.min,
        max_eig: eig.max,
        eig_residual: eig.min_residual,
        certified: m.in_u && eig.min >= spec.theta - CERTIFY_EIG_TOL,
        signature,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeConfig {
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
    /// Largest gradient norm accepted as a critical point.
    pub grad_tol: f64,
}

impl ProbeConfig {
    pub fn new(samples: usize, radius: f64, seed: u64) -> Self {
        Self {
            samples,
            radius,
            seed,
            grad_tol: 1e-6,
        }
    }

    /// Tolerance `10⁻⁶ (1 + ‖∇ℓ_λ(W₀)‖)` scaled to the gradient at the start of
    /// the run that produced the candidate.
    pub fn with_start_gradient(mut self, start_grad_norm: f64) -> Self {
        self.grad_tol = 1e-6 * (1.0 + start_grad_norm);
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IsolationReport {
    #[serde(with = "serde_f17")]
    pub grad_norm: f64,
    pub samples: usize,
    #[serde(with = "serde_f17")]
    pub radius: f64,
    /// `min_δ ℓ_λ(W + δ) − ℓ_λ(W)` over the sampled sphere.
    #[serde(with = "serde_f17")]
    pub min_increase: f64,
    /// Quadratic-growth level `(θ/2) radius²`.
    #[serde(with = "serde_f17")]
    pub growth_floor: f64,
    pub strict_minimum: bool,
}

impl IsolationReport {
    /// Whether every sample rose by at least `(1 − rel_tol)` of the growth floor.
    pub fn meets_growth(&self, rel_tol: f64) -> bool {
        self.min_increase >= self.growth_floor * (1.0 - rel_tol)
    }
}

/// Samples `ℓ_λ` on a sphere around a critical point.
pub fn isolation_probe(params: &Params, data: &Dataset, spec: &RegionSpec, probe: &ProbeConfig) -> Result<IsolationReport> {
    check_depth(params, spec)?;
    let cfg = spec.loss_config();
    let grad_norm = loss::gradient(params, data, &cfg)?.norm();
    if !(grad_norm <= probe.grad_tol) {
        return Err(Error::NotCritical {
            grad_norm,
            tolerance: probe.grad_tol,
        });
    }
    let base = loss::reg_loss(params, data, &cfg)?;
    let mut min_increase = f64::INFINITY;
    for k in 0..probe.samples {
        let mut stream = rng::stream(probe.seed, k as u64);
        let dir = rng::unit_direction(params.arch(), &mut stream);
        let moved = params.plus(probe.radius, &dir);
        min_increase = min_increase.min(loss::reg_loss(&moved, data, &cfg)? - base);
    }
    Ok(IsolationReport {
        grad_norm,
        samples: probe.samples,
        radius: probe.radius,
        min_increase,
        growth_floor: 0.5 * spec.theta * probe.radius * probe.radius,
        strict_minimum: min_increase > 0.0,
    })
}
