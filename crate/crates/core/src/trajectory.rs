//! Curvature diagnostics along gradient flow and SGD.
//!
//! For `γ(t) = ℓ_λ(W(t))` on a flow `Ẇ = −∇ℓ_λ(W)`, `γ̈ = 2 gᵀ H g` with
//! `g = ∇ℓ_λ`. The normalized value `γ̈ / ‖g‖²` is the decay rate of `‖g‖²`.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::{self, LossConfig};
use crate::net::{self, Dataset, Params, SwitchSignature, Switching};
use crate::rng;
use crate::serde_f17;

/// Both routes to `γ̈`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GammaSecond {
    /// `2⟨g, H g⟩` through a Hessian-vector product. Authoritative.
    #[serde(with = "serde_f17")]
    pub primary: f64,
    /// Central difference of `‖∇ℓ_λ‖²` along `g`, on the frozen piece at `W`.
    #[serde(with = "serde_f17")]
    pub secondary: f64,
    #[serde(with = "serde_f17")]
    pub grad_sq: f64,
    /// `|primary − secondary| / max(|primary|, |secondary|)`, zero when both vanish.
    #[serde(with = "serde_f17")]
    pub rel_discrepancy: f64,
}

fn primary_route(params: &Params, data: &Dataset, cfg: &LossConfig, g: &Params) -> f64 {
    2.0 * g.dot(&loss::hvp_with(params, data, cfg, g, Switching::Relu))
}

pub fn gamma_second(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<GammaSecond> {
    let g = loss::gradient(params, data, cfg)?;
    let grad_sq = g.norm_sq();
    if grad_sq == 0.0 {
        return Ok(GammaSecond {
            primary: 0.0,
            secondary: 0.0,
            grad_sq,
            rel_discrepancy: 0.0,
        });
    }
    let primary = primary_route(params, data, cfg, &g);

    // φ(s) = ‖∇ℓ_λ(W + s ĝ)‖², φ'(0) ‖g‖ = 2 gᵀ H g. Fourth-order stencil.
    let sig = net::switch_signature(params, data, 0.0)?;
    let gnorm = grad_sq.sqrt();
    let unit = g.scaled(1.0 / gnorm);
    let h = 1e-4 * (1.0 + params.norm());
    let phi = |s: f64| loss::gradient_over(&params.plus(s, &unit), data, 0..data.len(), cfg, Switching::Frozen(&sig)).norm_sq();
    let d = (-phi(2.0 * h) + 8.0 * phi(h) - 8.0 * phi(-h) + phi(-2.0 * h)) / (12.0 * h);
    let secondary = d * gnorm;

    let scale = primary.abs().max(secondary.abs());
    let rel_discrepancy = if scale == 0.0 { 0.0 } else { (primary - secondary).abs() / scale };
    Ok(GammaSecond {
        primary,
        secondary,
        grad_sq,
        rel_discrepancy,
    })
}

pub const DEFAULT_GRAD_FLOOR: f64 = 1e-30;

/// `γ̈ / ‖∇ℓ_λ‖²`, or `None` when `‖∇ℓ_λ‖² ≤ floor`.
pub fn normalized_second(params: &Params, data: &Dataset, cfg: &LossConfig, floor: f64) -> Result<Option<f64>> {
    let g = loss::gradient(params, data, cfg)?;
    let grad_sq = g.norm_sq();
    if grad_sq <= floor {
        return Ok(None);
    }
    Ok(Some(primary_route(params, data, cfg, &g) / grad_sq))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Sample {
    #[serde(with = "serde_f17")]
    pub t: f64,
    /// `γ(t) = ℓ_λ(W(t))`.
    #[serde(with = "serde_f17")]
    pub loss: f64,
    #[serde(with = "serde_f17")]
    pub grad_sq: f64,
    #[serde(with = "serde_f17")]
    pub gamma_dd: f64,
    #[serde(with = "serde_f17::option")]
    pub normalized: Option<f64>,
    /// The switch pattern changed since the previous sample, or some
    /// pre-activation sits on a kink.
    pub boundary_hit: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Flow,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub kind: TrajectoryKind,
    pub samples: Vec<Sample>,
    /// Integrator step for flows.
    #[serde(with = "serde_f17::option")]
    pub step: Option<f64>,
    #[serde(with = "serde_f17::option")]
    pub t0: Option<f64>,
    #[serde(with = "serde_f17")]
    pub t1: f64,
    /// Smallest normalized value logged on `[t0, t1]`.
    #[serde(with = "serde_f17::option")]
    pub c: Option<f64>,
}

impl TrajectoryRecord {
    pub fn new(kind: TrajectoryKind, samples: Vec<Sample>, step: Option<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("trajectory has no samples"));
        }
        if samples.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::invalid("trajectory times must be strictly increasing"));
        }
        let mut rec = Self {
            kind,
            t1: samples.last().unwrap().t,
            samples,
            step,
            t0: None,
            c: None,
        };
        rec.t0 = detect_t0(&rec.samples);
        rec.c = rec.t0.and_then(|t0| {
            rec.samples
                .iter()
                .filter(|s| s.t >= t0)
                .filter_map(|s| s.normalized)
                .min_by(f64::total_cmp)
        });
        Ok(rec)
    }

    pub fn loss_fraction(&self) -> Option<f64> {
        loss_change_fraction(self)
    }

    pub fn final_loss(&self) -> f64 {
        self.samples.last().unwrap().loss
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// `t,loss,grad_sq,gamma_dd,normalized,boundary_hit`; an undefined
    /// normalized value is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for s in &self.samples {
            let norm = s.normalized.map(serde_f17::format).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                serde_f17::format(s.t),
                serde_f17::format(s.loss),
                serde_f17::format(s.grad_sq),
                serde_f17::format(s.gamma_dd),
                norm,
                u8::from(s.boundary_hit)
            ));
        }
        out
    }
}

pub const CSV_HEADER: &str = "t,loss,grad_sq,gamma_dd,normalized,boundary_hit";

/// Reads the samples of a trajectory CSV written by [`TrajectoryRecord::write_csv`].
pub fn read_trajectory_csv(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            message: e.to_string(),
        })?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.into(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(parse_err(1, format!("expected header {CSV_HEADER}")));
    }
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|_| parse_err(line, format!("bad number {:?}", &rec[k])))
        };
        samples.push(Sample {
            t: num(0)?,
            loss: num(1)?,
            grad_sq: num(2)?,
            gamma_dd: num(3)?,
            normalized: if rec[4].is_empty() { None } else { Some(num(4)?) },
            boundary_hit: match &rec[5] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(parse_err(line, format!("bad flag {other:?}"))),
            },
        });
    }
    if samples.is_empty() {
        return Err(parse_err(1, "trajectory has no samples".into()));
    }
    Ok(samples)
}

/// First logged time after which every logged `γ̈` is positive.
pub fn detect_t0(samples: &[Sample]) -> Option<f64> {
    let tail = samples.iter().rev().take_while(|s| s.gamma_dd > 0.0).count();
    if tail == 0 {
        None
    } else {
        Some(samples[samples.len() - tail].t)
    }
}

/// `(γ(t₀) − γ(t₁)) / (γ(0) − γ(t₁))`.
pub fn fraction(gamma_start: f64, gamma_t0: f64, gamma_t1: f64) -> Option<f64> {
    let den = gamma_start - gamma_t1;
    if den == 0.0 {
        None
    } else {
        Some((gamma_t0 - gamma_t1) / den)
    }
}

pub fn loss_change_fraction(rec: &TrajectoryRecord) -> Option<f64> {
    let t0 = rec.t0?;
    let first = rec.samples.first()?;
    let at_t0 = rec.samples.iter().find(|s| s.t == t0)?;
    fraction(first.loss, at_t0.loss, rec.final_loss())
}

#[derive(Clone, Debug, Serialize)]
pub struct GronwallReport {
    pub holds: bool,
    /// Largest `grad_sq(t) / (grad_sq(t_s) e^{−C(t − t_s)})` on the window.
    #[serde(with = "serde_f17")]
    pub worst_ratio: f64,
    #[serde(with = "serde_f17")]
    pub c: f64,
    #[serde(with = "serde_f17")]
    pub tolerance: f64,
    #[serde(with = "serde_f17")]
    pub window_start: f64,
    pub checked: usize,
    /// Time of the worst violation.
    #[serde(with = "serde_f17::option")]
    pub reproducer_t: Option<f64>,
}

/// Checks `‖g(t)‖² ≤ ‖g(t_s)‖² e^{−C(t − t_s)} (1 + tol)` on `[t_s, t₁]` with
/// `t_s = t₀` (or the first sample if `t₀` is absent) and `tol = 10·step⁴`.
pub fn gronwall_check(rec: &TrajectoryRecord, c: f64) -> Result<GronwallReport> {
    let step = rec
        .step
        .ok_or_else(|| Error::invalid("the decay bound applies to integrated flows only"))?;
    let ts = rec.t0.unwrap_or(rec.samples[0].t);
    gronwall_check_from(rec, c, ts, 10.0 * step.powi(4))
}

pub fn gronwall_check_from(rec: &TrajectoryRecord, c: f64, window_start: f64, tolerance: f64) -> Result<GronwallReport> {
    let start = rec
        .samples
        .iter()
        .find(|s| s.t >= window_start)
        .ok_or_else(|| Error::invalid("window starts after the last sample"))?;
    let mut worst_ratio = 0.0f64;
    let mut worst_t = None;
    let mut checked = 0;
    let mut holds = true;
    for s in rec.samples.iter().filter(|s| s.t >= start.t) {
        let bound = start.grad_sq * (-c * (s.t - start.t)).exp();
        checked += 1;
        let ratio = if bound > 0.0 {
            s.grad_sq / bound
        } else if s.grad_sq == 0.0 {
            1.0
        } else {
            f64::INFINITY
        };
        if s.grad_sq > bound * (1.0 + tolerance) {
            holds = false;
        }
        if ratio > worst_ratio {
            worst_ratio = ratio;
            worst_t = Some(s.t);
        }
    }
    Ok(GronwallReport {
        holds,
        worst_ratio,
        c,
        tolerance,
        window_start: start.t,
        checked,
        reproducer_t: if holds { None } else { worst_t },
    })
}

/// Percentile with linear interpolation between order statistics, at rank
/// `p/100 · (n − 1)`.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

#[derive(Clone, Debug, Serialize)]
pub struct PercentileStat {
    #[serde(with = "serde_f17")]
    pub p: f64,
    #[serde(with = "serde_f17::vec_option")]
    pub per_trial: Vec<Option<f64>>,
    #[serde(with = "serde_f17::option")]
    pub mean: Option<f64>,
    /// Sample standard deviation, absent with fewer than two trials.
    #[serde(with = "serde_f17::option")]
    pub std: Option<f64>,
}

/// Mean and sample standard deviation of values, ignoring absent ones.
pub fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Per-trial `p`-th percentile of the normalized values logged at `t ≥ t₀`.
pub fn trial_percentile(rec: &TrajectoryRecord, p: f64) -> Option<f64> {
    let t0 = rec.t0?;
    let vals: Vec<f64> = rec.samples.iter().filter(|s| s.t >= t0).filter_map(|s| s.normalized).collect();
    percentile(&vals, p)
}

pub fn percentile_stat(records: &[TrajectoryRecord], p: f64) -> Result<PercentileStat> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile must lie in [0, 100], got {p}")));
    }
    let per_trial: Vec<Option<f64>> = records.iter().map(|r| trial_percentile(r, p)).collect();
    let (mean, std) = mean_std(&per_trial);
    Ok(PercentileStat { p, per_trial, mean, std })
}

/// A run that stopped early, with everything logged before the stop.
#[derive(Debug)]
pub struct Interrupted {
    pub error: Error,
    pub partial: Option<TrajectoryRecord>,
}

impl fmt::Display for Interrupted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for Interrupted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for Interrupted {
    fn from(error: Error) -> Self {
        Self { error, partial: None }
    }
}

impl From<Interrupted> for Error {
    fn from(i: Interrupted) -> Self {
        i.error
    }
}

pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Epoch `e` shuffles with stream `(seed, SHUFFLE_STREAM + e)`, leaving the low
/// stream indices free for initialization.
pub const SHUFFLE_STREAM: u64 = 1 << 32;
pub const MONOTONE_TOL: f64 = 1e-8;

struct Logger<'a> {
    data: &'a Dataset,
    cfg: &'a LossConfig,
    samples: Vec<Sample>,
    prev_sig: Option<SwitchSignature>,
}

impl<'a> Logger<'a> {
    fn new(data: &'a Dataset, cfg: &'a LossConfig) -> Self {
        Self {
            data,
            cfg,
            samples: Vec::new(),
            prev_sig: None,
        }
    }

    fn log(&mut self, t: f64, params: &Params) -> Result<f64> {
        let sig = net::switch_signature(params, self.data, net::default_boundary_tol(params))?;
        let boundary_hit = sig.any_boundary() || self.prev_sig.as_ref().is_some_and(|p| !p.same_pattern(&sig));
        let loss = loss::reg_loss_with(params, self.data, self.cfg, Switching::Relu);
        let g = loss::gradient_over(params, self.data, 0..self.data.len(), self.cfg, Switching::Relu);
        let grad_sq = g.norm_sq();
        let gamma_dd = if grad_sq == 0.0 { 0.0 } else { primary_route(params, self.data, self.cfg, &g) };
        self.samples.push(Sample {
            t,
            loss,
            grad_sq,
            gamma_dd,
            normalized: (grad_sq > DEFAULT_GRAD_FLOOR).then(|| gamma_dd / grad_sq),
            boundary_hit,
        });
        self.prev_sig = Some(sig);
        Ok(loss)
    }

    fn finish(self, kind: TrajectoryKind, step: Option<f64>) -> Result<TrajectoryRecord> {
        TrajectoryRecord::new(kind, self.samples, step)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlowConfig {
    /// Integrator step; `None` picks `10⁻² / (1 + ‖∇ℓ_λ(W₀)‖)`.
    #[serde(with = "serde_f17::option")]
    pub step: Option<f64>,
    #[serde(with = "serde_f17")]
    pub horizon: f64,
    /// Log every this many integrator steps. The final time is always logged.
    pub log_every: usize,
}

pub fn default_step(params: &Params, data: &Dataset, cfg: &LossConfig) -> Result<f64> {
    Ok(1e-2 / (1.0 + loss::gradient(params, data, cfg)?.norm()))
}

/// Classical RK4 integration of `Ẇ = −∇ℓ_λ(W)` on `[0, T]`. The step is
/// shrunk so that a whole number of steps lands on `T`.
pub fn gradient_flow(start: &Params, data: &Dataset, cfg: &LossConfig, flow: &FlowConfig) -> std::result::Result<TrajectoryRecord, Interrupted> {
    data.check_arch(start.arch())?;
    if !(flow.horizon > 0.0 && flow.horizon.is_finite()) || flow.log_every == 0 {
        return Err(Error::invalid("flow needs horizon > 0 and log_every >= 1").into());
    }
    let requested = match flow.step {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::invalid(format!("step must be positive, got {h}")).into()),
        None => default_step(start, data, cfg)?,
    };
    let steps = (flow.horizon / requested).ceil().max(1.0) as usize;
    let h = flow.horizon / steps as f64;

    let grad = |w: &Params| loss::gradient_over(w, data, 0..data.len(), cfg, Switching::Relu);
    let mut logger = Logger::new(data, cfg);
    let mut w = start.clone();
    let gamma0 = logger.log(0.0, &w)?;
    let limit = DIVERGENCE_FACTOR * gamma0.max(f64::MIN_POSITIVE);
    let mut gamma = gamma0;
    for k in 1..=steps {
        let t = k as f64 * h;
        let k1 = grad(&w);
        let k2 = grad(&w.plus(-0.5 * h, &k1));
        let k3 = grad(&w.plus(-0.5 * h, &k2));
        let k4 = grad(&w.plus(-h, &k3));
        w.axpy(-h / 6.0, &k1);
        w.axpy(-h / 3.0, &k2);
        w.axpy(-h / 3.0, &k3);
        w.axpy(-h / 6.0, &k4);

        let next = loss::reg_loss_with(&w, data, cfg, Switching::Relu);
        let stop = if !next.is_finite() || next > limit {
            Some(Error::Divergence { time: t, loss: next, limit })
        } else if next - gamma > MONOTONE_TOL * gamma.abs() {
            Some(Error::NonMonotone {
                time: t,
                increase: next - gamma,
                suggested_step: h / 2.0,
            })
        } else {
            None
        };
        if let Some(error) = stop {
            return Err(Interrupted {
                error,
                partial: logger.finish(TrajectoryKind::Flow, Some(h)).ok(),
            });
        }
        gamma = next;
        if k % flow.log_every == 0 || k == steps {
            logger.log(t, &w)?;
        }
    }
    Ok(logger.finish(TrajectoryKind::Flow, Some(h))?)
}

/// Plain SGD, no momentum. The learning rate is piecewise constant in the
/// epoch: `schedule[k] = (first_epoch, rate)`, sorted by first epoch and
/// starting at 0.
#[derive(Clone, Debug, Serialize)]
pub struct SgdConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Vec<(usize, f64)>,
    pub seed: u64,
    /// Log every this many iterations. Iteration 0 and the last are always logged.
    pub log_every: usize,
}

impl SgdConfig {
    pub fn constant(batch_size: usize, epochs: usize, rate: f64, seed: u64, log_every: usize) -> Self {
        Self {
            batch_size,
            epochs,
            schedule: vec![(0, rate)],
            seed,
            log_every,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > n {
            return Err(Error::invalid(format!("batch size must lie in 1..={n}, got {}", self.batch_size)));
        }
        if self.epochs == 0 || self.log_every == 0 {
            return Err(Error::invalid("epochs and log_every must be positive"));
        }
        if self.schedule.first().map(|s| s.0) != Some(0) {
            return Err(Error::invalid("learning-rate schedule must start at epoch 0"));
        }
        if self.schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid("learning-rate schedule epochs must increase"));
        }
        if self.schedule.iter().any(|s| !(s.1 >= 0.0 && s.1.is_finite())) {
            return Err(Error::invalid("learning rates must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        self.schedule.iter().rev().find(|s| s.0 <= epoch).map_or(0.0, |s| s.1)
    }
}

/// Time is the iteration count. Diagnostics use the full-data `ℓ_λ`.
pub fn sgd_train(start: &Params, data: &Dataset, cfg: &LossConfig, sgd: &SgdConfig) -> std::result::Result<TrajectoryRecord, Interrupted> {
    data.check_arch(start.arch())?;
    sgd.validate(data.len())?;
    let mut logger = Logger::new(data, cfg);
    let mut w = start.clone();
    let gamma0 = logger.log(0.0, &w)?;
    let limit = DIVERGENCE_FACTOR * gamma0.max(f64::MIN_POSITIVE);
    let per_epoch = data.len().div_ceil(sgd.batch_size);
    let total = per_epoch * sgd.epochs;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iter = 0usize;
    for epoch in 0..sgd.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(sgd.seed, SHUFFLE_STREAM + epoch as u64));
        let lr = sgd.rate(epoch);
        for batch in order.chunks(sgd.batch_size) {
            let g = loss::gradient_over(&w, data, batch.iter().copied(), cfg, Switching::Relu);
            w.axpy(-lr, &g);
            iter += 1;
            if iter % sgd.log_every == 0 || iter == total {
                let t = iter as f64;
                let gamma = logger.log(t, &w)?;
                if !gamma.is_finite() || gamma > limit {
                    return Err(Interrupted {
                        error: Error::Divergence { time: t, loss: gamma, limit },
                        partial: logger.finish(TrajectoryKind::Sgd, None).ok(),
                    });
                }
            }
        }
    }
    Ok(logger.finish(TrajectoryKind::Sgd, None)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn sample(t: f64, loss: f64, gamma_dd: f64) -> Sample {
        Sample {
            t,
            loss,
            grad_sq: 1.0,
            gamma_dd,
            normalized: Some(gamma_dd),
            boundary_hit: false,
        }
    }

    fn bowl() -> (Params, Dataset, LossConfig) {
        let arch = "3,2,1".parse().unwrap();
        let w = Params::gaussian(&arch, 1.0, &mut rng::stream(1, 0));
        (w, fixtures::origin_dataset(3, 4, 0.0), LossConfig::new(1.0).unwrap())
    }

    #[test]
    fn bowl_gamma_second() {
        let (w, d, cfg) = bowl();
        let gs = gamma_second(&w, &d, &cfg).unwrap();
        assert!((gs.primary - 2.0 * w.norm_sq()).abs() <= 1e-12 * w.norm_sq());
        assert!(gs.rel_discrepancy < 1e-8);
        assert_eq!(normalized_second(&w, &d, &cfg, DEFAULT_GRAD_FLOOR).unwrap(), Some(2.0));
        let z = Params::zeros(w.arch());
        assert_eq!(gamma_second(&z, &d, &cfg).unwrap().primary, 0.0);
        assert_eq!(normalized_second(&z, &d, &cfg, DEFAULT_GRAD_FLOOR).unwrap(), None);
    }

    #[test]
    fn t1_routes_agree() {
        let (w, d) = fixtures::t1();
        let gs = gamma_second(&w, &d, &LossConfig::new(0.1).unwrap()).unwrap();
        assert!(gs.rel_discrepancy < 1e-6, "{gs:?}");
    }

    #[test]
    fn bowl_flow_matches_closed_form() {
        let (w, d, cfg) = bowl();
        let flow = FlowConfig {
            step: Some(1e-2),
            horizon: 1.0,
            log_every: 10,
        };
        let rec = gradient_flow(&w, &d, &cfg, &flow).unwrap();
        let last = rec.samples.last().unwrap();
        assert!((last.t - 1.0).abs() < 1e-15);
        let exact = w.norm_sq() * (-2.0f64).exp();
        assert!((last.grad_sq - exact).abs() <= 1e-6 * exact);
        assert_eq!(rec.samples.len(), 11);
        assert!(rec.samples.windows(2).all(|p| p[1].loss < p[0].loss));
        let gw = gronwall_check(&rec, 2.0).unwrap();
        assert!(gw.holds && (gw.worst_ratio - 1.0).abs() < 1e-6, "{gw:?}");
        assert!(gronwall_check(&rec, 0.0).unwrap().holds);
    }

    #[test]
    fn step_halving() {
        let (w, d) = fixtures::t1();
        let cfg = LossConfig::new(0.1).unwrap();
        let run = |h| {
            let flow = FlowConfig {
                step: Some(h),
                horizon: 2.0,
                log_every: 1000,
            };
            gradient_flow(&w, &d, &cfg, &flow).unwrap().final_loss()
        };
        let (a, b) = (run(1e-2), run(5e-3));
        assert!((a - b).abs() <= 1e-6 * b.abs());
    }

    #[test]
    fn flow_reports_divergence_with_partial_record() {
        let (w, d, _) = bowl();
        // Negative weight decay is rejected, so use a huge step on a stiff bowl.
        let cfg = LossConfig::new(1e3).unwrap();
        let flow = FlowConfig {
            step: Some(1.0),
            horizon: 50.0,
            log_every: 1,
        };
        let err = gradient_flow(&w, &d, &cfg, &flow).unwrap_err();
        assert!(matches!(err.error, Error::Divergence { .. } | Error::NonMonotone { .. }));
        assert!(err.partial.is_some());
    }

    #[test]
    fn t0_examples() {
        let signs = [-1.0, 1.0, -1.0, 1.0, 1.0];
        let s: Vec<Sample> = signs.iter().enumerate().map(|(k, &g)| sample(k as f64, 1.0, g)).collect();
        assert_eq!(detect_t0(&s), Some(3.0));
        let pos: Vec<Sample> = (0..4).map(|k| sample(k as f64, 1.0, 1.0)).collect();
        assert_eq!(detect_t0(&pos), Some(0.0));
        let mut neg = pos.clone();
        neg.last_mut().unwrap().gamma_dd = 0.0;
        assert_eq!(detect_t0(&neg), None);
    }

    #[test]
    fn fraction_examples() {
        assert_eq!(fraction(1.0, 0.4, 0.2), Some(0.25));
        assert_eq!(fraction(1.0, 1.0, 0.2), Some(1.0));
        assert_eq!(fraction(1.0, 0.2, 0.2), Some(0.0));
        assert_eq!(fraction(0.5, 0.5, 0.5), None);

        let s = vec![sample(0.0, 1.0, -1.0), sample(1.0, 0.4, 1.0), sample(2.0, 0.2, 1.0)];
        let rec = TrajectoryRecord::new(TrajectoryKind::Sgd, s, None).unwrap();
        assert_eq!(rec.t0, Some(1.0));
        assert_eq!(rec.loss_fraction(), Some(0.25));
    }

    #[test]
    fn percentile_examples() {
        let series: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&series, 10.0).unwrap() - 10.9).abs() < 1e-12);
        assert_eq!(percentile(&[3.5; 7], 37.0), Some(3.5));
        assert_eq!(percentile(&[], 10.0), None);
        let (m, s) = mean_std(&[Some(1.0), Some(3.0), None]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_is_constant_and_deterministic() {
        let (w, d) = fixtures::t1();
        let cfg = LossConfig::new(0.1).unwrap();
        let sgd = SgdConfig::constant(1, 3, 0.0, 9, 1);
        let rec = sgd_train(&w, &d, &cfg, &sgd).unwrap();
        assert!(rec.samples.iter().all(|s| s.loss == rec.samples[0].loss));
        let again = sgd_train(&w, &d, &cfg, &sgd).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn full_batch_sgd_is_gradient_descent() {
        let arch = "3,4,1".parse().unwrap();
        let w = Params::he_init(&arch, 1.0, &mut rng::stream(2, 0));
        let d = Dataset::new(
            vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.4], vec![-0.5, 0.3, 0.8]],
            vec![0.5, 1.0, 0.2],
        )
        .unwrap();
        let cfg = LossConfig::new(0.01).unwrap();
        let lr = 0.1;
        let mut reference = w.clone();
        for _ in 0..3 {
            let g = loss::gradient(&reference, &d, &cfg).unwrap();
            reference.axpy(-lr, &g);
        }
        let rec = sgd_train(&w, &d, &cfg, &SgdConfig::constant(3, 3, lr, 4, 1)).unwrap();
        let want = loss::reg_loss(&reference, &d, &cfg).unwrap();
        assert!((rec.final_loss() - want).abs() <= 1e-12 * (1.0 + want));
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![sample(0.0, 1.0, -1.0), sample(1.5, 0.25, 1.0)];
        let mut rec = TrajectoryRecord::new(TrajectoryKind::Flow, s, Some(0.5)).unwrap();
        rec.samples[0].normalized = None;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        rec.write_csv(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with(CSV_HEADER));
        assert_eq!(read_trajectory_csv(&p).unwrap(), rec.samples);
    }
}
