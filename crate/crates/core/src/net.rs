//! ReLU network evaluation in switch-matrix form.
//!
//! A network with `H` hidden layers maps `a ∈ ℝ^{n₀}` to
//! `y = σ(W_Hᵀ σ(… σ(W₀ᵀ a)))`, with ReLU applied at every layer including the
//! scalar output. Layer `j ∈ 1..=H+1` has pre-activations `z_j = W_{j-1}ᵀ h_{j-1}`
//! and switches `S_j = diag(1{z_j > 0})`; the network equals the product
//! `S_{H+1} W_Hᵀ S_H ⋯ S₁ W₀ᵀ a`. Holding the switches fixed gives the frozen
//! (piecewise polynomial) network used throughout the curvature analysis.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};

/// Layer widths `(n₀, n₁, …, n_H, 1)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::invalid(format!(
                "architecture needs an input, at least one hidden layer and an output, got {widths:?}"
            )));
        }
        if widths.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("zero layer width in {widths:?}")));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::invalid(format!(
                "output width must be 1 (scalar network), got {widths:?}"
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    /// Number of hidden layers `H`.
    pub fn hidden_layers(&self) -> usize {
        self.widths.len() - 2
    }

    /// Number of weight matrices, `H + 1`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    /// Total scalar parameter count `m = Σ n_i n_{i+1}`.
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        (self.widths[i], self.widths[i + 1])
    }

    /// Whether every hidden layer is wider than one unit.
    pub fn hidden_widths_exceed_one(&self) -> bool {
        self.widths[1..self.widths.len() - 1].iter().all(|&n| n > 1)
    }
}

impl TryFrom<Vec<usize>> for Architecture {
    type Error = Error;

    fn try_from(widths: Vec<usize>) -> Result<Self> {
        Architecture::new(widths)
    }
}

impl From<Architecture> for Vec<usize> {
    fn from(a: Architecture) -> Self {
        a.widths
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split([',', 'x'])
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer width {t:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Architecture::new(widths)
    }
}

/// The weight collection `W = (W₀, …, W_H)`, with `W_i` of shape `n_i × n_{i+1}`.
///
/// Search directions share the same representation (see [`Direction`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct Params {
    arch: Architecture,
    layers: Vec<Matrix>,
}

/// A perturbation `X = (X₀, …, X_H)` with the same shapes as [`Params`].
pub type Direction = Params;

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    widths: Architecture,
    layers: Vec<Matrix>,
}

impl TryFrom<ParamsRepr> for Params {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        Params::from_layers(r.widths, r.layers)
    }
}

impl From<Params> for ParamsRepr {
    fn from(p: Params) -> Self {
        ParamsRepr {
            widths: p.arch,
            layers: p.layers,
        }
    }
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = (0..arch.depth())
            .map(|i| {
                let (r, c) = arch.layer_shape(i);
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn from_layers(arch: Architecture, layers: Vec<Matrix>) -> Result<Self> {
        if layers.len() != arch.depth() {
            return Err(Error::invalid(format!(
                "expected {} weight matrices for architecture {arch}, got {}",
                arch.depth(),
                layers.len()
            )));
        }
        for (i, m) in layers.iter().enumerate() {
            if m.shape() != arch.layer_shape(i) {
                return Err(Error::invalid(format!(
                    "layer {i} has shape {:?}, architecture {arch} needs {:?}",
                    m.shape(),
                    arch.layer_shape(i)
                )));
            }
        }
        Ok(Self { arch, layers })
    }

    /// Infers the architecture from the matrix shapes.
    pub fn from_matrices(layers: Vec<Matrix>) -> Result<Self> {
        let mut widths: Vec<usize> = layers.iter().map(Matrix::rows).collect();
        widths.push(layers.last().map_or(0, Matrix::cols));
        for pair in layers.windows(2) {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::invalid("consecutive weight shapes do not chain"));
            }
        }
        Params::from_layers(Architecture::new(widths)?, layers)
    }

    /// Independent Gaussian entries with standard deviation `scale`.
    pub fn gaussian<R: Rng + ?Sized>(arch: &Architecture, scale: f64, rng: &mut R) -> Self {
        let mut p = Params::zeros(arch);
        for v in p.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        }
        p
    }

    /// He-style initialization: layer `i` drawn with standard deviation `gain·√(2/n_i)`.
    pub fn he_init<R: Rng + ?Sized>(arch: &Architecture, gain: f64, rng: &mut R) -> Self {
        let mut p = Params::zeros(arch);
        for m in p.layers.iter_mut() {
            let sd = gain * (2.0 / m.rows() as f64).sqrt();
            for v in m.as_mut_slice() {
                let z: f64 = StandardNormal.sample(rng);
                *v = sd * z;
            }
        }
        p
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &Matrix {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.layers[i]
    }

    pub fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|m| m.as_slice().iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|m| m.as_mut_slice().iter_mut())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn from_flat(arch: &Architecture, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, architecture {arch} has {}",
                flat.len(),
                arch.num_params()
            )));
        }
        let mut p = Params::zeros(arch);
        for (dst, &src) in p.iter_mut().zip(flat) {
            *dst = src;
        }
        Ok(p)
    }

    /// The `k`-th coordinate direction in flat ordering (layer-major, row-major).
    pub fn basis(arch: &Architecture, k: usize) -> Self {
        let mut p = Params::zeros(arch);
        if let Some(v) = p.iter_mut().nth(k) {
            *v = 1.0;
        }
        p
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(Matrix::frobenius_sq).sum()
    }

    /// Euclidean norm `‖W‖` over all entries.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &Params) -> f64 {
        self.assert_same_shape(other);
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| matrix::dot(a.as_slice(), b.as_slice()))
            .sum()
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Params) {
        self.assert_same_shape(other);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            matrix::axpy(alpha, b.as_slice(), a.as_mut_slice());
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.iter_mut() {
            *v *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> Params {
        let mut p = self.clone();
        p.scale(c);
        p
    }

    /// `self + alpha · other` as a new value.
    pub fn plus(&self, alpha: f64, other: &Params) -> Params {
        let mut p = self.clone();
        p.axpy(alpha, other);
        p
    }

    pub fn distance(&self, other: &Params) -> f64 {
        self.plus(-1.0, other).norm()
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&v| v == 0.0)
    }

    fn assert_same_shape(&self, other: &Params) {
        assert_eq!(self.arch, other.arch, "parameter shapes differ");
    }

    pub(crate) fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.arch.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, network expects {}",
                input.len(),
                self.arch.input_dim()
            )));
        }
        Ok(())
    }
}

/// Labelled samples `{a_i, f(a_i)}` with a declared input radius `r ≥ max‖a_i‖₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<f64>,
    radius: f64,
}

impl Dataset {
    /// Builds a dataset whose radius is the largest input norm.
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("dataset needs at least one sample"));
        }
        if inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let dim = inputs[0].len();
        if dim == 0 {
            return Err(Error::invalid("inputs must have positive dimension"));
        }
        if let Some(i) = inputs.iter().position(|a| a.len() != dim) {
            return Err(Error::invalid(format!(
                "sample {i} has dimension {}, expected {dim}",
                inputs[i].len()
            )));
        }
        if inputs.iter().flatten().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        let radius = inputs.iter().map(|a| matrix::norm2(a)).fold(0.0, f64::max);
        Ok(Self {
            inputs,
            labels,
            radius,
        })
    }

    /// Overrides the declared radius; it may not fall below the largest input norm.
    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        let max_norm = self.max_input_norm();
        if !(radius.is_finite() && radius >= max_norm * (1.0 - 1e-12)) {
            return Err(Error::invalid(format!(
                "radius {radius} is below the largest input norm {max_norm}"
            )));
        }
        // Rounding-level shortfalls are absorbed so that r ≥ max‖a_i‖ holds exactly.
        self.radius = radius.max(max_norm);
        Ok(self)
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn max_input_norm(&self) -> f64 {
        self.inputs.iter().map(|a| matrix::norm2(a)).fold(0.0, f64::max)
    }

    /// Subset by sample index, keeping the declared radius.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            radius: self.radius,
        }
    }

    pub(crate) fn check_arch(&self, arch: &Architecture) -> Result<()> {
        if self.input_dim() != arch.input_dim() {
            return Err(Error::invalid(format!(
                "dataset inputs have dimension {}, architecture {arch} expects {}",
                self.input_dim(),
                arch.input_dim()
            )));
        }
        Ok(())
    }
}

/// Switch pattern of one layer for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerSwitches {
    /// `true` iff the pre-activation is strictly positive.
    pub active: Vec<bool>,
    /// `true` iff `|pre-activation| ≤ ε_b`.
    pub boundary: Vec<bool>,
}

/// Activation pattern `S_j(a_i, W)` for every sample `i` and layer `j ∈ 1..=H+1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SwitchSignature {
    samples: Vec<Vec<LayerSwitches>>,
}

impl SwitchSignature {
    /// Every switch on: the linear-network pattern.
    pub fn all_active(arch: &Architecture, samples: usize) -> Self {
        let per_sample: Vec<LayerSwitches> = arch.widths()[1..]
            .iter()
            .map(|&n| LayerSwitches {
                active: vec![true; n],
                boundary: vec![false; n],
            })
            .collect();
        Self {
            samples: vec![per_sample; samples],
        }
    }

    pub fn all_inactive(arch: &Architecture, samples: usize) -> Self {
        let per_sample: Vec<LayerSwitches> = arch.widths()[1..]
            .iter()
            .map(|&n| LayerSwitches {
                active: vec![false; n],
                boundary: vec![false; n],
            })
            .collect();
        Self {
            samples: vec![per_sample; samples],
        }
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// Layers `1..=H+1` of sample `i`, indexed from 0.
    pub fn sample(&self, i: usize) -> &[LayerSwitches] {
        &self.samples[i]
    }

    /// Switch values of layer `layer ∈ 1..=H+1` for sample `i`.
    pub fn layer(&self, i: usize, layer: usize) -> &LayerSwitches {
        &self.samples[i][layer - 1]
    }

    pub fn any_boundary(&self) -> bool {
        self.samples
            .iter()
            .flatten()
            .any(|l| l.boundary.iter().any(|&b| b))
    }

    /// Equality of the on/off bits, ignoring boundary flags.
    pub fn same_pattern(&self, other: &SwitchSignature) -> bool {
        self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .flatten()
                .zip(other.samples.iter().flatten())
                .all(|(a, b)| a.active == b.active)
    }

    pub fn active_count(&self) -> usize {
        self.samples
            .iter()
            .flatten()
            .map(|l| l.active.iter().filter(|&&b| b).count())
            .sum()
    }

    fn check_shape(&self, arch: &Architecture, sample: usize) -> Result<()> {
        let s = self
            .samples
            .get(sample)
            .ok_or_else(|| Error::invalid(format!("signature has no sample {sample}")))?;
        let ok = s.len() == arch.depth()
            && s
                .iter()
                .zip(&arch.widths()[1..])
                .all(|(l, &n)| l.active.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("signature shape does not match the architecture"))
        }
    }
}

/// How switches are chosen during an evaluation.
#[derive(Clone, Copy, Debug)]
pub enum Switching<'a> {
    /// Switches follow the current pre-activations (the true ReLU network).
    Relu,
    /// Switches held at a fixed signature, indexed by sample.
    Frozen(&'a SwitchSignature),
    /// Every switch on.
    Linear,
}

/// Forward activations and switch masks for one sample.
///
/// `acts[0]` is the input, `acts[j]` the output of layer `j`; `acts[H+1]` holds `y`.
/// `masks[j]` (for `j ≥ 1`) holds the 0/1 switch values of layer `j`.
pub(crate) struct Trace {
    pub acts: Vec<Vec<f64>>,
    pub masks: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> f64 {
        self.acts.last().unwrap()[0]
    }
}

pub(crate) fn trace(params: &Params, input: &[f64], switching: Switching<'_>, sample: usize) -> Trace {
    let depth = params.layers.len();
    let mut acts = Vec::with_capacity(depth + 1);
    let mut masks = Vec::with_capacity(depth + 1);
    acts.push(input.to_vec());
    masks.push(Vec::new());
    for (l, w) in params.layers.iter().enumerate() {
        let mut z = w.tr_mul_vec(&acts[l]);
        let mask: Vec<f64> = match switching {
            Switching::Relu => z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
            Switching::Frozen(sig) => sig.samples[sample][l]
                .active
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
            Switching::Linear => vec![1.0; z.len()],
        };
        for (zi, &m) in z.iter_mut().zip(&mask) {
            if m == 0.0 {
                *zi = 0.0;
            }
        }
        acts.push(z);
        masks.push(mask);
    }
    Trace { acts, masks }
}

/// Pre-activations `z_1, …, z_{H+1}` of the ReLU network for one input.
pub fn preactivations(params: &Params, input: &[f64]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(params.layers.len());
    let mut h = input.to_vec();
    for w in &params.layers {
        let z = w.tr_mul_vec(&h);
        h = z.iter().map(|&v| v.max(0.0)).collect();
        out.push(z);
    }
    out
}

/// Smallest `|pre-activation|` over all samples, layers and units.
pub fn preactivation_margin(params: &Params, data: &Dataset) -> f64 {
    data.inputs()
        .iter()
        .flat_map(|a| preactivations(params, a))
        .flatten()
        .fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

/// Network output `y(a, W)`.
pub fn forward(input: &[f64], params: &Params) -> Result<f64> {
    params.check_input(input)?;
    Ok(trace(params, input, Switching::Relu, 0).output())
}

/// Output `ỹ(a, W)` with the switches held at `sig`'s entry for `sample`.
pub fn frozen_forward(input: &[f64], params: &Params, sig: &SwitchSignature, sample: usize) -> Result<f64> {
    params.check_input(input)?;
    sig.check_shape(params.arch(), sample)?;
    Ok(trace(params, input, Switching::Frozen(sig), sample).output())
}

/// Default boundary tolerance `10⁻⁹ · max(1, ‖W‖_*)`.
pub fn default_boundary_tol(params: &Params) -> f64 {
    1e-9 * crate::spectral::star_norm(params).max(1.0)
}

/// Switch bits and boundary flags for every sample and layer.
pub fn switch_signature(params: &Params, data: &Dataset, boundary_tol: f64) -> Result<SwitchSignature> {
    data.check_arch(params.arch())?;
    if !(boundary_tol >= 0.0) {
        return Err(Error::invalid("boundary tolerance must be non-negative"));
    }
    let samples = data
        .inputs()
        .iter()
        .map(|a| {
            preactivations(params, a)
                .into_iter()
                .map(|z| LayerSwitches {
                    active: z.iter().map(|&v| v > 0.0).collect(),
                    boundary: z.iter().map(|&v| v.abs() <= boundary_tol).collect(),
                })
                .collect()
        })
        .collect();
    Ok(SwitchSignature { samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    /// No pre-activation vanishes: the loss is a polynomial near `W`.
    SmoothAnalytic,
    /// Every vanishing pre-activation sits behind a fully switched-off layer,
    /// so the affected outputs are locally constant.
    SmoothConstant,
    /// Some vanishing pre-activation is fed by a live layer.
    PotentiallyNonsmooth,
}

/// Location of a vanishing pre-activation: sample index (from 0), layer
/// `j ∈ 1..=H+1` and unit index (from 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Witness {
    pub sample: usize,
    pub layer: usize,
    pub unit: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RegionClass {
    pub kind: RegionKind,
    pub witness: Option<Witness>,
}

/// Smoothness class of `W` with respect to the whole dataset.
pub fn region_classify(params: &Params, data: &Dataset, boundary_tol: f64) -> Result<RegionClass> {
    let sig = switch_signature(params, data, boundary_tol)?;
    let mut constant_witness = None;
    for (i, layers) in sig.samples.iter().enumerate() {
        // Only the first layer containing a vanishing pre-activation matters.
        let Some(l) = layers.iter().position(|ls| ls.boundary.iter().any(|&b| b)) else {
            continue;
        };
        let unit = layers[l].boundary.iter().position(|&b| b).unwrap();
        let witness = Witness {
            sample: i,
            layer: l + 1,
            unit,
        };
        let fed_by_dead_layer = if l == 0 {
            data.input(i).iter().all(|&v| v == 0.0)
        } else {
            layers[l - 1].active.iter().all(|&b| !b)
        };
        if !fed_by_dead_layer {
            return Ok(RegionClass {
                kind: RegionKind::PotentiallyNonsmooth,
                witness: Some(witness),
            });
        }
        constant_witness.get_or_insert(witness);
    }
    Ok(match constant_witness {
        None => RegionClass {
            kind: RegionKind::SmoothAnalytic,
            witness: None,
        },
        Some(w) => RegionClass {
            kind: RegionKind::SmoothConstant,
            witness: Some(w),
        },
    })
}
