//! Loss functions for the two stages, selection policies and label models.
//!
//! A first-stage loss is a function `ℓ₀(u, s, c, ε)` of the base prediction
//! `u`, and a second-stage loss a function `ℓ(r, u, s, c, ε)` of the final
//! prediction `r` and of the base prediction `u`. Both carry the exact set of
//! partial derivatives the asymptotic equations consume. Everything here is
//! immutable once built and can be shared across worker threads.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid budget: require 0 < psi <= gamma <= 1, got psi={psi}, gamma={gamma}")]
    InvalidBudget { psi: f64, gamma: f64 },
    #[error("invalid policy parameter: {0}")]
    InvalidPolicy(String),
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
}

/// Latent description of one sample: teacher pre-activation `s = ⟨β, x⟩`,
/// class id and noise draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Latent {
    pub s: f64,
    pub class: usize,
    pub noise: f64,
}

impl Latent {
    pub fn new(s: f64, class: usize, noise: f64) -> Self {
        Self { s, class, noise }
    }
}

/// `sign(0) = +1`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

// ---------------------------------------------------------------------------
// Label model
// ---------------------------------------------------------------------------

/// Maps `(s, c, ε)` to a label `y`.
pub trait LinkFunction: Send + Sync + fmt::Debug {
    fn eval(&self, s: f64, class: usize, noise: f64) -> f64;
    fn name(&self) -> &'static str;
}

/// `y = ε · sign(s)`; with the identity noise `ε = 1` this is `sign(s)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SignLink;

impl LinkFunction for SignLink {
    fn eval(&self, s: f64, _class: usize, noise: f64) -> f64 {
        noise * sign(s)
    }
    fn name(&self) -> &'static str {
        "sign"
    }
}

/// `y = ε · label[c]`: the label is the (possibly flipped) cluster membership.
#[derive(Debug, Clone)]
pub struct ClassLink {
    pub labels: Vec<f64>,
}

impl ClassLink {
    /// Two clusters labelled `-1` (class 0) and `+1` (class 1).
    pub fn binary() -> Self {
        Self {
            labels: vec![-1.0, 1.0],
        }
    }
}

impl LinkFunction for ClassLink {
    fn eval(&self, _s: f64, class: usize, noise: f64) -> f64 {
        noise * self.labels[class]
    }
    fn name(&self) -> &'static str {
        "class"
    }
}

/// Distribution of the per-sample noise `ε`. Both built-ins have finite
/// support, which the integrator enumerates exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// `ε = value` almost surely.
    PointMass(f64),
    /// `ε = -1` with probability `p`, `+1` otherwise.
    SignFlip { p: f64 },
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::PointMass(1.0)
    }
}

impl NoiseModel {
    pub fn identity() -> Self {
        NoiseModel::PointMass(1.0)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match *self {
            NoiseModel::PointMass(v) if !v.is_finite() => {
                Err(LossError::InvalidNoise(format!("point mass at {v}")))
            }
            NoiseModel::SignFlip { p } if !(0.0..=1.0).contains(&p) => Err(LossError::InvalidNoise(format!(
                "flip probability {p} outside [0, 1]"
            ))),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseModel::PointMass(v) => v,
            NoiseModel::SignFlip { p } => {
                if rng.random::<f64>() < p {
                    -1.0
                } else {
                    1.0
                }
            }
        }
    }

    /// Atoms `(value, probability)` with positive probability.
    pub fn support(&self) -> Vec<(f64, f64)> {
        match *self {
            NoiseModel::PointMass(v) => vec![(v, 1.0)],
            NoiseModel::SignFlip { p } => [(1.0, 1.0 - p), (-1.0, p)]
                .into_iter()
                .filter(|&(_, w)| w > 0.0)
                .collect(),
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            NoiseModel::PointMass(v) => format!("point-mass({v})"),
            NoiseModel::SignFlip { p } => format!("sign-flip({p})"),
        }
    }
}

// ---------------------------------------------------------------------------
// Base losses ℓ̃(z, y)
// ---------------------------------------------------------------------------

/// Convex loss of a prediction `z` against a label `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginLoss {
    /// `log(1 + exp(-y z))`
    Logistic,
    /// `(z - y)² / 2`
    Square,
    /// Identically zero.
    Zero,
}

impl MarginLoss {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "logistic" => Some(MarginLoss::Logistic),
            "square" => Some(MarginLoss::Square),
            "zero" => Some(MarginLoss::Zero),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarginLoss::Logistic => "logistic",
            MarginLoss::Square => "square",
            MarginLoss::Zero => "zero",
        }
    }

    #[inline]
    pub fn value(&self, z: f64, y: f64) -> f64 {
        match self {
            MarginLoss::Logistic => softplus(-y * z),
            MarginLoss::Square => 0.5 * (z - y) * (z - y),
            MarginLoss::Zero => 0.0,
        }
    }

    #[inline]
    pub fn d1(&self, z: f64, y: f64) -> f64 {
        match self {
            MarginLoss::Logistic => -y * sigmoid(-y * z),
            MarginLoss::Square => z - y,
            MarginLoss::Zero => 0.0,
        }
    }

    #[inline]
    pub fn d2(&self, z: f64, y: f64) -> f64 {
        match self {
            MarginLoss::Logistic => {
                let a = y * z;
                y * y * sigmoid(a) * sigmoid(-a)
            }
            MarginLoss::Square => 1.0,
            MarginLoss::Zero => 0.0,
        }
    }

    #[inline]
    pub fn d3(&self, z: f64, y: f64) -> f64 {
        match self {
            MarginLoss::Logistic => {
                let a = y * z;
                let (p, m) = (sigmoid(a), sigmoid(-a));
                y * y * y * p * m * (m - p)
            }
            MarginLoss::Square | MarginLoss::Zero => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Selection policies
// ---------------------------------------------------------------------------

/// Which samples a policy keeps. Thresholds may be `f64::INFINITY`, and the
/// boundary cases are exact: a small-margin band with `κ ≤ 0` keeps nothing,
/// a large-margin policy with `κ ≤ 0` keeps everything and one with `κ = ∞`
/// keeps nothing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    /// Keep `|u| < κ`.
    SmallMargin { kappa: f64 },
    /// Keep `|u| > κ`.
    LargeMargin { kappa: f64 },
    /// Keep `|u| < κ⁻` or `|u| > κ⁺`.
    Mixed { kappa_minus: f64, kappa_plus: f64 },
    /// Keep samples whose base prediction has the sign of their label.
    CorrectlyClassified,
    /// Keep every sample with weight `p`.
    Constant(f64),
}

/// A selection policy `π(u, y) ∈ [0, 1]`.
///
/// With `width = 0` the policy is the exact indicator and its derivatives are
/// taken to vanish (they do almost everywhere). With `width > 0` every
/// threshold crossing is replaced by a logistic sigmoid of that width, which
/// makes `π` smooth in `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    pub width: f64,
}

/// Value and first two derivatives of a smoothed step `σ(t / w)`.
#[inline]
fn smooth_step(t: f64, w: f64) -> (f64, f64, f64) {
    let p = sigmoid(t / w);
    let dp = p * (1.0 - p);
    (p, dp / w, dp * (1.0 - 2.0 * p) / (w * w))
}

impl SelectionPolicy {
    pub fn new(kind: PolicyKind, width: f64) -> Result<Self, LossError> {
        if !(width >= 0.0 && width.is_finite()) {
            return Err(LossError::InvalidPolicy(format!("width {width}")));
        }
        match kind {
            PolicyKind::SmallMargin { kappa } | PolicyKind::LargeMargin { kappa } if kappa.is_nan() => {
                return Err(LossError::InvalidPolicy("threshold is NaN".into()));
            }
            PolicyKind::Mixed {
                kappa_minus,
                kappa_plus,
            } if kappa_minus.is_nan() || kappa_plus.is_nan() || kappa_minus > kappa_plus => {
                return Err(LossError::InvalidPolicy(format!(
                    "mixed policy needs kappa_minus <= kappa_plus, got {kappa_minus} > {kappa_plus}"
                )));
            }
            PolicyKind::Constant(p) if !(0.0..=1.0).contains(&p) => {
                return Err(LossError::InvalidPolicy(format!("constant weight {p}")));
            }
            _ => {}
        }
        Ok(Self { kind, width })
    }

    /// Exact indicator version of `kind`.
    pub fn indicator(kind: PolicyKind) -> Result<Self, LossError> {
        Self::new(kind, 0.0)
    }

    pub fn constant(p: f64) -> Self {
        Self {
            kind: PolicyKind::Constant(p),
            width: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            PolicyKind::SmallMargin { .. } => "small-margin",
            PolicyKind::LargeMargin { .. } => "large-margin",
            PolicyKind::Mixed { .. } => "mixed",
            PolicyKind::CorrectlyClassified => "correct-classified",
            PolicyKind::Constant(_) => "constant",
        }
    }

    /// True when the policy is a discontinuous indicator whose derivative is
    /// only zero almost everywhere.
    pub fn is_indicator(&self) -> bool {
        self.width == 0.0 && !matches!(self.kind, PolicyKind::Constant(_))
    }

    /// `(π, ∂_u π, ∂_u² π)` at base prediction `u` for a sample labelled `y`.
    pub fn eval_all(&self, u: f64, y: f64) -> (f64, f64, f64) {
        match self.kind {
            PolicyKind::Constant(p) => (p, 0.0, 0.0),
            PolicyKind::SmallMargin { kappa } => self.small(u, kappa),
            PolicyKind::LargeMargin { kappa } => self.large(u, kappa),
            PolicyKind::Mixed {
                kappa_minus,
                kappa_plus,
            } => {
                let a = self.small(u, kappa_minus);
                let b = self.large(u, kappa_plus);
                (a.0 + b.0, a.1 + b.1, a.2 + b.2)
            }
            PolicyKind::CorrectlyClassified => {
                if self.width == 0.0 {
                    (if sign(u) == y { 1.0 } else { 0.0 }, 0.0, 0.0)
                } else {
                    let (p, d1, d2) = smooth_step(y * u, self.width);
                    (p, d1 * y, d2 * y * y)
                }
            }
        }
    }

    #[inline]
    pub fn eval(&self, u: f64, y: f64) -> f64 {
        self.eval_all(u, y).0
    }

    #[inline]
    pub fn d1(&self, u: f64, y: f64) -> f64 {
        self.eval_all(u, y).1
    }

    #[inline]
    pub fn d2(&self, u: f64, y: f64) -> f64 {
        self.eval_all(u, y).2
    }

    fn small(&self, u: f64, kappa: f64) -> (f64, f64, f64) {
        if kappa <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        if kappa == f64::INFINITY {
            return (1.0, 0.0, 0.0);
        }
        if self.width == 0.0 {
            return (if u.abs() < kappa { 1.0 } else { 0.0 }, 0.0, 0.0);
        }
        let (p, d1, d2) = smooth_step(kappa - u.abs(), self.width);
        (p, -sign(u) * d1, d2)
    }

    fn large(&self, u: f64, kappa: f64) -> (f64, f64, f64) {
        if kappa <= 0.0 {
            return (1.0, 0.0, 0.0);
        }
        if kappa == f64::INFINITY {
            return (0.0, 0.0, 0.0);
        }
        if self.width == 0.0 {
            return (if u.abs() > kappa { 1.0 } else { 0.0 }, 0.0, 0.0);
        }
        let (p, d1, d2) = smooth_step(u.abs() - kappa, self.width);
        (p, sign(u) * d1, d2)
    }
}

// ---------------------------------------------------------------------------
// Stage losses
// ---------------------------------------------------------------------------

/// First-stage loss `ℓ₀(u, s, c, ε)`; derivatives are with respect to `u`.
pub trait Stage0Loss: Send + Sync + fmt::Debug {
    fn value(&self, u: f64, x: &Latent) -> f64;
    fn d1(&self, u: f64, x: &Latent) -> f64;
    fn d2(&self, u: f64, x: &Latent) -> f64;
    fn d3(&self, u: f64, x: &Latent) -> f64;
    fn describe(&self) -> String;
}

/// Second-stage loss `ℓ(r, u, s, c, ε)`.
pub trait Stage1Loss: Send + Sync + fmt::Debug {
    fn value(&self, r: f64, u: f64, x: &Latent) -> f64;
    /// `∂_r ℓ`
    fn dr(&self, r: f64, u: f64, x: &Latent) -> f64;
    /// `∂_r² ℓ`
    fn drr(&self, r: f64, u: f64, x: &Latent) -> f64;
    /// `∂_u ℓ`
    fn du(&self, r: f64, u: f64, x: &Latent) -> f64;
    /// `∂_r ∂_u ℓ`
    fn dru(&self, r: f64, u: f64, x: &Latent) -> f64;
    fn describe(&self) -> String;

    /// Multiplicative sample weight for losses of the form `w(u, ·) ℓ̃(r, y)`.
    fn sample_weight(&self, _u: f64, _x: &Latent) -> Option<f64> {
        None
    }

    /// True if the `u`-dependence goes through an exact indicator, so the
    /// `u`-derivatives above vanish only almost everywhere.
    fn has_indicator(&self) -> bool {
        false
    }
}

pub type SharedStage0 = Arc<dyn Stage0Loss>;
pub type SharedStage1 = Arc<dyn Stage1Loss>;

/// `ℓ₀(u, s, c, ε) = a_c · ℓ̃₀(u, φ(s, c, ε))` with per-class weights `a_c`
/// (all ones when `class_weights` is `None`).
#[derive(Debug, Clone)]
pub struct LabelledStage0 {
    pub base: MarginLoss,
    pub link: Arc<dyn LinkFunction>,
    pub class_weights: Option<Vec<f64>>,
}

impl LabelledStage0 {
    #[inline]
    fn weight_and_label(&self, x: &Latent) -> (f64, f64) {
        let a = self.class_weights.as_ref().map_or(1.0, |w| w[x.class]);
        (a, self.link.eval(x.s, x.class, x.noise))
    }
}

impl Stage0Loss for LabelledStage0 {
    fn value(&self, u: f64, x: &Latent) -> f64 {
        let (a, y) = self.weight_and_label(x);
        if a == 0.0 {
            return 0.0;
        }
        a * self.base.value(u, y)
    }
    fn d1(&self, u: f64, x: &Latent) -> f64 {
        let (a, y) = self.weight_and_label(x);
        if a == 0.0 {
            return 0.0;
        }
        a * self.base.d1(u, y)
    }
    fn d2(&self, u: f64, x: &Latent) -> f64 {
        let (a, y) = self.weight_and_label(x);
        if a == 0.0 {
            return 0.0;
        }
        a * self.base.d2(u, y)
    }
    fn d3(&self, u: f64, x: &Latent) -> f64 {
        let (a, y) = self.weight_and_label(x);
        if a == 0.0 {
            return 0.0;
        }
        a * self.base.d3(u, y)
    }
    fn describe(&self) -> String {
        match &self.class_weights {
            None => format!("{}[{}]", self.base.name(), self.link.name()),
            Some(w) => format!("{}[{}] class-weights {:?}", self.base.name(), self.link.name(), w),
        }
    }
}

/// How the second-stage loss weights a sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleWeight {
    /// Constant weight.
    Uniform(f64),
    /// Budgeted active learning: `((1 - c) π(u, y) + c) / γ`, where class 1
    /// is the randomly queried base set.
    ActiveLearning { policy: SelectionPolicy, gamma: f64 },
    /// Pruning: `π(u, y)`.
    Policy(SelectionPolicy),
}

impl SampleWeight {
    /// `(w, ∂_u w)`.
    #[inline]
    fn eval(&self, u: f64, y: f64, class: usize) -> (f64, f64) {
        match self {
            SampleWeight::Uniform(a) => (*a, 0.0),
            SampleWeight::ActiveLearning { policy, gamma } => {
                if class == 1 {
                    (1.0 / gamma, 0.0)
                } else {
                    let (p, dp, _) = policy.eval_all(u, y);
                    (p / gamma, dp / gamma)
                }
            }
            SampleWeight::Policy(policy) => {
                let (p, dp, _) = policy.eval_all(u, y);
                (p, dp)
            }
        }
    }

    fn policy(&self) -> Option<&SelectionPolicy> {
        match self {
            SampleWeight::Uniform(_) => None,
            SampleWeight::ActiveLearning { policy, .. } | SampleWeight::Policy(policy) => Some(policy),
        }
    }
}

/// `ℓ(r, u, s, c, ε) = w(u, y, c) · ℓ̃(r, y)` with `y = φ(s, c, ε)`.
#[derive(Debug, Clone)]
pub struct ReweightedStage1 {
    pub base: MarginLoss,
    pub link: Arc<dyn LinkFunction>,
    pub weight: SampleWeight,
}

impl ReweightedStage1 {
    #[inline]
    fn parts(&self, u: f64, x: &Latent) -> (f64, f64, f64) {
        let y = self.link.eval(x.s, x.class, x.noise);
        let (w, dw) = self.weight.eval(u, y, x.class);
        (w, dw, y)
    }
}

impl Stage1Loss for ReweightedStage1 {
    fn value(&self, r: f64, u: f64, x: &Latent) -> f64 {
        let (w, _, y) = self.parts(u, x);
        if w == 0.0 {
            return 0.0;
        }
        w * self.base.value(r, y)
    }
    fn dr(&self, r: f64, u: f64, x: &Latent) -> f64 {
        let (w, _, y) = self.parts(u, x);
        if w == 0.0 {
            return 0.0;
        }
        w * self.base.d1(r, y)
    }
    fn drr(&self, r: f64, u: f64, x: &Latent) -> f64 {
        let (w, _, y) = self.parts(u, x);
        if w == 0.0 {
            return 0.0;
        }
        w * self.base.d2(r, y)
    }
    fn du(&self, r: f64, u: f64, x: &Latent) -> f64 {
        let (_, dw, y) = self.parts(u, x);
        if dw == 0.0 {
            return 0.0;
        }
        dw * self.base.value(r, y)
    }
    fn dru(&self, r: f64, u: f64, x: &Latent) -> f64 {
        let (_, dw, y) = self.parts(u, x);
        if dw == 0.0 {
            return 0.0;
        }
        dw * self.base.d1(r, y)
    }
    fn describe(&self) -> String {
        format!(
            "{}[{}] weighted by {:?}",
            self.base.name(),
            self.link.name(),
            self.weight
        )
    }
    fn sample_weight(&self, u: f64, x: &Latent) -> Option<f64> {
        Some(self.parts(u, x).0)
    }
    fn has_indicator(&self) -> bool {
        self.weight.policy().is_some_and(|p| p.is_indicator())
    }
}

// ---------------------------------------------------------------------------
// Constructors
// ---------------------------------------------------------------------------

fn plain_pair(base: MarginLoss, link: Arc<dyn LinkFunction>) -> (SharedStage0, SharedStage1) {
    (
        Arc::new(LabelledStage0 {
            base,
            link: link.clone(),
            class_weights: None,
        }),
        Arc::new(ReweightedStage1 {
            base,
            link,
            weight: SampleWeight::Uniform(1.0),
        }),
    )
}

/// Logistic loss in both stages, labels produced by `link`.
pub fn make_logistic_pair(link: Arc<dyn LinkFunction>) -> (SharedStage0, SharedStage1) {
    plain_pair(MarginLoss::Logistic, link)
}

/// Square loss in both stages, labels produced by `link`.
pub fn make_square_pair(link: Arc<dyn LinkFunction>) -> (SharedStage0, SharedStage1) {
    plain_pair(MarginLoss::Square, link)
}

/// Both losses identically zero.
pub fn make_zero_pair() -> (SharedStage0, SharedStage1) {
    plain_pair(MarginLoss::Zero, Arc::new(SignLink))
}

/// Budgeted active-learning losses on the two-class latent `{0: unqueried,
/// 1: base set}` with `P(c = 1) = ψ`:
///
/// * `ℓ₀ = (c / ψ) ℓ̃₀(u, sign s)`
/// * `ℓ  = ((1 - c) π(u) + c) / γ · ℓ̃(r, sign s)`
///
/// The `1/ψ` and `1/γ` factors turn the subset-normalised risks into the
/// `1/n` convention shared by both stages.
pub fn make_al_losses(
    base0: MarginLoss,
    base1: MarginLoss,
    policy: SelectionPolicy,
    psi: f64,
    gamma: f64,
) -> Result<(SharedStage0, SharedStage1), LossError> {
    if !(psi > 0.0 && psi <= gamma && gamma <= 1.0) {
        return Err(LossError::InvalidBudget { psi, gamma });
    }
    let link: Arc<dyn LinkFunction> = Arc::new(SignLink);
    Ok((
        Arc::new(LabelledStage0 {
            base: base0,
            link: link.clone(),
            class_weights: Some(vec![0.0, 1.0 / psi]),
        }),
        Arc::new(ReweightedStage1 {
            base: base1,
            link,
            weight: SampleWeight::ActiveLearning { policy, gamma },
        }),
    ))
}

/// Pruning losses: the base estimator sees every sample, the final one sees
/// the samples kept by `policy`.
pub fn make_pruning_losses(
    base0: MarginLoss,
    base1: MarginLoss,
    link: Arc<dyn LinkFunction>,
    policy: SelectionPolicy,
) -> (SharedStage0, SharedStage1) {
    (
        Arc::new(LabelledStage0 {
            base: base0,
            link: link.clone(),
            class_weights: None,
        }),
        Arc::new(ReweightedStage1 {
            base: base1,
            link,
            weight: SampleWeight::Policy(policy),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn lat(s: f64, class: usize) -> Latent {
        Latent::new(s, class, 1.0)
    }

    #[test]
    fn logistic_values_at_zero() {
        let (l0, _) = make_logistic_pair(Arc::new(SignLink));
        let x = lat(1.0, 0);
        assert_relative_eq!(l0.value(0.0, &x), 2f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(l0.d1(0.0, &x), -0.5, epsilon = 1e-15);
        assert_relative_eq!(l0.d2(0.0, &x), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn logistic_is_stable_for_large_margins() {
        let l = MarginLoss::Logistic;
        assert!(l.value(800.0, -1.0).is_finite());
        assert_relative_eq!(l.value(800.0, -1.0), 800.0, epsilon = 1e-12);
        assert_eq!(l.value(800.0, 1.0), 0.0);
        assert_relative_eq!(l.d1(800.0, -1.0), 1.0);
    }

    #[test]
    fn square_values() {
        let (l0, l1) = make_square_pair(Arc::new(SignLink));
        let x = lat(0.3, 0);
        assert_eq!(l0.value(2.0, &x), 0.5);
        assert_eq!(l0.d1(2.0, &x), 1.0);
        assert_eq!(l0.d2(-17.0, &x), 1.0);
        assert_eq!(l1.drr(5.0, 1.0, &x), 1.0);
        assert_eq!(l0.d3(1.0, &x), 0.0);
    }

    #[test]
    fn sign_of_zero_is_positive() {
        assert_eq!(sign(0.0), 1.0);
        assert_eq!(SignLink.eval(0.0, 0, 1.0), 1.0);
        assert_eq!(SignLink.eval(-2.0, 0, -1.0), 1.0);
    }

    #[test]
    fn al_unselected_sample_has_zero_loss() {
        let policy = SelectionPolicy::indicator(PolicyKind::SmallMargin { kappa: 0.5 }).unwrap();
        let (_, l1) = make_al_losses(MarginLoss::Square, MarginLoss::Square, policy, 0.2, 0.6).unwrap();
        let x = lat(1.0, 0);
        for r in [-3.0, 0.0, 2.5] {
            assert_eq!(l1.value(r, 0.9, &x), 0.0);
            assert_eq!(l1.dr(r, 0.9, &x), 0.0);
        }
        // Exact indicator: u-derivative vanishes away from the threshold.
        assert_eq!(l1.du(1.0, 0.2, &x), 0.0);
        assert!(l1.has_indicator());
    }

    #[test]
    fn al_base_sample_weight_is_inverse_gamma() {
        let policy = SelectionPolicy::new(PolicyKind::SmallMargin { kappa: 0.5 }, 0.1).unwrap();
        let gamma = 0.7;
        let (l0, l1) =
            make_al_losses(MarginLoss::Logistic, MarginLoss::Logistic, policy, 0.3, gamma).unwrap();
        for &(r, u, s) in &[(0.1, 0.2, 1.0), (-2.0, 3.0, -0.4), (4.0, -0.01, 0.0)] {
            let x = lat(s, 1);
            assert_eq!(gamma * l1.value(r, u, &x), MarginLoss::Logistic.value(r, sign(s)));
            assert_eq!(l1.du(r, u, &x), 0.0);
            assert_relative_eq!(l0.value(u, &x), MarginLoss::Logistic.value(u, sign(s)) / 0.3);
            assert_eq!(l0.value(u, &lat(s, 0)), 0.0);
        }
    }

    #[test]
    fn al_rejects_bad_budgets() {
        let p = SelectionPolicy::constant(1.0);
        assert!(make_al_losses(MarginLoss::Square, MarginLoss::Square, p, 0.0, 0.5).is_err());
        assert!(make_al_losses(MarginLoss::Square, MarginLoss::Square, p, 0.6, 0.5).is_err());
        assert!(make_al_losses(MarginLoss::Square, MarginLoss::Square, p, 0.5, 0.5).is_ok());
    }

    #[test]
    fn pruning_policies() {
        let link: Arc<dyn LinkFunction> = Arc::new(ClassLink::binary());
        let (_, full) = make_pruning_losses(
            MarginLoss::Logistic,
            MarginLoss::Logistic,
            link.clone(),
            SelectionPolicy::constant(1.0),
        );
        let (l0, _) = make_logistic_pair(link.clone());
        let x = Latent::new(0.3, 1, -1.0);
        assert_eq!(full.value(0.4, 2.0, &x), l0.value(0.4, &x));

        let cc = SelectionPolicy::indicator(PolicyKind::CorrectlyClassified).unwrap();
        let (_, pruned) = make_pruning_losses(MarginLoss::Logistic, MarginLoss::Logistic, link.clone(), cc);
        // y = ε · label = -1 here.
        assert_eq!(pruned.sample_weight(-0.5, &x), Some(1.0));
        assert_eq!(pruned.sample_weight(0.5, &x), Some(0.0));

        let lm = SelectionPolicy::indicator(PolicyKind::LargeMargin { kappa: 1.0 }).unwrap();
        let (_, pruned) = make_pruning_losses(MarginLoss::Logistic, MarginLoss::Logistic, link, lm);
        assert_eq!(pruned.value(0.3, 0.7, &x), 0.0);
        assert!(pruned.value(0.3, 1.7, &x) > 0.0);
    }

    #[test]
    fn policy_boundary_sentinels() {
        let u = 0.123;
        let small0 = SelectionPolicy::new(PolicyKind::SmallMargin { kappa: 0.0 }, 0.1).unwrap();
        assert_eq!(small0.eval_all(u, 1.0), (0.0, 0.0, 0.0));
        let small_inf = SelectionPolicy::new(PolicyKind::SmallMargin { kappa: f64::INFINITY }, 0.1).unwrap();
        assert_eq!(small_inf.eval(u, 1.0), 1.0);
        let large0 = SelectionPolicy::new(PolicyKind::LargeMargin { kappa: 0.0 }, 0.1).unwrap();
        assert_eq!(large0.eval(u, 1.0), 1.0);
        let large_inf = SelectionPolicy::new(PolicyKind::LargeMargin { kappa: f64::INFINITY }, 0.1).unwrap();
        assert_eq!(large_inf.eval(u, 1.0), 0.0);
    }

    #[test]
    fn smoothed_small_margin_sandwich() {
        let kappa = 0.8;
        let p = SelectionPolicy::new(PolicyKind::SmallMargin { kappa }, 0.05).unwrap();
        assert!((p.eval(0.0, 1.0) - 1.0).abs() < 1e-6);
        assert!(p.eval(kappa, 1.0) <= 0.5 + 1e-12);
        assert!(p.eval(-kappa, 1.0) <= 0.5 + 1e-12);
        assert!(p.eval(2.0 * kappa, 1.0) < 1e-6);
    }

    #[test]
    fn smoothing_converges_to_indicator() {
        let kinds = [
            PolicyKind::SmallMargin { kappa: 0.7 },
            PolicyKind::LargeMargin { kappa: 0.7 },
            PolicyKind::Mixed {
                kappa_minus: 0.3,
                kappa_plus: 1.1,
            },
            PolicyKind::CorrectlyClassified,
        ];
        for kind in kinds {
            let hard = SelectionPolicy::indicator(kind).unwrap();
            let soft = SelectionPolicy::new(kind, 1e-4).unwrap();
            for i in 0..200 {
                let u = -2.0 + 0.0201 * i as f64;
                for y in [-1.0, 1.0] {
                    assert!((soft.eval(u, y) - hard.eval(u, y)).abs() < 1e-6, "{kind:?} u={u}");
                }
            }
        }
    }

    #[test]
    fn mixed_rejects_crossed_thresholds() {
        assert!(SelectionPolicy::new(
            PolicyKind::Mixed {
                kappa_minus: 1.0,
                kappa_plus: 0.5
            },
            0.0
        )
        .is_err());
    }

    #[test]
    fn policy_derivatives_match_finite_differences() {
        let kinds = [
            PolicyKind::SmallMargin { kappa: 0.7 },
            PolicyKind::LargeMargin { kappa: 0.7 },
            PolicyKind::Mixed {
                kappa_minus: 0.3,
                kappa_plus: 1.1,
            },
            PolicyKind::CorrectlyClassified,
        ];
        let h = 1e-5;
        for kind in kinds {
            let p = SelectionPolicy::new(kind, 0.2).unwrap();
            for i in 0..41 {
                let u = -2.0 + 0.1 * i as f64 + 0.013;
                for y in [-1.0, 1.0] {
                    let fd1 = (p.eval(u + h, y) - p.eval(u - h, y)) / (2.0 * h);
                    let fd2 = (p.d1(u + h, y) - p.d1(u - h, y)) / (2.0 * h);
                    assert!((p.d1(u, y) - fd1).abs() < 1e-7, "{kind:?} {u}");
                    assert!((p.d2(u, y) - fd2).abs() < 1e-6, "{kind:?} {u}");
                }
            }
        }
    }

    #[test]
    fn noise_support_and_sampling() {
        use rand::SeedableRng;
        let flip = NoiseModel::SignFlip { p: 0.2 };
        assert_eq!(flip.support(), vec![(1.0, 0.8), (-1.0, 0.2)]);
        assert_eq!(NoiseModel::SignFlip { p: 0.0 }.support(), vec![(1.0, 1.0)]);
        assert!(NoiseModel::SignFlip { p: 1.5 }.validate().is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let flips = (0..n).filter(|_| flip.sample(&mut rng) < 0.0).count() as f64 / n as f64;
        assert!((flips - 0.2).abs() < 4.0 * (0.2f64 * 0.8 / n as f64).sqrt());
    }
}
