//! Budgeted margin-based active learning and data pruning.
//!
//! In active learning a fraction `ψ` of the `n` samples is labelled at random
//! and used to train the base classifier; the remaining budget `γ - ψ` is
//! spent on the unlabelled samples the selection policy prefers, judged by
//! their base margin `u`. The final classifier then trains on both sets.
//! Thresholds are set so that the budget is saturated in expectation.
//!
//! In pruning every label is available; the base classifier sees the whole
//! dataset and the policy decides which samples the final one keeps.

use std::f64::consts::FRAC_2_SQRT_PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};
use thiserror::Error;

use crate::erm_sim::{
    run_trials, Dataset, FitConfig, MeanStd, PipelineConfig, SimError, Stage1Source, TrialSummary,
};
use crate::losses::{
    make_al_losses, make_pruning_losses, ClassLink, LinkFunction, LossError, MarginLoss, NoiseModel,
    PolicyKind, SelectionPolicy, SharedStage1, SignLink,
};
use crate::report::extended_float;
use crate::state_evolution::{
    test_error_binary, test_error_clusters, FixedPointConfig, IntegratorConfig, ProblemSpec, SeError,
    Solution, Solver, Stage0Params, Stage1Params,
};

#[derive(Debug, Error)]
pub enum AlError {
    #[error("invalid budget: require 0 < psi <= gamma <= 1, got psi={psi}, gamma={gamma}")]
    InvalidBudget { psi: f64, gamma: f64 },
    #[error("q0 must be positive, got {0}")]
    InvalidScale(f64),
    #[error("inner band of the mixed policy already holds mass {inner} > budget {budget}")]
    InfeasibleMixed { inner: f64, budget: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("no row of the curve converged")]
    NoConvergedRows,
    #[error("need at least 3 converged rows, got {0}")]
    TooFewRows(usize),
    #[error(transparent)]
    Solver(#[from] SeError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Total label budget `γ` and the share `ψ` of it spent on the base set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub gamma: f64,
    pub psi: f64,
}

impl BudgetSpec {
    pub fn new(gamma: f64, psi: f64) -> Result<Self, AlError> {
        let b = Self { gamma, psi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), AlError> {
        if !(self.psi > 0.0 && self.psi <= self.gamma && self.gamma <= 1.0) {
            return Err(AlError::InvalidBudget {
                psi: self.psi,
                gamma: self.gamma,
            });
        }
        Ok(())
    }

    /// Share `(γ - ψ) / (1 - ψ)` of the unlabelled samples the policy may
    /// query.
    pub fn policy_share(&self) -> f64 {
        if self.psi >= self.gamma {
            0.0
        } else if self.gamma >= 1.0 {
            1.0
        } else {
            (self.gamma - self.psi) / (1.0 - self.psi)
        }
    }
}

/// `erf⁻¹` refined by Newton steps on `erf`, so that `erf(erf_inv(p)) = p`
/// to rounding.
fn erf_inv_refined(p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = erf_inv(p);
    for _ in 0..3 {
        let slope = FRAC_2_SQRT_PI * (-x * x).exp();
        if !(slope > 0.0) {
            break;
        }
        x -= (erf(x) - p) / slope;
    }
    x
}

/// `P(|u| < κ)` for `u ~ N(0, q₀)`.
pub fn band_mass(kappa: f64, q0: f64) -> f64 {
    if kappa <= 0.0 {
        0.0
    } else if kappa == f64::INFINITY {
        1.0
    } else {
        erf(kappa / (2.0 * q0).sqrt())
    }
}

fn check(budget: &BudgetSpec, q0: f64) -> Result<(), AlError> {
    budget.validate()?;
    if !(q0 > 0.0 && q0.is_finite()) {
        return Err(AlError::InvalidScale(q0));
    }
    Ok(())
}

/// Small-margin threshold: `P(|u| < κ⁻) = (γ - ψ) / (1 - ψ)` under
/// `u ~ N(0, q₀)`. `0` when nothing is left to select, `+∞` when everything is.
pub fn kappa_minus(budget: &BudgetSpec, q0: f64) -> Result<f64, AlError> {
    check(budget, q0)?;
    Ok((2.0 * q0).sqrt() * erf_inv_refined(budget.policy_share()))
}

/// Large-margin threshold: `P(|u| > κ⁺) = (γ - ψ) / (1 - ψ)`. `+∞` when
/// nothing is left to select, `0` when everything is.
pub fn kappa_plus(budget: &BudgetSpec, q0: f64) -> Result<f64, AlError> {
    check(budget, q0)?;
    Ok((2.0 * q0).sqrt() * erf_inv_refined(1.0 - budget.policy_share()))
}

/// Outer threshold of the two-sided policy `|u| < κ⁻ or |u| > κ⁺` that
/// saturates the budget for a given inner threshold.
pub fn kappa_plus_for_mixed(kappa_minus: f64, budget: &BudgetSpec, q0: f64) -> Result<f64, AlError> {
    check(budget, q0)?;
    let share = budget.policy_share();
    let inner = band_mass(kappa_minus, q0);
    if inner > share * (1.0 + 1e-12) + 1e-15 {
        return Err(AlError::InfeasibleMixed { inner, budget: share });
    }
    let outer = share - inner;
    if outer <= 0.0 {
        return Ok(f64::INFINITY);
    }
    let kp = (2.0 * q0).sqrt() * erf_inv_refined(1.0 - outer);
    Ok(kp.max(kappa_minus))
}

/// Gaussian mass `P(π(u) = 1)` of an indicator policy for `u ~ N(0, q₀)`.
pub fn policy_mass(kind: &PolicyKind, q0: f64) -> Option<f64> {
    match *kind {
        PolicyKind::SmallMargin { kappa } => Some(band_mass(kappa, q0)),
        PolicyKind::LargeMargin { kappa } => Some(1.0 - band_mass(kappa, q0)),
        PolicyKind::Mixed {
            kappa_minus,
            kappa_plus,
        } => Some(band_mass(kappa_minus, q0) + 1.0 - band_mass(kappa_plus, q0)),
        PolicyKind::Constant(p) => Some(p),
        PolicyKind::CorrectlyClassified => None,
    }
}

/// Selection rule for the unlabelled samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AlPolicy {
    /// Query the samples closest to the base decision boundary.
    SmallMargin,
    /// Query the samples farthest from it.
    LargeMargin,
    /// Both ends, with `κ⁻ = inner · κ⁻(γ, ψ)` and `κ⁺` saturating the rest.
    Mixed { inner: f64 },
    /// Query uniformly at random.
    Random,
}

impl AlPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            AlPolicy::SmallMargin => "small-margin",
            AlPolicy::LargeMargin => "large-margin",
            AlPolicy::Mixed { .. } => "mixed",
            AlPolicy::Random => "random",
        }
    }

    pub fn validate(&self) -> Result<(), AlError> {
        if let AlPolicy::Mixed { inner } = *self {
            if !(0.0..=1.0).contains(&inner) {
                return Err(
                    LossError::InvalidPolicy(format!("mixed inner fraction {inner} outside [0, 1]")).into(),
                );
            }
        }
        Ok(())
    }
}

/// Thresholds a policy uses; `None` when it has none.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Thresholds {
    #[serde(with = "extended_float::option")]
    pub kappa_minus: Option<f64>,
    #[serde(with = "extended_float::option")]
    pub kappa_plus: Option<f64>,
}

/// Thresholds of `policy` at budget `budget` for base margins of variance `q₀`.
pub fn thresholds(policy: &AlPolicy, budget: &BudgetSpec, q0: f64) -> Result<Thresholds, AlError> {
    policy.validate()?;
    Ok(match *policy {
        AlPolicy::SmallMargin => Thresholds {
            kappa_minus: Some(kappa_minus(budget, q0)?),
            kappa_plus: None,
        },
        AlPolicy::LargeMargin => Thresholds {
            kappa_minus: None,
            kappa_plus: Some(kappa_plus(budget, q0)?),
        },
        AlPolicy::Mixed { inner } => {
            let km = inner * kappa_minus(budget, q0)?;
            Thresholds {
                kappa_minus: Some(km),
                kappa_plus: Some(kappa_plus_for_mixed(km, budget, q0)?),
            }
        }
        AlPolicy::Random => {
            check(budget, q0)?;
            Thresholds::default()
        }
    })
}

fn policy_kind(policy: &AlPolicy, budget: &BudgetSpec, th: &Thresholds) -> PolicyKind {
    match *policy {
        AlPolicy::SmallMargin => PolicyKind::SmallMargin {
            kappa: th.kappa_minus.unwrap_or(0.0),
        },
        AlPolicy::LargeMargin => PolicyKind::LargeMargin {
            kappa: th.kappa_plus.unwrap_or(f64::INFINITY),
        },
        AlPolicy::Mixed { .. } => PolicyKind::Mixed {
            kappa_minus: th.kappa_minus.unwrap_or(0.0),
            kappa_plus: th.kappa_plus.unwrap_or(f64::INFINITY),
        },
        AlPolicy::Random => PolicyKind::Constant(budget.policy_share()),
    }
}

/// Fixed parts of an active-learning problem: isotropic Gaussian inputs,
/// labels `sign⟨β, x⟩` with `‖β‖ = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlProblem {
    pub alpha: f64,
    pub lambda: f64,
    pub lambda0: f64,
    pub loss0: MarginLossName,
    pub loss1: MarginLossName,
}

/// Serializable name of a [`MarginLoss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarginLossName {
    Logistic,
    Square,
    Zero,
}

impl From<MarginLossName> for MarginLoss {
    fn from(n: MarginLossName) -> Self {
        match n {
            MarginLossName::Logistic => MarginLoss::Logistic,
            MarginLossName::Square => MarginLoss::Square,
            MarginLossName::Zero => MarginLoss::Zero,
        }
    }
}

impl AlProblem {
    /// Square losses with `λ = λ₀ = 0.01`.
    pub fn square(alpha: f64) -> Self {
        Self {
            alpha,
            lambda: 0.01,
            lambda0: 0.01,
            loss0: MarginLossName::Square,
            loss1: MarginLossName::Square,
        }
    }

    /// Problem on the latent classes `{0: unlabelled, 1: base set}` with the
    /// given second-stage policy.
    pub fn spec(&self, budget: &BudgetSpec, policy: SelectionPolicy) -> Result<ProblemSpec, AlError> {
        let (l0, l1) = make_al_losses(
            self.loss0.into(),
            self.loss1.into(),
            policy,
            budget.psi,
            budget.gamma,
        )?;
        Ok(ProblemSpec {
            alpha: self.alpha,
            lambda: self.lambda,
            lambda0: self.lambda0,
            class_probs: vec![1.0 - budget.psi, budget.psi],
            nu: vec![0.0; 2],
            rho: DMatrix::zeros(2, 2),
            varrho: 1.0,
            link: Arc::new(SignLink),
            noise: NoiseModel::identity(),
            loss0: l0,
            loss1: l1,
        })
    }
}

/// Settings of the asymptotic engine for curve points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub integrator: IntegratorConfig,
    pub fixed_point: FixedPointConfig,
    /// Policy indicators are replaced by sigmoids of width `w_rel · √q₀`.
    pub width_rel: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig::default(),
            fixed_point: FixedPointConfig::default(),
            width_rel: 0.02,
        }
    }
}

impl TheoryConfig {
    fn validate(&self) -> Result<(), AlError> {
        self.integrator.validate()?;
        self.fixed_point.validate()?;
        if !(self.width_rel > 0.0 && self.width_rel.is_finite()) {
            return Err(LossError::InvalidPolicy(format!(
                "relative smoothing width must be positive, got {}",
                self.width_rel
            ))
            .into());
        }
        Ok(())
    }
}

/// Settings of the finite-size simulation for curve points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub d: usize,
    pub n_seeds: usize,
    pub seed: u64,
    pub n_test: usize,
    pub fit: FitConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            d: 500,
            n_seeds: 20,
            seed: 0,
            n_test: 10_000,
            fit: FitConfig::default(),
        }
    }
}

/// Which test error applies to a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMetric {
    /// Disagreement with `sign⟨β, x⟩`.
    Teacher,
    /// Misclassified clean cluster label.
    Clusters,
}

/// Asymptotic prediction at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryPoint {
    pub solution: Solution,
    pub egen: f64,
    /// Delta-method standard error of `egen` from the Monte Carlo error of
    /// `(θ, q, m)`.
    pub egen_se: f64,
    /// `ŵ = 0`; `egen` is then chance level.
    pub degenerate: bool,
    /// Test error of the base estimator.
    pub base_egen: f64,
    /// Expected share of samples in the final training set, computed from
    /// the indicator thresholds; `None` when the policy has no closed form.
    pub selected_mass: Option<f64>,
}

impl TheoryPoint {
    pub fn converged(&self) -> bool {
        self.solution.diagnostics.converged()
    }
}

/// Simulation outcome at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPoint {
    pub egen: MeanStd,
    pub base_egen: MeanStd,
    pub selected_fraction: MeanStd,
    pub seeds_ok: usize,
    pub n_seeds: usize,
    pub trials: TrialSummary,
}

impl SimPoint {
    fn from_summary(summary: TrialSummary, n_seeds: usize) -> Self {
        Self {
            egen: summary.test_error,
            base_egen: summary.base_test_error,
            selected_fraction: summary.selected_fraction,
            seeds_ok: summary.seeds_ok,
            n_seeds,
            trials: summary,
        }
    }
}

/// One point of a curve, with both engines' results and any failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda: f64,
    pub budget: Option<BudgetSpec>,
    pub policy: String,
    pub thresholds: Thresholds,
    pub theory: Option<TheoryPoint>,
    pub sim: Option<SimPoint>,
    /// Reason the theory engine produced nothing or did not converge.
    pub failure: Option<String>,
}

impl CurvePoint {
    fn add_failure(&mut self, msg: String) {
        self.failure = Some(match self.failure.take() {
            Some(f) => format!("{f}; {msg}"),
            None => msg,
        });
    }

    /// Theory value if the solver converged.
    pub fn egen_theory(&self) -> Option<f64> {
        self.theory.as_ref().filter(|t| t.converged()).map(|t| t.egen)
    }
}

/// Test error, its delta-method standard error from the fixed-point
/// covariance `cov` of `(θ, t, q, V, χ, m…)`, and the degeneracy flag.
fn egen_with_se(
    spec: &ProblemSpec,
    metric: TestMetric,
    p1: &Stage1Params,
    cov: &DMatrix<f64>,
) -> (f64, f64, bool) {
    let k = spec.n_classes();
    let mut grad = DVector::zeros(5 + k);
    let e = match metric {
        TestMetric::Teacher => {
            let e = test_error_binary(p1, spec.varrho);
            if !e.degenerate {
                let cos = (p1.theta / (p1.q * spec.varrho).sqrt()).clamp(-1.0, 1.0);
                let sin = (1.0 - cos * cos).sqrt();
                if sin > 0.0 {
                    let outer = -1.0 / (std::f64::consts::PI * sin);
                    grad[0] = outer / (p1.q * spec.varrho).sqrt();
                    grad[2] = outer * (-0.5 * cos / p1.q);
                }
            }
            e
        }
        TestMetric::Clusters => {
            let e = test_error_clusters(spec, p1);
            if !e.degenerate {
                let sq = p1.q.sqrt();
                for (c, &pc) in spec.class_probs.iter().enumerate() {
                    let y = spec.link.eval(0.0, c, 1.0);
                    let z = -y * p1.m[c] / sq;
                    let dens = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    grad[5 + c] = -pc * dens * y / sq;
                    grad[2] += pc * dens * y * p1.m[c] * 0.5 / (sq * p1.q);
                }
            }
            e
        }
    };
    if e.degenerate || cov.nrows() != grad.len() {
        return (e.value, 0.0, e.degenerate);
    }
    let var = (grad.transpose() * cov * &grad)[(0, 0)];
    (e.value, var.max(0.0).sqrt(), false)
}

fn base_error(spec: &ProblemSpec, metric: TestMetric, p0: &Stage0Params) -> f64 {
    let mirror = Stage1Params {
        m: p0.m0.clone(),
        theta: p0.theta0,
        t: p0.q0,
        q: p0.q0,
        v: p0.v0,
        chi: 0.0,
    };
    match metric {
        TestMetric::Teacher => test_error_binary(&mirror, spec.varrho).value,
        TestMetric::Clusters => test_error_clusters(spec, &mirror).value,
    }
}

/// Solves stage 0 on `spec`, asks `second` for the stage-1 loss (with the
/// thresholds it used and its expected selected share), solves stage 1 and
/// evaluates the test error.
pub fn solve_staged<F>(
    spec: &ProblemSpec,
    theory: &TheoryConfig,
    metric: TestMetric,
    second: F,
) -> Result<(TheoryPoint, Thresholds), AlError>
where
    F: FnOnce(&Stage0Params) -> Result<(SharedStage1, Thresholds, Option<f64>), AlError>,
{
    let mut solver = Solver::new(spec, theory.fixed_point, &theory.integrator)?;
    let s0 = solver.solve_stage0()?;
    let (loss1, th, selected_mass) = second(&s0.params)?;
    solver.set_stage1_loss(loss1);
    let mut s1 = solver.solve_stage1(&s0.params)?;
    solver.propagate_stage0(&s0, &mut s1);
    let spec = solver.spec();
    let (egen, egen_se, degenerate) = egen_with_se(spec, metric, &s1.params, &s1.cov);
    let base_egen = base_error(spec, metric, &s0.params);
    let solution = Solution {
        stage0: s0.params,
        stage1: s1.params,
        diagnostics: crate::state_evolution::Diagnostics {
            stage0: s0.report,
            stage1: s1.report,
            stage0_se: s0.se,
            stage1_se: s1.se,
        },
    };
    Ok((
        TheoryPoint {
            solution,
            egen,
            egen_se,
            degenerate,
            base_egen,
            selected_mass,
        },
        th,
    ))
}

/// Asymptotic solution of one active-learning point. The thresholds use
/// the converged `q₀` of the first stage.
pub fn solve_point(
    problem: &AlProblem,
    budget: &BudgetSpec,
    policy: &AlPolicy,
    theory: &TheoryConfig,
) -> Result<(TheoryPoint, Thresholds), AlError> {
    theory.validate()?;
    policy.validate()?;
    let spec = problem.spec(budget, SelectionPolicy::constant(1.0))?;
    solve_staged(&spec, theory, TestMetric::Teacher, |p0| {
        let th = thresholds(policy, budget, p0.q0)?;
        let kind = policy_kind(policy, budget, &th);
        let sel = SelectionPolicy::new(kind, theory.width_rel * p0.q0.sqrt())?;
        let (_, l1) = make_al_losses(
            problem.loss0.into(),
            problem.loss1.into(),
            sel,
            budget.psi,
            budget.gamma,
        )?;
        let mass = policy_mass(&kind, p0.q0).map(|m| budget.psi + (1.0 - budget.psi) * m);
        Ok((l1, th, mass))
    })
}

/// Stage-1 loss of one simulated trial: thresholds from the realised
/// `q̂₀ = ‖ŵ₀‖²`, exact indicators.
fn al_stage1_builder(problem: AlProblem, budget: BudgetSpec, policy: AlPolicy) -> Stage1Source {
    Stage1Source::FromBase(Arc::new(move |_data: &Dataset, w0: &DVector<f64>| {
        let q0 = w0.norm_squared();
        let th = thresholds(&policy, &budget, q0).map_err(|e| e.to_string())?;
        let sel =
            SelectionPolicy::indicator(policy_kind(&policy, &budget, &th)).map_err(|e| e.to_string())?;
        make_al_losses(
            problem.loss0.into(),
            problem.loss1.into(),
            sel,
            budget.psi,
            budget.gamma,
        )
        .map(|(_, l1)| l1)
        .map_err(|e| e.to_string())
    }))
}

/// Simulation of one active-learning point.
pub fn simulate_point(
    problem: &AlProblem,
    budget: &BudgetSpec,
    policy: &AlPolicy,
    sim: &SimConfig,
) -> Result<SimPoint, AlError> {
    policy.validate()?;
    let spec = problem.spec(budget, SelectionPolicy::constant(1.0))?;
    let pipe = PipelineConfig {
        stage1: al_stage1_builder(*problem, *budget, *policy),
        fit: sim.fit,
        n_test: sim.n_test,
        seed: sim.seed,
        selection_scale: budget.gamma,
    };
    let summary = run_trials(&spec, sim.d, sim.n_seeds, &pipe)?;
    Ok(SimPoint::from_summary(summary, sim.n_seeds))
}

/// A curve over `ψ` at fixed `γ`, ordered by `ψ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub gamma: f64,
    pub points: Vec<CurvePoint>,
}

fn check_psi_grid(gamma: f64, grid: &[f64]) -> Result<(), AlError> {
    if grid.is_empty() {
        return Err(AlError::InvalidGrid("empty psi grid".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(AlError::InvalidGrid(
            "psi values must be strictly increasing".into(),
        ));
    }
    for &psi in grid {
        BudgetSpec::new(gamma, psi)?;
    }
    Ok(())
}

fn map_points<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Test error over a grid of `ψ ∈ (0, γ]`. Points run independently; a
/// failing point is flagged in its row and the sweep continues.
pub fn sweep_psi(
    problem: &AlProblem,
    gamma: f64,
    grid: &[f64],
    policy: &AlPolicy,
    theory: Option<&TheoryConfig>,
    sim: Option<&SimConfig>,
) -> Result<SweepResult, AlError> {
    check_psi_grid(gamma, grid)?;
    no_engine(theory, sim)?;
    if let Some(theory) = theory {
        theory.validate()?;
    }
    policy.validate()?;
    let points = map_points(grid, |&psi| {
        let budget = BudgetSpec { gamma, psi };
        let mut point = CurvePoint {
            alpha: problem.alpha,
            lambda0: problem.lambda0,
            lambda: problem.lambda,
            budget: Some(budget),
            policy: policy.name().to_string(),
            thresholds: Thresholds::default(),
            theory: None,
            sim: None,
            failure: None,
        };
        if let Some(theory) = theory {
            match solve_point(problem, &budget, policy, theory) {
                Ok((tp, th)) => {
                    if !tp.converged() {
                        point.failure = Some(non_convergence(&tp.solution));
                    }
                    point.thresholds = th;
                    point.theory = Some(tp);
                }
                Err(e) => point.failure = Some(e.to_string()),
            }
        }
        if let Some(sim) = sim {
            match simulate_point(problem, &budget, policy, sim) {
                Ok(sp) => point.sim = Some(sp),
                Err(e) => point.add_failure(format!("simulation: {e}")),
            }
        }
        point
    });
    Ok(SweepResult { gamma, points })
}

fn no_engine(theory: Option<&TheoryConfig>, sim: Option<&SimConfig>) -> Result<(), AlError> {
    if theory.is_none() && sim.is_none() {
        return Err(AlError::InvalidGrid(
            "neither theory nor simulation requested".into(),
        ));
    }
    Ok(())
}

fn non_convergence(sol: &Solution) -> String {
    let d = &sol.diagnostics;
    format!(
        "not converged (stage 0 residual {:e}, stage 1 residual {:e})",
        d.stage0.residual, d.stage1.residual
    )
}

/// Minimiser of a curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimum {
    pub x: f64,
    pub value: f64,
    /// The grid minimum sits at an end of the grid; no refinement applied.
    pub boundary: bool,
}

/// Grid argmin of `(x, y)` (sorted by `x`), refined by the vertex of the
/// parabola through the minimum and its two neighbours.
pub fn locate_minimum(points: &[(f64, f64)]) -> Result<Optimum, AlError> {
    if points.is_empty() {
        return Err(AlError::NoConvergedRows);
    }
    if points.len() < 3 {
        return Err(AlError::TooFewRows(points.len()));
    }
    let (k, &(x, y)) = points
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty");
    if k == 0 || k == points.len() - 1 {
        return Ok(Optimum {
            x,
            value: y,
            boundary: true,
        });
    }
    let (x0, y0) = points[k - 1];
    let (x2, y2) = points[k + 1];
    // Newton divided differences of the interpolating quadratic.
    let d01 = (y - y0) / (x - x0);
    let d12 = (y2 - y) / (x2 - x);
    let a = (d12 - d01) / (x2 - x0);
    if !(a > 0.0) {
        return Ok(Optimum {
            x,
            value: y,
            boundary: false,
        });
    }
    let b = d01 - a * (x0 + x);
    let xv = (-b / (2.0 * a)).clamp(x0, x2);
    let value = y0 + d01 * (xv - x0) + a * (xv - x0) * (xv - x);
    Ok(Optimum {
        x: xv,
        value,
        boundary: false,
    })
}

/// Optimal allocation `ψ*` of a sweep from its converged theory rows.
pub fn locate_optimum(sweep: &SweepResult) -> Result<Optimum, AlError> {
    let pts: Vec<(f64, f64)> = sweep
        .points
        .iter()
        .filter_map(|p| Some((p.budget?.psi, p.egen_theory()?)))
        .collect();
    if pts.is_empty() {
        return Err(AlError::NoConvergedRows);
    }
    locate_minimum(&pts)
}

/// Pruning experiments on the binary Gaussian mixture `x ~ N(±μ, I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "variant")]
pub enum PruningVariant {
    /// Clean labels; keep `|u| > κ`.
    LargeMarginClean { kappa: f64 },
    /// Labels flipped with probability `p_flip`; keep the samples the base
    /// classifier labels correctly, judged against the noisy label.
    FlipNoiseFilter { p_flip: f64 },
}

impl PruningVariant {
    fn noise(&self) -> NoiseModel {
        match *self {
            PruningVariant::LargeMarginClean { .. } => NoiseModel::identity(),
            PruningVariant::FlipNoiseFilter { p_flip } => NoiseModel::SignFlip { p: p_flip },
        }
    }

    fn kind(&self) -> PolicyKind {
        match *self {
            PruningVariant::LargeMarginClean { kappa } => PolicyKind::LargeMargin { kappa },
            PruningVariant::FlipNoiseFilter { .. } => PolicyKind::CorrectlyClassified,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PruningVariant::LargeMarginClean { .. } => "large-margin-clean",
            PruningVariant::FlipNoiseFilter { .. } => "flip-noise-filter",
        }
    }
}

/// Common settings of the pruning experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningProblem {
    pub mu_norm: f64,
    pub lambda: f64,
    pub lambda0: f64,
    pub loss: MarginLossName,
}

impl Default for PruningProblem {
    fn default() -> Self {
        Self {
            mu_norm: 0.8,
            lambda: 0.01,
            lambda0: 0.01,
            loss: MarginLossName::Logistic,
        }
    }
}

impl PruningProblem {
    /// Mixture with `μ₀ = -μ`, `μ₁ = μ`, `β = μ / ‖μ‖`, labels `ε · (±1)`.
    pub fn spec(&self, alpha: f64, variant: &PruningVariant, policy: SelectionPolicy) -> ProblemSpec {
        let m = self.mu_norm;
        let link: Arc<dyn LinkFunction> = Arc::new(ClassLink::binary());
        let (l0, l1) = make_pruning_losses(self.loss.into(), self.loss.into(), link.clone(), policy);
        ProblemSpec {
            alpha,
            lambda: self.lambda,
            lambda0: self.lambda0,
            class_probs: vec![0.5, 0.5],
            nu: vec![-m, m],
            rho: DMatrix::from_row_slice(2, 2, &[m * m, -m * m, -m * m, m * m]),
            varrho: 1.0,
            link,
            noise: variant.noise(),
            loss0: l0,
            loss1: l1,
        }
    }
}

/// Test error against `α` of the pruned classifier and of the full-data
/// baseline `π ≡ 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningCurve {
    pub variant: PruningVariant,
    pub pruned: Vec<CurvePoint>,
    pub baseline: Vec<CurvePoint>,
}

/// How to build one fixed-policy point: the problem for a given policy and
/// how to score it.
struct FixedPolicyPoint<'a> {
    make: &'a (dyn Fn(SelectionPolicy) -> ProblemSpec + Sync),
    metric: TestMetric,
    kind: PolicyKind,
    name: String,
    alpha: f64,
    lambda0: f64,
    lambda: f64,
}

fn fixed_policy_thresholds(kind: PolicyKind) -> Thresholds {
    match kind {
        PolicyKind::SmallMargin { kappa } => Thresholds {
            kappa_minus: Some(kappa),
            kappa_plus: None,
        },
        PolicyKind::LargeMargin { kappa } => Thresholds {
            kappa_minus: None,
            kappa_plus: Some(kappa),
        },
        PolicyKind::Mixed {
            kappa_minus,
            kappa_plus,
        } => Thresholds {
            kappa_minus: Some(kappa_minus),
            kappa_plus: Some(kappa_plus),
        },
        _ => Thresholds::default(),
    }
}

fn run_fixed_policy(
    job: &FixedPolicyPoint<'_>,
    theory: Option<&TheoryConfig>,
    sim: Option<&SimConfig>,
) -> CurvePoint {
    let kind = job.kind;
    let thresholds = fixed_policy_thresholds(kind);
    let mut point = CurvePoint {
        alpha: job.alpha,
        lambda0: job.lambda0,
        lambda: job.lambda,
        budget: None,
        policy: job.name.clone(),
        thresholds,
        theory: None,
        sim: None,
        failure: None,
    };
    let spec = (job.make)(SelectionPolicy::constant(1.0));
    if let Some(theory) = theory {
        let result = solve_staged(&spec, theory, job.metric, |p0| {
            let width = match kind {
                PolicyKind::Constant(_) => 0.0,
                _ => theory.width_rel * p0.q0.sqrt(),
            };
            let sel = SelectionPolicy::new(kind, width)?;
            // Base margins are centred only for the teacher model.
            let mass = match job.metric {
                TestMetric::Teacher => policy_mass(&kind, p0.q0),
                TestMetric::Clusters => None,
            };
            Ok(((job.make)(sel).loss1, thresholds, mass))
        });
        match result {
            Ok((tp, _)) => {
                if !tp.converged() {
                    point.failure = Some(non_convergence(&tp.solution));
                }
                point.theory = Some(tp);
            }
            Err(e) => point.failure = Some(e.to_string()),
        }
    }
    if let Some(sim) = sim {
        let result = SelectionPolicy::indicator(kind)
            .map_err(AlError::from)
            .and_then(|sel| {
                let pipe = PipelineConfig {
                    stage1: Stage1Source::Fixed((job.make)(sel).loss1),
                    fit: sim.fit,
                    n_test: sim.n_test,
                    seed: sim.seed,
                    selection_scale: 1.0,
                };
                Ok(run_trials(&spec, sim.d, sim.n_seeds, &pipe)?)
            });
        match result {
            Ok(summary) => point.sim = Some(SimPoint::from_summary(summary, sim.n_seeds)),
            Err(e) => point.add_failure(format!("simulation: {e}")),
        }
    }
    point
}

/// Teacher-student problem with every label available: isotropic inputs,
/// labels `ε · sign⟨β, x⟩` with `ε = -1` at rate `flip`, and a fixed
/// selection policy on the base margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicProblem {
    pub alpha: f64,
    pub lambda: f64,
    pub lambda0: f64,
    pub loss0: MarginLossName,
    pub loss1: MarginLossName,
    pub flip: f64,
}

impl IsotropicProblem {
    pub fn spec(&self, policy: SelectionPolicy) -> ProblemSpec {
        let link: Arc<dyn LinkFunction> = Arc::new(SignLink);
        let (l0, l1) = make_pruning_losses(self.loss0.into(), self.loss1.into(), link.clone(), policy);
        ProblemSpec {
            alpha: self.alpha,
            lambda: self.lambda,
            lambda0: self.lambda0,
            class_probs: vec![1.0],
            nu: vec![0.0],
            rho: DMatrix::zeros(1, 1),
            varrho: 1.0,
            link,
            noise: if self.flip > 0.0 {
                NoiseModel::SignFlip { p: self.flip }
            } else {
                NoiseModel::identity()
            },
            loss0: l0,
            loss1: l1,
        }
    }
}

/// One point of an [`IsotropicProblem`] under the fixed policy `kind`.
pub fn isotropic_point(
    problem: &IsotropicProblem,
    kind: PolicyKind,
    name: &str,
    theory: Option<&TheoryConfig>,
    sim: Option<&SimConfig>,
) -> Result<CurvePoint, AlError> {
    no_engine(theory, sim)?;
    if let Some(theory) = theory {
        theory.validate()?;
    }
    SelectionPolicy::new(kind, 0.0)?;
    (NoiseModel::SignFlip { p: problem.flip }).validate()?;
    let make = |sel| problem.spec(sel);
    let job = FixedPolicyPoint {
        make: &make,
        metric: TestMetric::Teacher,
        kind,
        name: name.to_string(),
        alpha: problem.alpha,
        lambda0: problem.lambda0,
        lambda: problem.lambda,
    };
    Ok(run_fixed_policy(&job, theory, sim))
}

fn pruning_point(
    problem: &PruningProblem,
    variant: &PruningVariant,
    alpha: f64,
    kind: PolicyKind,
    theory: Option<&TheoryConfig>,
    sim: Option<&SimConfig>,
) -> CurvePoint {
    let name = match kind {
        PolicyKind::Constant(_) => "full-data".to_string(),
        _ => variant_policy_name(variant),
    };
    let make = |sel| problem.spec(alpha, variant, sel);
    let job = FixedPolicyPoint {
        make: &make,
        metric: TestMetric::Clusters,
        kind,
        name,
        alpha,
        lambda0: problem.lambda0,
        lambda: problem.lambda,
    };
    run_fixed_policy(&job, theory, sim)
}

fn variant_policy_name(variant: &PruningVariant) -> String {
    match variant {
        PruningVariant::LargeMarginClean { .. } => "large-margin".into(),
        PruningVariant::FlipNoiseFilter { .. } => "correct-classified".into(),
    }
}

/// Runs a pruning variant over a grid of `α`, with the full-data baseline
/// on the same datasets.
pub fn run_pruning_experiment(
    problem: &PruningProblem,
    variant: &PruningVariant,
    alphas: &[f64],
    theory: Option<&TheoryConfig>,
    sim: Option<&SimConfig>,
) -> Result<PruningCurve, AlError> {
    if alphas.is_empty() || alphas.windows(2).any(|w| !(w[0] < w[1])) || !(alphas[0] > 0.0) {
        return Err(AlError::InvalidGrid(
            "alpha values must be positive and strictly increasing".into(),
        ));
    }
    no_engine(theory, sim)?;
    if let Some(theory) = theory {
        theory.validate()?;
    }
    SelectionPolicy::new(variant.kind(), 0.0)?;
    variant.noise().validate()?;
    let pruned = map_points(alphas, |&a| {
        pruning_point(problem, variant, a, variant.kind(), theory, sim)
    });
    let baseline = map_points(alphas, |&a| {
        pruning_point(problem, variant, a, PolicyKind::Constant(1.0), theory, sim)
    });
    Ok(PruningCurve {
        variant: *variant,
        pruned,
        baseline,
    })
}
