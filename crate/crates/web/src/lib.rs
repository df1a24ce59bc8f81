//! Browser demo: asymptotic test-error curves computed client-side.
//!
//! Every export returns a JSON string. The plain functions behind them are
//! usable (and tested) natively.

use itererm::active_learning::{
    locate_optimum, run_pruning_experiment, sweep_psi, thresholds, AlPolicy, AlProblem, BudgetSpec,
    CurvePoint, PruningProblem, PruningVariant, TheoryConfig,
};
use itererm::state_evolution::IntegratorConfig;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Integration nodes per stratum; small enough for an interactive page.
pub const DEMO_NODES: usize = 8_000;
/// The logistic prox of the pruning curves costs more per node.
pub const PRUNING_NODES: usize = 4_000;

fn theory(nodes: usize) -> TheoryConfig {
    TheoryConfig {
        integrator: IntegratorConfig {
            nodes,
            ..IntegratorConfig::default()
        },
        ..TheoryConfig::default()
    }
}

fn parse_policy(name: &str) -> Result<AlPolicy, String> {
    match name {
        "small-margin" => Ok(AlPolicy::SmallMargin),
        "large-margin" => Ok(AlPolicy::LargeMargin),
        "random" => Ok(AlPolicy::Random),
        other => Err(format!("unknown policy {other:?}")),
    }
}

#[derive(Serialize)]
struct Row {
    x: f64,
    theory: Option<f64>,
    base: Option<f64>,
    se: Option<f64>,
    failure: Option<String>,
}

fn row(x: f64, p: &CurvePoint) -> Row {
    let t = p.theory.as_ref().filter(|t| t.converged());
    Row {
        x,
        theory: t.map(|t| t.egen),
        base: t.map(|t| t.base_egen),
        se: t.map(|t| t.egen_se),
        failure: p.failure.clone(),
    }
}

#[derive(Serialize)]
struct Tradeoff {
    gamma: f64,
    policy: String,
    rows: Vec<Row>,
    optimum: Option<f64>,
}

/// Test error over `steps` values of `ψ` in `[0.02, γ]`, square losses.
pub fn tradeoff_json(
    alpha: f64,
    gamma: f64,
    lambda0: f64,
    policy: &str,
    steps: usize,
    nodes: usize,
) -> Result<String, String> {
    let policy = parse_policy(policy)?;
    if !(2..=60).contains(&steps) {
        return Err(format!("steps must lie in [2, 60], got {steps}"));
    }
    let lo = 0.02_f64.min(gamma / 2.0);
    let grid: Vec<f64> = (0..steps)
        .map(|k| lo + (gamma - lo) * k as f64 / (steps - 1) as f64)
        .collect();
    let problem = AlProblem {
        lambda0,
        ..AlProblem::square(alpha)
    };
    let t = theory(nodes);
    let sweep = sweep_psi(&problem, gamma, &grid, &policy, Some(&t), None).map_err(|e| e.to_string())?;
    let optimum = locate_optimum(&sweep).ok().map(|o| o.x);
    let out = Tradeoff {
        gamma,
        policy: policy.name().into(),
        rows: sweep
            .points
            .iter()
            .map(|p| row(p.budget.map_or(0.0, |b| b.psi), p))
            .collect(),
        optimum,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ThresholdReport {
    share: f64,
    kappa_minus: Option<f64>,
    kappa_plus: Option<f64>,
}

/// Thresholds of `policy` at the given budget for base margins of variance `q0`.
pub fn thresholds_json(gamma: f64, psi: f64, q0: f64, policy: &str) -> Result<String, String> {
    let policy = parse_policy(policy)?;
    let budget = BudgetSpec::new(gamma, psi).map_err(|e| e.to_string())?;
    let th = thresholds(&policy, &budget, q0).map_err(|e| e.to_string())?;
    let finite = |v: Option<f64>| v.filter(|x| x.is_finite());
    serde_json::to_string(&ThresholdReport {
        share: budget.policy_share(),
        kappa_minus: finite(th.kappa_minus),
        kappa_plus: finite(th.kappa_plus),
    })
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Pruning {
    pruned: Vec<Row>,
    baseline: Vec<Row>,
}

/// Test error against `α` with and without removing the samples the base
/// classifier misclassifies, labels flipped at rate `p_flip`.
pub fn pruning_json(p_flip: f64, alpha_max: f64, steps: usize, nodes: usize) -> Result<String, String> {
    if !(2..=30).contains(&steps) {
        return Err(format!("steps must lie in [2, 30], got {steps}"));
    }
    if !(alpha_max > 0.5) {
        return Err(format!("alpha_max must exceed 0.5, got {alpha_max}"));
    }
    let alphas: Vec<f64> = (0..steps)
        .map(|k| 0.5 + (alpha_max - 0.5) * k as f64 / (steps - 1) as f64)
        .collect();
    let curve = run_pruning_experiment(
        &PruningProblem::default(),
        &PruningVariant::FlipNoiseFilter { p_flip },
        &alphas,
        Some(&theory(nodes)),
        None,
    )
    .map_err(|e| e.to_string())?;
    let rows = |v: &[CurvePoint]| v.iter().map(|p| row(p.alpha, p)).collect();
    serde_json::to_string(&Pruning {
        pruned: rows(&curve.pruned),
        baseline: rows(&curve.baseline),
    })
    .map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn tradeoff_curve(
    alpha: f64,
    gamma: f64,
    lambda0: f64,
    policy: &str,
    steps: usize,
) -> Result<String, JsError> {
    tradeoff_json(alpha, gamma, lambda0, policy, steps, DEMO_NODES).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn policy_thresholds(gamma: f64, psi: f64, q0: f64, policy: &str) -> Result<String, JsError> {
    thresholds_json(gamma, psi, q0, policy).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn pruning_curve(p_flip: f64, alpha_max: f64, steps: usize) -> Result<String, JsError> {
    pruning_json(p_flip, alpha_max, steps, PRUNING_NODES).map_err(|e| JsError::new(&e))
}
