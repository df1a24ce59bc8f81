//! Self-consistent order-parameter equations of two-stage iterated ERM.
//!
//! The engine evaluates the Gaussian expectations by Monte Carlo over a fixed
//! set of nodes (common random numbers across iterations), solves the
//! first-stage equations, then the second-stage equations with the first
//! stage held fixed.

mod integrator;
mod law;
mod metrics;
mod solver;

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{LinkFunction, LossError, NoiseModel, SharedStage0, SharedStage1};
use crate::prox::ProxError;

pub use integrator::{Estimate, Estimator, IntegratorConfig, NodeSet, Stratum};
pub use law::{build_gaussian_law, GaussianLaw};
pub use metrics::{eval_test_metric, test_error_binary, test_error_clusters, TestError};
pub use solver::{
    solve, stage0_update, stage1_update, BaseState, Diagnostics, FixedPointConfig, Scheme, Solution, Solver,
    Stage0Outcome, Stage0Update, Stage1Outcome, Stage1Update, StageReport,
};

#[derive(Debug, Error)]
pub enum SeError {
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite order parameters: {0}")]
    NonFinite(String),
    #[error(
        "second-stage loss uses an exact indicator policy; use a smoothing width > 0 or opt \
         into the zero-derivative convention"
    )]
    IndicatorPolicy,
    #[error("auxiliary equation for {which} has no root in (0, {upper}]")]
    RootSolve { which: &'static str, upper: f64 },
    #[error(transparent)]
    Prox(#[from] ProxError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// A complete asymptotic problem instance.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    /// Sample ratio `n / d`.
    pub alpha: f64,
    /// Second-stage ridge strength.
    pub lambda: f64,
    /// First-stage ridge strength.
    pub lambda0: f64,
    pub class_probs: Vec<f64>,
    /// `ν_c = ⟨β, μ_c⟩`.
    pub nu: Vec<f64>,
    /// `ρ_{cc'} = ⟨μ_c, μ_c'⟩`.
    pub rho: DMatrix<f64>,
    /// `ϱ = ‖β‖²`.
    pub varrho: f64,
    pub link: Arc<dyn LinkFunction>,
    pub noise: NoiseModel,
    pub loss0: SharedStage0,
    pub loss1: SharedStage1,
}

impl ProblemSpec {
    pub fn n_classes(&self) -> usize {
        self.class_probs.len()
    }

    /// Gram matrix `A = [[ϱ, νᵀ], [ν, ρ]]` of `(β, μ_1, …, μ_K)`.
    pub fn gram(&self) -> DMatrix<f64> {
        let k = self.n_classes();
        DMatrix::from_fn(k + 1, k + 1, |i, j| match (i, j) {
            (0, 0) => self.varrho,
            (0, j) => self.nu[j - 1],
            (i, 0) => self.nu[i - 1],
            (i, j) => self.rho[(i - 1, j - 1)],
        })
    }

    pub fn with_losses(&self, loss0: SharedStage0, loss1: SharedStage1) -> Self {
        Self {
            loss0,
            loss1,
            ..self.clone()
        }
    }

    pub fn with_stage1_loss(&self, loss1: SharedStage1) -> Self {
        Self {
            loss1,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SeError> {
        let bad = |m: String| Err(SeError::InvalidSpec(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.lambda0 > 0.0 && self.lambda0.is_finite()) {
            return bad(format!("lambda0 must be positive, got {}", self.lambda0));
        }
        let k = self.n_classes();
        if k == 0 {
            return bad("empty class set".into());
        }
        if self.class_probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad(format!("class probabilities {:?}", self.class_probs));
        }
        let total: f64 = self.class_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("class probabilities sum to {total}"));
        }
        if self.nu.len() != k || self.rho.nrows() != k || self.rho.ncols() != k {
            return bad(format!(
                "nu has {} entries and rho is {}x{} for {k} classes",
                self.nu.len(),
                self.rho.nrows(),
                self.rho.ncols()
            ));
        }
        if !(self.varrho > 0.0 && self.varrho.is_finite()) {
            return bad(format!("teacher norm must be positive, got {}", self.varrho));
        }
        let a = self.gram();
        if a.iter().any(|v| !v.is_finite()) {
            return bad("non-finite Gram matrix".into());
        }
        if (&a - a.transpose()).amax() > 0.0 {
            return bad("rho is not symmetric".into());
        }
        let min_eig = SymmetricEigen::new(a).eigenvalues.min();
        if min_eig < -1e-10 {
            return bad(format!("Gram matrix of (beta, mu) has eigenvalue {min_eig}"));
        }
        self.noise.validate()?;
        Ok(())
    }
}

/// First-stage order parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage0Params {
    /// `m₀,c = ⟨ŵ₀, μ_c⟩`
    pub m0: Vec<f64>,
    /// `θ₀ = ⟨ŵ₀, β⟩`
    pub theta0: f64,
    /// `q₀ = ‖ŵ₀‖²`
    pub q0: f64,
    pub v0: f64,
}

impl Stage0Params {
    /// Starting point of the first-stage iteration.
    pub fn initial(spec: &ProblemSpec) -> Self {
        Self {
            m0: vec![0.0; spec.n_classes()],
            theta0: 0.1,
            q0: 0.1,
            v0: 1.0 / (spec.alpha * (spec.lambda0 + 1.0)),
        }
    }

    pub(crate) fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.theta0, self.q0, self.v0];
        v.extend_from_slice(&self.m0);
        v
    }

    pub(crate) fn from_slice(v: &[f64]) -> Self {
        Self {
            theta0: v[0],
            q0: v[1],
            v0: v[2],
            m0: v[3..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Second-stage order parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Params {
    /// `m_c = ⟨ŵ, μ_c⟩`
    pub m: Vec<f64>,
    /// `θ = ⟨ŵ, β⟩`
    pub theta: f64,
    /// `t = ⟨ŵ, ŵ₀⟩`
    pub t: f64,
    /// `q = ‖ŵ‖²`
    pub q: f64,
    pub v: f64,
    pub chi: f64,
}

impl Stage1Params {
    /// Second-stage analogue of a first-stage solution with `χ = 0` and `t`
    /// chosen so that `g₁` and `g₂` are independent given `(g₃, g_c…)`.
    /// That point always lies inside the PSD cone, unlike `t = 0`.
    pub fn initial(spec: &ProblemSpec, p0: &Stage0Params) -> Self {
        let mut p = Self::mirror(p0);
        p.v = p0.v0.min(1.0 / (spec.alpha * spec.lambda));
        if let Ok(law) = build_gaussian_law(spec, p0, &Self::mirror(p0)) {
            // Under the mirror parameters the g₁ and g₂ rows coincide; their
            // part along the (β, μ) block is the explained covariance.
            let na = 1 + spec.n_classes();
            p.t = (0..na).map(|j| law.factor[(law::G2, j)].powi(2)).sum();
        } else {
            p.t = 0.0;
        }
        p
    }

    /// Parameters under which `g₁` duplicates `g₂`.
    pub(crate) fn mirror(p0: &Stage0Params) -> Self {
        Self {
            m: p0.m0.clone(),
            theta: p0.theta0,
            t: p0.q0,
            q: p0.q0,
            v: p0.v0,
            chi: 0.0,
        }
    }

    pub(crate) fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.theta, self.t, self.q, self.v, self.chi];
        v.extend_from_slice(&self.m);
        v
    }

    pub(crate) fn from_slice(v: &[f64]) -> Self {
        Self {
            theta: v[0],
            t: v[1],
            q: v[2],
            v: v[3],
            chi: v[4],
            m: v[5..].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}
