//! Run configuration, read from a TOML file.
//!
//! Unknown keys are rejected so that a misspelt parameter never silently
//! falls back to its default.

use std::path::Path;

use itererm::active_learning::{
    thresholds, AlPolicy, AlProblem, BudgetSpec, IsotropicProblem, MarginLossName, PruningProblem,
    PruningVariant, SimConfig, TheoryConfig, Thresholds,
};
use itererm::erm_sim::{Backend, FitConfig};
use itererm::losses::{PolicyKind, SelectionPolicy};
use itererm::state_evolution::{Estimator, FixedPointConfig, IntegratorConfig, Scheme, Stage0Params};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

/// A single value or a list of them.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub problem: ProblemSection,
    #[serde(default)]
    pub losses: LossSection,
    pub budget: Option<BudgetSection>,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub integrator: IntegratorSection,
    #[serde(default)]
    pub fixed_point: FixedPointSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    pub pruning: Option<PruningSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// Teacher-student model, every label available, fixed policy.
    Isotropic,
    /// Teacher-student model with a label budget.
    ActiveLearning,
    /// Binary Gaussian mixture, for pruning.
    Gmm,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub alpha: Option<f64>,
    pub lambda: f64,
    pub lambda0: f64,
    /// Label flip rate of the isotropic problem.
    #[serde(default)]
    pub flip: f64,
    /// Cluster mean norm of the mixture.
    #[serde(default = "default_mu_norm")]
    pub mu_norm: f64,
}

fn default_mu_norm() -> f64 {
    0.8
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub stage0: Option<MarginLossName>,
    pub stage1: Option<MarginLossName>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub gamma: OneOrMany<f64>,
    /// Single point, for `solve` and `simulate`.
    pub psi: Option<f64>,
    /// Explicit sweep grid.
    pub psi_grid: Option<Vec<f64>>,
    /// Evenly spaced sweep grid from `psi_min` to `γ`, both included.
    pub psi_steps: Option<usize>,
    pub psi_min: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyName {
    SmallMargin,
    LargeMargin,
    Mixed,
    Random,
    CorrectClassified,
    Constant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: Option<OneOrMany<PolicyName>>,
    /// Inner fraction of the mixed policy.
    pub inner: Option<f64>,
    /// Fixed threshold of the isotropic margin policies.
    pub kappa: Option<f64>,
    /// Keep probability of the constant policy.
    pub p: Option<f64>,
    #[serde(default = "default_width_rel")]
    pub width_rel: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: None,
            inner: None,
            kappa: None,
            p: None,
            width_rel: default_width_rel(),
        }
    }
}

fn default_width_rel() -> f64 {
    TheoryConfig::default().width_rel
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorSection {
    pub nodes: usize,
    pub seed: u64,
    pub estimator: Estimator,
}

impl Default for IntegratorSection {
    fn default() -> Self {
        let d = IntegratorConfig::default();
        Self {
            nodes: d.nodes,
            seed: d.seed,
            estimator: d.estimator,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointSection {
    pub scheme: Scheme,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub zero_derivative_indicators: bool,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        let d = FixedPointConfig::default();
        Self {
            scheme: d.scheme,
            damping: d.damping,
            tol: d.tol,
            max_iter: d.max_iter,
            zero_derivative_indicators: d.zero_derivative_indicators,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Run the simulator next to the theory in `sweep` and `prune`.
    pub enabled: bool,
    pub d: usize,
    pub seeds: usize,
    pub seed: u64,
    pub n_test: usize,
    pub backend: Backend,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            enabled: false,
            d: d.d,
            seeds: d.n_seeds,
            seed: d.seed,
            n_test: d.n_test,
            backend: d.fit.backend,
            tol: d.fit.tol,
            max_iter: d.fit.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantName {
    LargeMarginClean,
    FlipNoiseFilter,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    pub variant: VariantName,
    pub p_flip: Option<f64>,
    pub kappa: Option<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub seeds: Option<usize>,
    pub dim: Option<usize>,
    pub nodes: Option<usize>,
}

/// Which pipeline a config runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Solve,
    Simulate,
    Sweep,
    Prune,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate => "simulate",
            Command::Sweep => "sweep",
            Command::Prune => "prune",
        }
    }
}

/// A named isotropic policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamedKind {
    pub name: &'static str,
    pub kind: PolicyKind,
}

/// The problem of a run with every name resolved.
#[derive(Debug, Clone)]
pub enum Resolved {
    Isotropic {
        problem: IsotropicProblem,
        policies: Vec<NamedKind>,
    },
    ActiveLearning {
        problem: AlProblem,
        gammas: Vec<f64>,
        /// One grid per `γ`.
        grids: Vec<Vec<f64>>,
        policies: Vec<AlPolicy>,
    },
    Gmm {
        problem: PruningProblem,
        variant: PruningVariant,
        alphas: Vec<f64>,
    },
}

/// Fully validated run.
#[derive(Debug, Clone)]
pub struct Plan {
    pub run_id: String,
    pub command: Command,
    pub resolved: Resolved,
    pub theory: Option<TheoryConfig>,
    pub sim: Option<SimConfig>,
    pub d: usize,
}

impl RunConfig {
    pub fn from_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: shown.clone(),
            source,
        })?;
        Self::from_str(&text, &shown)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.integrator.seed = seed;
            self.simulation.seed = seed;
        }
        if let Some(s) = o.seeds {
            self.simulation.seeds = s;
        }
        if let Some(d) = o.dim {
            self.simulation.d = d;
        }
        if let Some(n) = o.nodes {
            self.integrator.nodes = n;
        }
    }

    fn theory_config(&self) -> TheoryConfig {
        TheoryConfig {
            integrator: IntegratorConfig {
                nodes: self.integrator.nodes,
                seed: self.integrator.seed,
                estimator: self.integrator.estimator,
            },
            fixed_point: FixedPointConfig {
                scheme: self.fixed_point.scheme,
                damping: self.fixed_point.damping,
                tol: self.fixed_point.tol,
                max_iter: self.fixed_point.max_iter,
                zero_derivative_indicators: self.fixed_point.zero_derivative_indicators,
            },
            width_rel: self.policy.width_rel,
        }
    }

    fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            d: s.d,
            n_seeds: s.seeds,
            seed: s.seed,
            n_test: s.n_test,
            fit: FitConfig {
                backend: s.backend,
                tol: s.tol,
                max_iter: s.max_iter,
                ..FitConfig::default()
            },
        }
    }

    /// Resolves every name and checks every range for `command`, without
    /// computing anything.
    pub fn plan(&self, command: Command) -> Result<Plan, ConfigError> {
        check_run_id(&self.run_id)?;
        let p = &self.problem;
        positive("problem.lambda", p.lambda)?;
        positive("problem.lambda0", p.lambda0)?;
        let theory = self.theory_config();
        theory
            .integrator
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("integrator: {e}")))?;
        theory
            .fixed_point
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("fixed_point: {e}")))?;
        positive("policy.width_rel", theory.width_rel)?;
        let sim = self.sim_config();
        if sim.d == 0 {
            return invalid("simulation.d must be positive");
        }
        if sim.n_seeds < 2 {
            return invalid(format!(
                "simulation.seeds must be at least 2, got {}",
                sim.n_seeds
            ));
        }
        if sim.n_test == 0 {
            return invalid("simulation.n_test must be positive");
        }
        positive("simulation.tol", sim.fit.tol)?;

        let resolved = match p.kind {
            ProblemKind::Isotropic => self.resolve_isotropic(command)?,
            ProblemKind::ActiveLearning => self.resolve_al(command)?,
            ProblemKind::Gmm => self.resolve_gmm(command)?,
        };
        let (theory, sim) = match command {
            Command::Solve => (Some(theory), None),
            Command::Simulate => (None, Some(sim)),
            Command::Sweep | Command::Prune => (Some(theory), self.simulation.enabled.then_some(sim)),
        };
        Ok(Plan {
            run_id: self.run_id.clone(),
            command,
            resolved,
            theory,
            sim,
            d: self.simulation.d,
        })
    }

    fn alpha(&self) -> Result<f64, ConfigError> {
        match self.problem.alpha {
            Some(a) => {
                positive("problem.alpha", a)?;
                Ok(a)
            }
            None => invalid("problem.alpha is required"),
        }
    }

    fn losses(&self, default: MarginLossName) -> (MarginLossName, MarginLossName) {
        (
            self.losses.stage0.unwrap_or(default),
            self.losses.stage1.unwrap_or(default),
        )
    }

    fn policy_names(&self, default: PolicyName) -> Result<Vec<PolicyName>, ConfigError> {
        let names = self
            .policy
            .kind
            .as_ref()
            .map(|k| k.to_vec())
            .unwrap_or(vec![default]);
        if names.is_empty() {
            return invalid("policy.kind is an empty list");
        }
        Ok(names)
    }

    fn resolve_isotropic(&self, command: Command) -> Result<Resolved, ConfigError> {
        if !matches!(command, Command::Solve | Command::Simulate) {
            return invalid(format!(
                "`{}` does not apply to the isotropic problem; use solve or simulate",
                command.name()
            ));
        }
        let p = &self.problem;
        if !(0.0..=0.5).contains(&p.flip) {
            return invalid(format!("problem.flip must lie in [0, 0.5], got {}", p.flip));
        }
        let (loss0, loss1) = self.losses(MarginLossName::Square);
        let problem = IsotropicProblem {
            alpha: self.alpha()?,
            lambda: p.lambda,
            lambda0: p.lambda0,
            loss0,
            loss1,
            flip: p.flip,
        };
        let kappa = || match self.policy.kappa {
            Some(k) if k >= 0.0 => Ok(k),
            Some(k) => invalid(format!("policy.kappa must be non-negative, got {k}")),
            None => invalid("margin policies of the isotropic problem need policy.kappa"),
        };
        let mut policies = Vec::new();
        for name in self.policy_names(PolicyName::Constant)? {
            let nk =
                match name {
                    PolicyName::SmallMargin => NamedKind {
                        name: "small-margin",
                        kind: PolicyKind::SmallMargin { kappa: kappa()? },
                    },
                    PolicyName::LargeMargin => NamedKind {
                        name: "large-margin",
                        kind: PolicyKind::LargeMargin { kappa: kappa()? },
                    },
                    PolicyName::CorrectClassified => NamedKind {
                        name: "correct-classified",
                        kind: PolicyKind::CorrectlyClassified,
                    },
                    PolicyName::Constant => {
                        let q = self.policy.p.unwrap_or(1.0);
                        if !(q > 0.0 && q <= 1.0) {
                            return invalid(format!("policy.p must lie in (0, 1], got {q}"));
                        }
                        NamedKind {
                            name: "constant",
                            kind: PolicyKind::Constant(q),
                        }
                    }
                    PolicyName::Mixed | PolicyName::Random => return invalid(
                        "mixed and random policies need a label budget (problem.kind = \"active-learning\")",
                    ),
                };
            policies.push(nk);
        }
        Ok(Resolved::Isotropic { problem, policies })
    }

    fn resolve_al(&self, command: Command) -> Result<Resolved, ConfigError> {
        if command == Command::Prune {
            return invalid("`prune` needs problem.kind = \"gmm\"");
        }
        let p = &self.problem;
        let (loss0, loss1) = self.losses(MarginLossName::Square);
        let problem = AlProblem {
            alpha: self.alpha()?,
            lambda: p.lambda,
            lambda0: p.lambda0,
            loss0,
            loss1,
        };
        let Some(b) = &self.budget else {
            return invalid("the active-learning problem needs a [budget] section");
        };
        let gammas = b.gamma.to_vec();
        if gammas.is_empty() {
            return invalid("budget.gamma is an empty list");
        }
        let mut grids = Vec::new();
        for &gamma in &gammas {
            let grid = match command {
                Command::Sweep => sweep_grid(b, gamma)?,
                _ => {
                    if gammas.len() > 1 {
                        return invalid(format!("`{}` takes a single budget.gamma", command.name()));
                    }
                    match b.psi {
                        Some(psi) => vec![psi],
                        None => return invalid(format!("`{}` needs budget.psi", command.name())),
                    }
                }
            };
            for &psi in &grid {
                BudgetSpec::new(gamma, psi).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
            grids.push(grid);
        }
        let mut policies = Vec::new();
        for name in self.policy_names(PolicyName::SmallMargin)? {
            let pol = match name {
                PolicyName::SmallMargin => AlPolicy::SmallMargin,
                PolicyName::LargeMargin => AlPolicy::LargeMargin,
                PolicyName::Random => AlPolicy::Random,
                PolicyName::Mixed => match self.policy.inner {
                    Some(inner) => AlPolicy::Mixed { inner },
                    None => return invalid("the mixed policy needs policy.inner"),
                },
                PolicyName::CorrectClassified | PolicyName::Constant => {
                    return invalid(
                        "correct-classified and constant policies apply to problems without a budget",
                    )
                }
            };
            pol.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            policies.push(pol);
        }
        Ok(Resolved::ActiveLearning {
            problem,
            gammas,
            grids,
            policies,
        })
    }

    fn resolve_gmm(&self, command: Command) -> Result<Resolved, ConfigError> {
        if command == Command::Sweep {
            return invalid("`sweep` needs problem.kind = \"active-learning\"");
        }
        if self.policy.kind.is_some() {
            return invalid(
                "the mixture problem takes its policy from [pruning].variant; remove policy.kind",
            );
        }
        let p = &self.problem;
        positive("problem.mu_norm", p.mu_norm)?;
        let Some(pr) = &self.pruning else {
            return invalid("the mixture problem needs a [pruning] section");
        };
        let variant = match pr.variant {
            VariantName::LargeMarginClean => {
                let kappa = pr.kappa.unwrap_or(0.0);
                if !(kappa >= 0.0 && kappa.is_finite()) {
                    return invalid(format!("pruning.kappa must be non-negative, got {kappa}"));
                }
                PruningVariant::LargeMarginClean { kappa }
            }
            VariantName::FlipNoiseFilter => {
                let p_flip = pr.p_flip.unwrap_or(0.2);
                if !(0.0..=0.5).contains(&p_flip) {
                    return invalid(format!("pruning.p_flip must lie in [0, 0.5], got {p_flip}"));
                }
                PruningVariant::FlipNoiseFilter { p_flip }
            }
        };
        let alphas = match command {
            Command::Prune => {
                let a = pr.alphas.clone();
                if a.is_empty() {
                    return invalid("`prune` needs pruning.alphas");
                }
                if a[0] <= 0.0 || a.windows(2).any(|w| !(w[0] < w[1])) {
                    return invalid("pruning.alphas must be positive and strictly increasing");
                }
                a
            }
            _ => vec![self.alpha()?],
        };
        let (loss0, _) = self.losses(MarginLossName::Logistic);
        if self.losses.stage1.is_some_and(|l| l != loss0) {
            return invalid("the mixture problem uses one loss for both stages");
        }
        let problem = PruningProblem {
            mu_norm: p.mu_norm,
            lambda: p.lambda,
            lambda0: p.lambda0,
            loss: loss0,
        };
        Ok(Resolved::Gmm {
            problem,
            variant,
            alphas,
        })
    }
}

fn check_run_id(id: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if !ok {
        return invalid(format!(
            "run_id {id:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
        ));
    }
    Ok(())
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if !(v > 0.0 && v.is_finite()) {
        return invalid(format!("{field} must be strictly positive, got {v}"));
    }
    Ok(())
}

fn sweep_grid(b: &BudgetSection, gamma: f64) -> Result<Vec<f64>, ConfigError> {
    if let Some(psi) = b.psi {
        if b.psi_grid.is_some() || b.psi_steps.is_some() || b.psi_min.is_some() {
            return invalid(
                "give either budget.psi or a sweep grid (psi_grid, psi_steps, psi_min), not both",
            );
        }
        return Ok(vec![psi]);
    }
    if let Some(grid) = &b.psi_grid {
        if b.psi_steps.is_some() {
            return invalid("give either budget.psi_grid or budget.psi_steps, not both");
        }
        return Ok(grid.clone());
    }
    let steps = b.psi_steps.unwrap_or(20);
    if steps < 2 {
        return invalid(format!("budget.psi_steps must be at least 2, got {steps}"));
    }
    let lo = b.psi_min.unwrap_or(0.01);
    if !(lo > 0.0 && lo < gamma) {
        return invalid(format!(
            "budget.psi_min must lie in (0, gamma = {gamma}), got {lo}"
        ));
    }
    Ok((0..steps)
        .map(|k| {
            if k + 1 == steps {
                gamma
            } else {
                lo + (gamma - lo) * k as f64 / (steps - 1) as f64
            }
        })
        .collect())
}

impl Plan {
    /// Human-readable summary of everything the run would compute.
    pub fn report(&self) -> Vec<String> {
        let mut out = vec![
            format!("run_id: {}", self.run_id),
            format!("command: {}", self.command.name()),
        ];
        let engines = match (&self.theory, &self.sim) {
            (Some(_), Some(_)) => "theory + simulation",
            (Some(_), None) => "theory",
            (None, Some(_)) => "simulation",
            (None, None) => "none",
        };
        out.push(format!("engines: {engines}"));
        if let Some(t) = &self.theory {
            out.push(format!(
                "integrator: {} nodes per stratum, seed {}, {:?}; fixed point: {:?}, tol {:e}, max_iter {}; width_rel {}",
                t.integrator.nodes,
                t.integrator.seed,
                t.integrator.estimator,
                t.fixed_point.scheme,
                t.fixed_point.tol,
                t.fixed_point.max_iter,
                t.width_rel
            ));
        }
        if let Some(s) = &self.sim {
            out.push(format!(
                "simulation: d = {}, {} seeds from seed {}, {} test samples, {:?} backend",
                s.d, s.n_seeds, s.seed, s.n_test, s.fit.backend
            ));
        }
        let n_of = |alpha: f64| (alpha * self.d as f64).round() as u64;
        match &self.resolved {
            Resolved::Isotropic { problem, policies } => {
                out.push(format!(
                    "problem: isotropic teacher, alpha = {}, n = alpha d = {}, lambda0 = {}, lambda = {}, flip = {}",
                    problem.alpha,
                    n_of(problem.alpha),
                    problem.lambda0,
                    problem.lambda,
                    problem.flip
                ));
                out.push(format!(
                    "losses: stage0 {:?}, stage1 {:?}",
                    problem.loss0, problem.loss1
                ));
                for p in policies {
                    out.push(format!("policy: {} {:?}", p.name, p.kind));
                }
            }
            Resolved::ActiveLearning {
                problem,
                gammas,
                grids,
                policies,
            } => {
                out.push(format!(
                    "problem: active learning, alpha = {}, n = alpha d = {}, lambda0 = {}, lambda = {}",
                    problem.alpha,
                    n_of(problem.alpha),
                    problem.lambda0,
                    problem.lambda
                ));
                out.push(format!(
                    "losses: stage0 {:?}, stage1 {:?}",
                    problem.loss0, problem.loss1
                ));
                let names: Vec<&str> = policies.iter().map(|p| p.name()).collect();
                out.push(format!("policies: {}", names.join(", ")));
                for (gamma, grid) in gammas.iter().zip(grids) {
                    let shown: Vec<String> = grid.iter().map(|v| format!("{v:.4}")).collect();
                    out.push(format!(
                        "gamma = {gamma}: psi grid ({} points) [{}]",
                        grid.len(),
                        shown.join(", ")
                    ));
                    for psi in grid {
                        let budget = BudgetSpec {
                            gamma: *gamma,
                            psi: *psi,
                        };
                        let q0 = match problem.spec(&budget, SelectionPolicy::constant(1.0)) {
                            Ok(s) => Stage0Params::initial(&s).q0,
                            Err(_) => continue,
                        };
                        for pol in policies {
                            let th = thresholds(pol, &budget, q0);
                            out.push(format!(
                                "  psi = {psi:.4} {:<12} initial q0 = {q0:.4}: {}",
                                pol.name(),
                                match th {
                                    Ok(th) => fmt_thresholds(&th),
                                    Err(e) => e.to_string(),
                                }
                            ));
                        }
                    }
                }
            }
            Resolved::Gmm {
                problem,
                variant,
                alphas,
            } => {
                out.push(format!(
                    "problem: gaussian mixture, |mu| = {}, lambda0 = {}, lambda = {}, loss {:?}",
                    problem.mu_norm, problem.lambda0, problem.lambda, problem.loss
                ));
                out.push(format!("variant: {variant:?}, with the full-data baseline"));
                let shown: Vec<String> = alphas.iter().map(|a| format!("{a} (n = {})", n_of(*a))).collect();
                out.push(format!("alpha: {}", shown.join(", ")));
            }
        }
        out
    }
}

fn fmt_thresholds(th: &Thresholds) -> String {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    format!(
        "kappa_minus = {}, kappa_plus = {}",
        f(th.kappa_minus),
        f(th.kappa_plus)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const AL: &str = r#"
run_id = "t"
[problem]
kind = "active-learning"
alpha = 1.0
lambda = 0.01
lambda0 = 0.01
[budget]
gamma = 0.5
psi = 0.2
[policy]
kind = ["small-margin", "large-margin"]
"#;

    fn plan(text: &str, cmd: Command) -> Result<Plan, ConfigError> {
        RunConfig::from_str(text, "t.toml")?.plan(cmd)
    }

    #[test]
    fn active_learning_point_resolves() {
        let p = plan(AL, Command::Solve).unwrap();
        let Resolved::ActiveLearning { policies, grids, .. } = &p.resolved else {
            panic!()
        };
        assert_eq!(policies, &vec![AlPolicy::SmallMargin, AlPolicy::LargeMargin]);
        assert_eq!(grids, &vec![vec![0.2]]);
        let report = p.report().join("\n");
        assert!(report.contains("alpha = 1,"), "{report}");
        assert!(report.contains("small-margin, large-margin"), "{report}");
    }

    #[test]
    fn psi_above_gamma_is_rejected() {
        let text = AL.replace("psi = 0.2", "psi = 0.6");
        let e = plan(&text, Command::Solve).unwrap_err().to_string();
        assert!(e.contains("psi <= gamma"), "{e}");
    }

    #[test]
    fn zero_ridge_is_rejected() {
        let text = AL.replace("lambda = 0.01", "lambda = 0.0");
        let e = plan(&text, Command::Solve).unwrap_err().to_string();
        assert!(e.contains("problem.lambda must be strictly positive"), "{e}");
    }

    #[test]
    fn unknown_key_reports_its_line() {
        let text = AL.replace("lambda0 = 0.01", "lambda0 = 0.01\nlamda = 2");
        let e = plan(&text, Command::Solve).unwrap_err().to_string();
        assert!(e.contains("lamda") && e.contains("line 8"), "{e}");
    }

    #[test]
    fn unknown_policy_name_is_rejected() {
        let text = AL.replace("\"large-margin\"", "\"widest-margin\"");
        assert!(plan(&text, Command::Solve).is_err());
    }

    #[test]
    fn sweep_takes_a_single_psi() {
        let p = plan(AL, Command::Sweep).unwrap();
        let Resolved::ActiveLearning { grids, .. } = &p.resolved else {
            panic!()
        };
        assert_eq!(grids, &vec![vec![0.2]]);
        let both = AL.replace("psi = 0.2", "psi = 0.2\npsi_steps = 4");
        let err = plan(&both, Command::Sweep).unwrap_err();
        assert!(err.to_string().contains("not both"), "{err}");
    }

    #[test]
    fn sweep_grid_ends_at_gamma() {
        let text = AL.replace("psi = 0.2", "psi_steps = 5\npsi_min = 0.1");
        let p = plan(&text, Command::Sweep).unwrap();
        let Resolved::ActiveLearning { grids, .. } = &p.resolved else {
            panic!()
        };
        assert_eq!(grids[0].len(), 5);
        assert_eq!(grids[0][0], 0.1);
        assert_eq!(grids[0][4], 0.5);
    }

    #[test]
    fn overrides_reach_both_engines() {
        let text = AL.replace("psi = 0.2", "psi_grid = [0.1, 0.3]");
        let mut c = RunConfig::from_str(&text, "t.toml").unwrap();
        c.simulation.enabled = true;
        c.apply(&Overrides {
            seed: Some(7),
            seeds: Some(3),
            dim: Some(50),
            nodes: Some(5000),
        });
        let p = c.plan(Command::Sweep).unwrap();
        let (t, s) = (p.theory.unwrap(), p.sim.unwrap());
        assert_eq!((t.integrator.seed, t.integrator.nodes), (7, 5000));
        assert_eq!((s.seed, s.n_seeds, s.d), (7, 3, 50));
    }
}
