//! Finite-dimensional two-stage ERM on Gaussian-mixture data.
//!
//! Datasets are drawn from the same model the asymptotic equations describe,
//! the two risks are minimised to high accuracy, and the resulting overlaps
//! and test errors are what the theory is compared against.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{sign, Latent, SharedStage1, Stage0Loss, Stage1Loss};
use crate::state_evolution::ProblemSpec;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("dimension {d} cannot embed the teacher and {classes} class means")]
    DimensionTooSmall { d: usize, classes: usize },
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("line search failed after {iterations} iterations (gradient norm {grad_norm:e})")]
    LineSearch { iterations: usize, grad_norm: f64 },
    #[error("Hessian is not positive definite")]
    Hessian,
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("second-stage loss: {0}")]
    Stage1(String),
}

/// A sample of size `n = round(α d)` from the mixture.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `n × d` covariates.
    pub x: DMatrix<f64>,
    pub class: Vec<usize>,
    pub noise: Vec<f64>,
    /// Teacher pre-activations `⟨β, x_i⟩`.
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub beta: DVector<f64>,
    pub mus: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn latent(&self, i: usize) -> Latent {
        Latent::new(self.s[i], self.class[i], self.noise[i])
    }
}

/// `β` and `μ_c` with Gram matrix exactly `A`, supported on the leading
/// `1 + K` coordinates. Their components are the rows of a (semidefinite)
/// Cholesky factor of `A`.
pub fn embed_geometry(spec: &ProblemSpec, d: usize) -> Result<(DVector<f64>, Vec<DVector<f64>>), SimError> {
    let k = spec.n_classes();
    if d < 1 + k {
        return Err(SimError::DimensionTooSmall { d, classes: k });
    }
    let a = spec.gram();
    let na = 1 + k;
    let scale = (0..na).map(|i| a[(i, i)]).fold(1.0f64, f64::max);
    let mut l = DMatrix::<f64>::zeros(na, na);
    for j in 0..na {
        let mut diag = a[(j, j)];
        for m in 0..j {
            diag -= l[(j, m)] * l[(j, m)];
        }
        if diag < -1e-10 * scale {
            return Err(SimError::InvalidSpec(format!(
                "Gram matrix of (beta, mu) is not PSD (pivot {diag})"
            )));
        }
        if diag <= 1e-12 * scale {
            continue;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..na {
            let mut v = a[(i, j)];
            for m in 0..j {
                v -= l[(i, m)] * l[(j, m)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    let row = |i: usize| {
        let mut v = DVector::zeros(d);
        for j in 0..na {
            v[j] = l[(i, j)];
        }
        v
    };
    Ok((row(0), (1..na).map(row).collect()))
}

fn sample_class<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // Rounding in the cumulative sum: fall back on the last class with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Draws `n = round(α d)` samples `x_i = μ_{c_i} + z_i`.
pub fn generate_dataset<R: Rng + ?Sized>(
    spec: &ProblemSpec,
    d: usize,
    rng: &mut R,
) -> Result<Dataset, SimError> {
    spec.validate()
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let (beta, mus) = embed_geometry(spec, d)?;
    let n = (spec.alpha * d as f64).round() as usize;
    if n == 0 {
        return Err(SimError::InvalidSpec(format!(
            "alpha * d rounds to zero samples (d = {d})"
        )));
    }
    let mut x = DMatrix::zeros(n, d);
    let mut class = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = sample_class(&spec.class_probs, rng);
        let eps = spec.noise.sample(rng);
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            x[(i, j)] = mus[c][j] + z;
        }
        let si = x.row(i).transpose().dot(&beta);
        class.push(c);
        noise.push(eps);
        s.push(si);
        y.push(spec.link.eval(si, c, eps));
    }
    Ok(Dataset {
        x,
        class,
        noise,
        s,
        y,
        beta,
        mus,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Newton steps with the Hessian formed explicitly and factored.
    Newton,
    /// Newton steps solved inexactly by conjugate gradients on
    /// Hessian-vector products.
    NewtonCg,
    /// Gradient descent with backtracking.
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub backend: Backend,
    /// Stop when `‖∇R(w)‖ ≤ tol · max(1, ‖∇R(0)‖)`.
    pub tol: f64,
    pub max_iter: usize,
    /// `Newton` switches to `NewtonCg` above this dimension.
    pub dense_max_dim: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Newton,
            tol: 1e-9,
            max_iter: 200,
            dense_max_dim: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub w: DVector<f64>,
    pub grad_norm: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-sample loss `f_i(z)` with its first two derivatives.
trait SampleLosses: Sync {
    fn eval(&self, i: usize, z: f64) -> (f64, f64, f64);
}

struct Stage0Losses<'a> {
    data: &'a Dataset,
    loss: &'a dyn Stage0Loss,
}

impl SampleLosses for Stage0Losses<'_> {
    fn eval(&self, i: usize, z: f64) -> (f64, f64, f64) {
        let x = self.data.latent(i);
        (self.loss.value(z, &x), self.loss.d1(z, &x), self.loss.d2(z, &x))
    }
}

struct Stage1Losses<'a> {
    data: &'a Dataset,
    u: &'a [f64],
    loss: &'a dyn Stage1Loss,
}

impl SampleLosses for Stage1Losses<'_> {
    fn eval(&self, i: usize, z: f64) -> (f64, f64, f64) {
        let x = self.data.latent(i);
        let u = self.u[i];
        (
            self.loss.value(z, u, &x),
            self.loss.dr(z, u, &x),
            self.loss.drr(z, u, &x),
        )
    }
}

/// `R(w) = (1/n) Σ f_i(⟨w, x_i⟩) + (λ/2) ‖w‖²`.
struct Risk<'a, L: SampleLosses> {
    x: &'a DMatrix<f64>,
    losses: L,
    lambda: f64,
    /// Rows whose loss is identically zero (zero sample weight), skipped.
    active: Vec<usize>,
}

struct Point {
    value: f64,
    grad: DVector<f64>,
    /// `f_i''` on the active rows.
    curv: Vec<f64>,
}

impl<L: SampleLosses> Risk<'_, L> {
    fn margins(&self, w: &DVector<f64>) -> DVector<f64> {
        self.x * w
    }

    fn value(&self, w: &DVector<f64>) -> f64 {
        let z = self.margins(w);
        let n = self.x.nrows() as f64;
        let data: f64 = self.active.iter().map(|&i| self.losses.eval(i, z[i]).0).sum();
        data / n + 0.5 * self.lambda * w.norm_squared()
    }

    fn point(&self, w: &DVector<f64>) -> Point {
        let z = self.margins(w);
        let n = self.x.nrows() as f64;
        let mut value = 0.0;
        let mut d1 = DVector::zeros(self.x.nrows());
        let mut curv = Vec::with_capacity(self.active.len());
        for &i in &self.active {
            let (v, g, h) = self.losses.eval(i, z[i]);
            value += v;
            d1[i] = g;
            curv.push(h);
        }
        let grad = self.x.tr_mul(&d1) / n + w * self.lambda;
        Point {
            value: value / n + 0.5 * self.lambda * w.norm_squared(),
            grad,
            curv,
        }
    }

    /// `(1/n) Xᵀ diag(f'') X + λ I`, built from the active rows only.
    fn hessian(&self, curv: &[f64]) -> DMatrix<f64> {
        let d = self.x.ncols();
        let n = self.x.nrows() as f64;
        let rows: Vec<usize> = self
            .active
            .iter()
            .zip(curv)
            .filter(|(_, &h)| h > 0.0)
            .map(|(&i, _)| i)
            .collect();
        let mut scaled = DMatrix::zeros(rows.len(), d);
        let mut k = 0;
        for (&i, &h) in self.active.iter().zip(curv) {
            if h > 0.0 {
                let r = (h / n).sqrt();
                for j in 0..d {
                    scaled[(k, j)] = r * self.x[(i, j)];
                }
                k += 1;
            }
        }
        let mut hess = scaled.tr_mul(&scaled);
        for j in 0..d {
            hess[(j, j)] += self.lambda;
        }
        hess
    }

    fn hess_vec(&self, curv: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let n = self.x.nrows() as f64;
        let xv = self.x * v;
        let mut scaled = DVector::zeros(self.x.nrows());
        for (&i, &h) in self.active.iter().zip(curv) {
            scaled[i] = h * xv[i] / n;
        }
        self.x.tr_mul(&scaled) + v * self.lambda
    }
}

/// Conjugate gradients on `H p = -g` to relative residual `forcing`.
fn cg_solve<L: SampleLosses>(
    risk: &Risk<'_, L>,
    curv: &[f64],
    g: &DVector<f64>,
    forcing: f64,
) -> DVector<f64> {
    let d = g.len();
    let mut p = DVector::zeros(d);
    let mut r = -g.clone();
    let mut dir = r.clone();
    let mut rr = r.norm_squared();
    let target = forcing * forcing * rr;
    for _ in 0..(2 * d).max(50) {
        if rr <= target {
            break;
        }
        let hd = risk.hess_vec(curv, &dir);
        let curvature = dir.dot(&hd);
        if curvature <= 0.0 {
            break;
        }
        let a = rr / curvature;
        p += &dir * a;
        r -= &hd * a;
        let rr_new = r.norm_squared();
        dir = &r + &dir * (rr_new / rr);
        rr = rr_new;
    }
    p
}

const ARMIJO: f64 = 1e-4;

/// Minimises a strongly convex risk starting from `w = 0`.
fn minimize<L: SampleLosses>(risk: &Risk<'_, L>, cfg: &FitConfig) -> Result<FitResult, SimError> {
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(SimError::InvalidConfig(format!("{cfg:?}")));
    }
    let d = risk.x.ncols();
    let mut w = DVector::zeros(d);
    if risk.active.is_empty() {
        return Ok(FitResult {
            w,
            grad_norm: 0.0,
            objective: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let backend = match cfg.backend {
        Backend::Newton if d > cfg.dense_max_dim => Backend::NewtonCg,
        b => b,
    };
    let mut pt = risk.point(&w);
    let threshold = cfg.tol * pt.grad.norm().max(1.0);
    let g0 = pt.grad.norm();
    let mut gd_step = 1.0;
    for it in 0..cfg.max_iter {
        let grad_norm = pt.grad.norm();
        if grad_norm <= threshold {
            return Ok(FitResult {
                w,
                grad_norm,
                objective: pt.value,
                iterations: it,
                converged: true,
            });
        }
        let dir = match backend {
            Backend::Newton => {
                let chol = risk.hessian(&pt.curv).cholesky().ok_or(SimError::Hessian)?;
                -chol.solve(&pt.grad)
            }
            Backend::NewtonCg => {
                let forcing = (grad_norm / g0.max(1e-300)).sqrt().min(0.1);
                cg_solve(risk, &pt.curv, &pt.grad, forcing)
            }
            Backend::GradientDescent => -&pt.grad,
        };
        let slope = pt.grad.dot(&dir);
        let mut step = if backend == Backend::GradientDescent {
            gd_step
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..60 {
            let trial = &w + &dir * step;
            let value = risk.value(&trial);
            if value <= pt.value + ARMIJO * step * slope {
                accepted = Some(trial);
                break;
            }
            // Close to the optimum the decrease falls below rounding; accept
            // a step that does not increase the risk beyond it if it shrinks
            // the gradient.
            if value <= pt.value + 1e-14 * pt.value.abs() {
                let cand = risk.point(&trial);
                if cand.grad.norm() < grad_norm {
                    accepted = Some(trial);
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some(next) => {
                w = next;
                pt = risk.point(&w);
                if backend == Backend::GradientDescent {
                    gd_step = step * 2.0;
                }
            }
            None => {
                return Err(SimError::LineSearch {
                    iterations: it,
                    grad_norm,
                })
            }
        }
    }
    let grad_norm = pt.grad.norm();
    Ok(FitResult {
        converged: grad_norm <= threshold,
        w,
        grad_norm,
        objective: pt.value,
        iterations: cfg.max_iter,
    })
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `ŵ₀ = argmin (1/n) Σ ℓ₀(⟨w, x_i⟩, s_i, c_i, ε_i) + (λ₀/2) ‖w‖²`.
pub fn fit_stage0(
    data: &Dataset,
    loss0: &dyn Stage0Loss,
    lambda0: f64,
    cfg: &FitConfig,
) -> Result<FitResult, SimError> {
    if !(lambda0 > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "lambda0 must be positive, got {lambda0}"
        )));
    }
    // A sample whose loss vanishes at two distinct points and has zero
    // curvature is identically zero for a convex loss only if its slope is
    // zero too; checking value and slope at 0 and 1 identifies the
    // zero-weight rows of the built-in losses.
    let active = all_rows(data.n())
        .into_iter()
        .filter(|&i| {
            let x = data.latent(i);
            !(loss0.value(0.0, &x) == 0.0
                && loss0.value(1.0, &x) == 0.0
                && loss0.d1(0.0, &x) == 0.0
                && loss0.d1(1.0, &x) == 0.0)
        })
        .collect();
    let risk = Risk {
        x: &data.x,
        losses: Stage0Losses { data, loss: loss0 },
        lambda: lambda0,
        active,
    };
    minimize(&risk, cfg)
}

/// Base predictions `u_i = ⟨ŵ₀, x_i⟩`.
pub fn base_predictions(data: &Dataset, w0: &DVector<f64>) -> Vec<f64> {
    (&data.x * w0).iter().copied().collect()
}

/// `ŵ = argmin (1/n) Σ ℓ(⟨w, x_i⟩, u_i, s_i, c_i, ε_i) + (λ/2) ‖w‖²` with
/// `u_i = ⟨ŵ₀, x_i⟩` computed once. Indicator policies are therefore frozen
/// at their values on `u_i`.
pub fn fit_stage1(
    data: &Dataset,
    w0: &DVector<f64>,
    loss1: &dyn Stage1Loss,
    lambda: f64,
    cfg: &FitConfig,
) -> Result<FitResult, SimError> {
    if !(lambda > 0.0) {
        return Err(SimError::InvalidConfig(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let u = base_predictions(data, w0);
    let active = (0..data.n())
        .filter(|&i| {
            let x = data.latent(i);
            loss1.sample_weight(u[i], &x).is_none_or(|w| w != 0.0)
        })
        .collect();
    let risk = Risk {
        x: &data.x,
        losses: Stage1Losses {
            data,
            u: &u,
            loss: loss1,
        },
        lambda,
        active,
    };
    minimize(&risk, cfg)
}

/// Empirical counterparts of the order parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overlaps {
    pub q0: f64,
    pub theta0: f64,
    pub m0: Vec<f64>,
    pub q: f64,
    pub theta: f64,
    pub t: f64,
    pub m: Vec<f64>,
}

pub fn measure_overlaps(w0: &DVector<f64>, w: &DVector<f64>, data: &Dataset) -> Overlaps {
    Overlaps {
        q0: w0.norm_squared(),
        theta0: w0.dot(&data.beta),
        m0: data.mus.iter().map(|mu| w0.dot(mu)).collect(),
        q: w.norm_squared(),
        theta: w.dot(&data.beta),
        t: w.dot(w0),
        m: data.mus.iter().map(|mu| w.dot(mu)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalError {
    pub value: f64,
    /// `√(ê (1 - ê) / n_test)`
    pub se: f64,
}

/// Misclassification rate of `sign⟨w, x⟩` on `n_test` fresh samples drawn
/// with the geometry of `data`. Labels are clean: the noise is set to the
/// identity `ε = 1`, so label noise in training does not count as error.
pub fn empirical_test_error<R: Rng + ?Sized>(
    w: &DVector<f64>,
    data: &Dataset,
    spec: &ProblemSpec,
    n_test: usize,
    rng: &mut R,
) -> EmpiricalError {
    let n_test = n_test.max(1);
    // ⟨w, x⟩ and ⟨β, x⟩ for x = μ_c + z only need the projections of z on
    // span(w, β): draw them as correlated Gaussians instead of d-vectors.
    let ww = w.norm_squared();
    let wb = w.dot(&data.beta);
    let bb = data.beta.norm_squared();
    let shift_w: Vec<f64> = data.mus.iter().map(|mu| w.dot(mu)).collect();
    let shift_b: Vec<f64> = data.mus.iter().map(|mu| data.beta.dot(mu)).collect();
    // Cholesky of [[bb, wb], [wb, ww]].
    let l11 = bb.sqrt();
    let l21 = if l11 > 0.0 { wb / l11 } else { 0.0 };
    let l22 = (ww - l21 * l21).max(0.0).sqrt();
    let mut errors = 0usize;
    for _ in 0..n_test {
        let c = sample_class(&spec.class_probs, rng);
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let s = shift_b[c] + l11 * z1;
        let pred = shift_w[c] + l21 * z1 + l22 * z2;
        if sign(pred) != spec.link.eval(s, c, 1.0) {
            errors += 1;
        }
    }
    let value = errors as f64 / n_test as f64;
    EmpiricalError {
        value,
        se: (value * (1.0 - value) / n_test as f64).sqrt(),
    }
}

/// Builds the second-stage loss of one trial from its dataset and base
/// estimator, for policies whose thresholds depend on the realised `ŵ₀`.
pub type Stage1Builder = Arc<dyn Fn(&Dataset, &DVector<f64>) -> Result<SharedStage1, String> + Send + Sync>;

#[derive(Clone)]
pub enum Stage1Source {
    Fixed(SharedStage1),
    FromBase(Stage1Builder),
}

#[derive(Clone)]
pub struct PipelineConfig {
    pub stage1: Stage1Source,
    pub fit: FitConfig,
    pub n_test: usize,
    pub seed: u64,
    /// Factor turning a second-stage sample weight into the selected share
    /// of that sample (`γ` for the budgeted losses, 1 for pruning).
    pub selection_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub overlaps: Option<Overlaps>,
    pub test_error: Option<EmpiricalError>,
    /// Test error of the base estimator `ŵ₀`.
    pub base_test_error: Option<EmpiricalError>,
    /// `(1/n) Σ_i scale · w_i`; the fraction of samples used by the second
    /// stage when the weights are indicators.
    pub selected_fraction: Option<f64>,
    pub stage0_iterations: usize,
    pub stage1_iterations: usize,
    /// Why the trial failed, if it did.
    pub failure: Option<String>,
}

impl TrialRecord {
    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    /// Sample mean and (n - 1)-normalised standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, count: n }
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.std / (self.count as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    /// One record per seed, in seed order.
    pub records: Vec<TrialRecord>,
    pub seeds_ok: usize,
    pub test_error: MeanStd,
    pub base_test_error: MeanStd,
    pub selected_fraction: MeanStd,
    pub q0: MeanStd,
    pub theta0: MeanStd,
    pub q: MeanStd,
    pub theta: MeanStd,
    pub t: MeanStd,
}

fn run_one(spec: &ProblemSpec, d: usize, pipe: &PipelineConfig, k: u64) -> TrialRecord {
    let mut rec = TrialRecord {
        seed: k,
        overlaps: None,
        test_error: None,
        base_test_error: None,
        selected_fraction: None,
        stage0_iterations: 0,
        stage1_iterations: 0,
        failure: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(pipe.seed);
    rng.set_stream(k);
    let result = (|| -> Result<(), SimError> {
        let data = generate_dataset(spec, d, &mut rng)?;
        let fit0 = fit_stage0(&data, spec.loss0.as_ref(), spec.lambda0, &pipe.fit)?;
        rec.stage0_iterations = fit0.iterations;
        if !fit0.converged {
            return Err(SimError::NoConvergence {
                iterations: fit0.iterations,
                grad_norm: fit0.grad_norm,
            });
        }
        let loss1 = match &pipe.stage1 {
            Stage1Source::Fixed(l) => l.clone(),
            Stage1Source::FromBase(build) => build(&data, &fit0.w).map_err(SimError::Stage1)?,
        };
        let u = base_predictions(&data, &fit0.w);
        let mass: f64 = (0..data.n())
            .map(|i| loss1.sample_weight(u[i], &data.latent(i)).unwrap_or(1.0))
            .sum();
        rec.selected_fraction = Some(pipe.selection_scale * mass / data.n() as f64);
        let fit1 = fit_stage1(&data, &fit0.w, loss1.as_ref(), spec.lambda, &pipe.fit)?;
        rec.stage1_iterations = fit1.iterations;
        if !fit1.converged {
            return Err(SimError::NoConvergence {
                iterations: fit1.iterations,
                grad_norm: fit1.grad_norm,
            });
        }
        rec.overlaps = Some(measure_overlaps(&fit0.w, &fit1.w, &data));
        rec.test_error = Some(empirical_test_error(&fit1.w, &data, spec, pipe.n_test, &mut rng));
        rec.base_test_error = Some(empirical_test_error(&fit0.w, &data, spec, pipe.n_test, &mut rng));
        Ok(())
    })();
    if let Err(e) = result {
        rec.failure = Some(e.to_string());
    }
    rec
}

/// Runs `n_seeds` independent trials of the two-stage pipeline. Trial `k`
/// draws everything from ChaCha stream `k` of `pipe.seed`; failed trials are
/// kept in `records` with their reason and left out of the statistics.
pub fn run_trials(
    spec: &ProblemSpec,
    d: usize,
    n_seeds: usize,
    pipe: &PipelineConfig,
) -> Result<TrialSummary, SimError> {
    if n_seeds < 2 {
        return Err(SimError::InvalidConfig(format!(
            "need at least 2 seeds, got {n_seeds}"
        )));
    }
    spec.validate()
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    #[cfg(feature = "parallel")]
    let records: Vec<TrialRecord> = {
        use rayon::prelude::*;
        seeds.par_iter().map(|&k| run_one(spec, d, pipe, k)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let records: Vec<TrialRecord> = seeds.iter().map(|&k| run_one(spec, d, pipe, k)).collect();

    let ok: Vec<&TrialRecord> = records.iter().filter(|r| r.ok()).collect();
    let collect = |f: &dyn Fn(&TrialRecord) -> Option<f64>| -> MeanStd {
        MeanStd::of(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
    };
    Ok(TrialSummary {
        seeds_ok: ok.len(),
        test_error: collect(&|r| r.test_error.map(|e| e.value)),
        base_test_error: collect(&|r| r.base_test_error.map(|e| e.value)),
        selected_fraction: collect(&|r| r.selected_fraction),
        q0: collect(&|r| r.overlaps.as_ref().map(|o| o.q0)),
        theta0: collect(&|r| r.overlaps.as_ref().map(|o| o.theta0)),
        q: collect(&|r| r.overlaps.as_ref().map(|o| o.q)),
        theta: collect(&|r| r.overlaps.as_ref().map(|o| o.theta)),
        t: collect(&|r| r.overlaps.as_ref().map(|o| o.t)),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{
        make_al_losses, make_logistic_pair, make_square_pair, make_zero_pair, ClassLink, MarginLoss,
        NoiseModel, PolicyKind, SelectionPolicy, SignLink,
    };
    use approx::assert_relative_eq;

    fn isotropic(alpha: f64, lambda: f64) -> ProblemSpec {
        let (l0, l1) = make_square_pair(Arc::new(SignLink));
        ProblemSpec {
            alpha,
            lambda,
            lambda0: lambda,
            class_probs: vec![1.0],
            nu: vec![0.0],
            rho: DMatrix::zeros(1, 1),
            varrho: 1.0,
            link: Arc::new(SignLink),
            noise: NoiseModel::identity(),
            loss0: l0,
            loss1: l1,
        }
    }

    fn gmm() -> ProblemSpec {
        let link: Arc<dyn crate::losses::LinkFunction> = Arc::new(ClassLink::binary());
        let (l0, l1) = make_logistic_pair(link.clone());
        ProblemSpec {
            alpha: 3.0,
            lambda: 0.05,
            lambda0: 0.05,
            class_probs: vec![0.5, 0.5],
            nu: vec![-0.8, 0.8],
            rho: DMatrix::from_row_slice(2, 2, &[0.64, -0.64, -0.64, 0.64]),
            varrho: 1.0,
            link,
            noise: NoiseModel::SignFlip { p: 0.2 },
            loss0: l0,
            loss1: l1,
        }
    }

    #[test]
    fn geometry_matches_gram_matrix() {
        let spec = gmm();
        let (beta, mus) = embed_geometry(&spec, 10).unwrap();
        let a = spec.gram();
        let vecs: Vec<&DVector<f64>> = std::iter::once(&beta).chain(mus.iter()).collect();
        for i in 0..3 {
            for j in 0..3 {
                assert!((vecs[i].dot(vecs[j]) - a[(i, j)]).abs() < 1e-10);
            }
        }
        assert!(matches!(
            embed_geometry(&spec, 2),
            Err(SimError::DimensionTooSmall { .. })
        ));
    }

    #[test]
    fn isotropic_labels_follow_teacher() {
        let spec = isotropic(2.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = generate_dataset(&spec, 20, &mut rng).unwrap();
        assert_eq!(data.n(), 40);
        assert_eq!(data.beta[0], 1.0);
        for i in 0..data.n() {
            assert_eq!(data.s[i], data.x[(i, 0)]);
            assert_eq!(data.y[i], sign(data.x[(i, 0)]));
        }
    }

    #[test]
    fn class_frequency_is_binomial() {
        let (l0, l1) = make_zero_pair();
        let mut spec = isotropic(100.0, 0.1);
        spec.class_probs = vec![0.7, 0.3];
        spec.nu = vec![0.0; 2];
        spec.rho = DMatrix::zeros(2, 2);
        spec.loss0 = l0;
        spec.loss1 = l1;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = generate_dataset(&spec, 100, &mut rng).unwrap();
        let n = data.n() as f64;
        let freq = data.class.iter().filter(|&&c| c == 1).count() as f64 / n;
        assert!((freq - 0.3).abs() < 3.0 * (0.21f64 / n).sqrt());
    }

    #[test]
    fn zero_loss_gives_zero_estimator() {
        let (l0, l1) = make_zero_pair();
        let spec = isotropic(2.0, 0.1).with_losses(l0, l1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = generate_dataset(&spec, 10, &mut rng).unwrap();
        let fit = fit_stage0(&data, spec.loss0.as_ref(), 0.1, &FitConfig::default()).unwrap();
        assert_eq!(fit.w.norm(), 0.0);
        assert_eq!(fit.iterations, 0);
    }

    #[test]
    fn square_loss_matches_ridge_closed_form() {
        // d = 2, n = 3 with fixed numbers.
        let spec = isotropic(1.5, 0.3);
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, -1.1]);
        let s: Vec<f64> = (0..3).map(|i| x[(i, 0)]).collect();
        let y: Vec<f64> = s.iter().map(|&v| sign(v)).collect();
        let data = Dataset {
            x: x.clone(),
            class: vec![0; 3],
            noise: vec![1.0; 3],
            s,
            y: y.clone(),
            beta: DVector::from_vec(vec![1.0, 0.0]),
            mus: vec![DVector::zeros(2)],
        };
        let fit = fit_stage0(&data, spec.loss0.as_ref(), 0.3, &FitConfig::default()).unwrap();
        let n = 3.0;
        let a = x.tr_mul(&x) / n + DMatrix::identity(2, 2) * 0.3;
        let b = x.tr_mul(&DVector::from_vec(y)) / n;
        let exact = a.lu().solve(&b).unwrap();
        assert_relative_eq!(fit.w, exact, epsilon = 1e-10);
        // Minimiser property.
        let zero = DVector::zeros(2);
        let risk = Risk {
            x: &data.x,
            losses: Stage0Losses {
                data: &data,
                loss: spec.loss0.as_ref(),
            },
            lambda: 0.3,
            active: vec![0, 1, 2],
        };
        assert!(risk.value(&fit.w) <= risk.value(&zero));
    }

    #[test]
    fn al_stage1_matches_weighted_ridge() {
        // d = 2, n = 4; classes 0,1,0,1, exact small-margin indicator.
        let (psi, gamma) = (0.5, 0.75);
        let policy = SelectionPolicy::indicator(PolicyKind::SmallMargin { kappa: 0.4 }).unwrap();
        let (l0, l1) = make_al_losses(MarginLoss::Square, MarginLoss::Square, policy, psi, gamma).unwrap();
        let x = DMatrix::from_row_slice(4, 2, &[0.2, -1.0, 1.3, 0.4, -0.6, 0.9, 0.8, -0.2]);
        let s: Vec<f64> = (0..4).map(|i| x[(i, 0)]).collect();
        let y: Vec<f64> = s.iter().map(|&v| sign(v)).collect();
        let class = vec![0, 1, 0, 1];
        let data = Dataset {
            x: x.clone(),
            class: class.clone(),
            noise: vec![1.0; 4],
            s,
            y: y.clone(),
            beta: DVector::from_vec(vec![1.0, 0.0]),
            mus: vec![DVector::zeros(2); 2],
        };
        let cfg = FitConfig::default();
        let fit0 = fit_stage0(&data, l0.as_ref(), 0.2, &cfg).unwrap();
        let fit1 = fit_stage1(&data, &fit0.w, l1.as_ref(), 0.1, &cfg).unwrap();
        let u = base_predictions(&data, &fit0.w);
        let weights: Vec<f64> = (0..4)
            .map(|i| {
                let pi = if u[i].abs() < 0.4 { 1.0 } else { 0.0 };
                let c = class[i] as f64;
                ((1.0 - c) * pi + c) / gamma
            })
            .collect();
        let n = 4.0;
        let w = DMatrix::from_diagonal(&DVector::from_vec(weights));
        let a = x.transpose() * &w * &x / n + DMatrix::identity(2, 2) * 0.1;
        let b = x.transpose() * &w * DVector::from_vec(y) / n;
        let exact = a.lu().solve(&b).unwrap();
        assert_relative_eq!(fit1.w, exact, epsilon = 1e-10);
    }

    #[test]
    fn empty_selection_gives_zero_estimator() {
        let spec = isotropic(2.0, 0.1);
        let policy = SelectionPolicy::indicator(PolicyKind::LargeMargin { kappa: f64::INFINITY }).unwrap();
        let (_, l1) = crate::losses::make_pruning_losses(
            MarginLoss::Square,
            MarginLoss::Square,
            Arc::new(SignLink),
            policy,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = generate_dataset(&spec, 10, &mut rng).unwrap();
        let fit0 = fit_stage0(&data, spec.loss0.as_ref(), 0.1, &FitConfig::default()).unwrap();
        let fit1 = fit_stage1(&data, &fit0.w, l1.as_ref(), 0.1, &FitConfig::default()).unwrap();
        assert_eq!(fit1.w.norm(), 0.0);
    }

    #[test]
    fn identical_objective_gives_identical_estimator() {
        let spec = gmm();
        let spec = ProblemSpec {
            noise: NoiseModel::identity(),
            ..spec
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = generate_dataset(&spec, 30, &mut rng).unwrap();
        let cfg = FitConfig::default();
        let fit0 = fit_stage0(&data, spec.loss0.as_ref(), spec.lambda0, &cfg).unwrap();
        let fit1 = fit_stage1(&data, &fit0.w, spec.loss1.as_ref(), spec.lambda, &cfg).unwrap();
        assert!((&fit0.w - &fit1.w).norm() < 1e-8);
    }

    #[test]
    fn backends_agree() {
        let spec = gmm();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data = generate_dataset(&spec, 60, &mut rng).unwrap();
        let fit = |backend| {
            let cfg = FitConfig {
                backend,
                max_iter: 100_000,
                ..Default::default()
            };
            fit_stage0(&data, spec.loss0.as_ref(), spec.lambda0, &cfg).unwrap()
        };
        let newton = fit(Backend::Newton);
        let cg = fit(Backend::NewtonCg);
        let gd = fit(Backend::GradientDescent);
        assert!(newton.converged && cg.converged && gd.converged);
        assert!((&newton.w - &cg.w).norm() < 1e-6);
        assert!((&newton.w - &gd.w).norm() < 1e-6);
    }

    #[test]
    fn overlaps_identities() {
        let spec = gmm();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = generate_dataset(&spec, 12, &mut rng).unwrap();
        let w0 = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let o = measure_overlaps(&w0, &data.beta, &data);
        assert_relative_eq!(o.theta, 1.0, epsilon = 1e-12);
        let o = measure_overlaps(&w0, &w0, &data);
        assert_relative_eq!(o.t, o.q0, epsilon = 1e-12);
        let w = DVector::from_fn(12, |i, _| (i as f64 * 1.3).cos());
        let o = measure_overlaps(&w0, &w, &data);
        assert!(o.t * o.t <= o.q * o.q0 + 1e-10);
    }

    #[test]
    fn test_error_limits_and_closed_form() {
        let spec = isotropic(2.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = generate_dataset(&spec, 5, &mut rng).unwrap();
        let perfect = empirical_test_error(&data.beta, &data, &spec, 2000, &mut rng);
        assert_eq!(perfect.value, 0.0);
        let orth = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0]);
        let e = empirical_test_error(&orth, &data, &spec, 20_000, &mut rng);
        assert!((e.value - 0.5).abs() < 3.0 * e.se);
        let w = DVector::from_vec(vec![0.6, 0.8, 0.0, 0.0, 0.0]);
        let e = empirical_test_error(&w, &data, &spec, 20_000, &mut rng);
        let exact = 0.6f64.acos() / std::f64::consts::PI;
        assert!((e.value - exact).abs() < 3.0 * e.se);
    }

    #[test]
    fn zero_loss_trials() {
        let (l0, l1) = make_zero_pair();
        let spec = isotropic(2.0, 0.1).with_losses(l0, l1.clone());
        let pipe = PipelineConfig {
            stage1: Stage1Source::Fixed(l1),
            fit: FitConfig::default(),
            n_test: 100,
            seed: 9,
            selection_scale: 1.0,
        };
        let summary = run_trials(&spec, 10, 2, &pipe).unwrap();
        assert_eq!(summary.seeds_ok, 2);
        // sign(0) = +1 predicts the positive class everywhere.
        assert!((summary.test_error.mean - 0.5).abs() < 0.2);
        assert!(summary
            .records
            .iter()
            .all(|r| r.stage0_iterations == 0 && r.stage1_iterations == 0));
        assert!(run_trials(&spec, 10, 1, &pipe).is_err());
    }

    #[test]
    fn failures_are_recorded_not_dropped() {
        let spec = isotropic(2.0, 0.1);
        let pipe = PipelineConfig {
            stage1: Stage1Source::FromBase(Arc::new(|_, _| Err("refused".to_string()))),
            fit: FitConfig::default(),
            n_test: 100,
            seed: 10,
            selection_scale: 1.0,
        };
        let summary = run_trials(&spec, 10, 3, &pipe).unwrap();
        assert_eq!(summary.records.len(), 3);
        assert_eq!(summary.seeds_ok, 0);
        assert!(summary
            .records
            .iter()
            .all(|r| r.failure.as_deref().unwrap().contains("refused")));
    }

    #[test]
    fn trials_are_reproducible() {
        let spec = gmm();
        let pipe = PipelineConfig {
            stage1: Stage1Source::Fixed(spec.loss1.clone()),
            fit: FitConfig::default(),
            n_test: 500,
            seed: 11,
            selection_scale: 1.0,
        };
        let a = run_trials(&spec, 20, 3, &pipe).unwrap();
        let b = run_trials(&spec, 20, 3, &pipe).unwrap();
        assert_eq!(a, b);
    }
}
