use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::integrator::{IntegratorConfig, NodeSet};
use super::law::{build_gaussian_law, GaussianLaw, G1, G2, G3, GC};
use super::{ProblemSpec, SeError, Stage0Params, Stage1Params};
use crate::losses::{Latent, SharedStage1};
use crate::prox::{prox1d, Stage0Slice, Stage1Slice};

/// Relative step of the finite-difference Jacobian.
const FD_STEP: f64 = 1e-6;
const LINE_SEARCH_HALVINGS: usize = 30;
const PRESOLVE_ROUNDS: usize = 5;
/// Clipped mass, relative to the variances, beyond which a second-stage
/// point counts as infeasible.
const DOMAIN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `x ← (1 - η) x + η F(x)`. Cheap per step, but diverges once the
    /// update map expands faster than `2/η - 1`, which happens at small ridge.
    Damped,
    /// Newton on `F(x) - x` with a finite-difference Jacobian; falls back on
    /// a damped step when the line search fails.
    #[default]
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub scheme: Scheme,
    /// Weight `η` of the new iterate in `x ← (1 - η) x + η F(x)`.
    pub damping: f64,
    /// Stop once `max |F(x) - x| < tol`.
    pub tol: f64,
    /// Iteration cap, per stage.
    pub max_iter: usize,
    /// Accept exact indicator policies by taking their `u`-derivatives to be
    /// zero (which removes their contribution to `χ`).
    pub zero_derivative_indicators: bool,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Newton,
            damping: 0.5,
            tol: 1e-7,
            max_iter: 500,
            zero_derivative_indicators: false,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<(), SeError> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(SeError::InvalidConfig(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SeError::InvalidConfig(format!("tolerance {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(SeError::InvalidConfig("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub iterations: usize,
    /// `max |F(x) - x|` at the returned point.
    pub residual: f64,
    pub converged: bool,
    /// Mass removed when projecting `Φ` at the returned point.
    pub clipped_mass: f64,
}

/// Right-hand sides of the first-stage equations and their Monte-Carlo
/// standard errors.
#[derive(Debug, Clone)]
pub struct Stage0Update {
    pub params: Stage0Params,
    pub se: Stage0Params,
    /// Covariance of the outputs, in the order of `Stage0Params::to_vec`.
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage1Update {
    pub params: Stage1Params,
    pub se: Stage1Params,
    /// Covariance of the outputs, in the order of `Stage1Params::to_vec`.
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage0Outcome {
    pub params: Stage0Params,
    /// Monte-Carlo standard errors of the fixed point itself.
    pub se: Stage0Params,
    /// Covariance of `(θ₀, q₀, V₀, m₀…)`.
    pub cov: DMatrix<f64>,
    pub report: StageReport,
}

#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub params: Stage1Params,
    /// Monte-Carlo standard errors of the fixed point itself.
    pub se: Stage1Params,
    /// Covariance of `(θ, t, q, V, χ, m…)`.
    pub cov: DMatrix<f64>,
    pub report: StageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub stage0: StageReport,
    pub stage1: StageReport,
    pub stage0_se: Stage0Params,
    pub stage1_se: Stage1Params,
}

impl Diagnostics {
    pub fn converged(&self) -> bool {
        self.stage0.converged && self.stage1.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub stage0: Stage0Params,
    pub stage1: Stage1Params,
    pub diagnostics: Diagnostics,
}

/// First-stage quantities at every node, fixed once the first stage is solved.
#[derive(Debug, Clone)]
pub struct BaseState {
    pub p0: Stage0Params,
    law: GaussianLaw,
    /// Per stratum: `u = prox_{V₀ ℓ₀}(g₂)`.
    u: Vec<Vec<f64>>,
    /// Per stratum: `∂_u ℓ₀(u)`.
    d1: Vec<Vec<f64>>,
    /// Per stratum: `∂_u² ℓ₀(u)`.
    d2: Vec<Vec<f64>>,
}

/// Fixed-point solver over a fixed node set.
pub struct Solver {
    spec: ProblemSpec,
    nodes: NodeSet,
    config: FixedPointConfig,
}

#[inline]
fn row_dot(law: &GaussianLaw, row: usize, z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (j, &zj) in z.iter().enumerate() {
        acc += law.factor[(row, j)] * zj;
    }
    acc
}

impl Solver {
    pub fn new(
        spec: &ProblemSpec,
        config: FixedPointConfig,
        integrator: &IntegratorConfig,
    ) -> Result<Self, SeError> {
        spec.validate()?;
        config.validate()?;
        let nodes = NodeSet::generate(spec, integrator)?;
        Ok(Self {
            spec: spec.clone(),
            nodes,
            config,
        })
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    /// Replaces the second-stage loss, keeping the nodes. Used when that
    /// loss depends on the first-stage solution.
    pub fn set_stage1_loss(&mut self, loss1: SharedStage1) {
        self.spec.loss1 = loss1;
    }

    /// `g₃` and the first-stage residual variable at one node.
    fn g3(&self, law: &GaussianLaw, s: usize, i: usize) -> f64 {
        let st = &self.nodes.strata[s];
        let z = st.node(self.nodes.dim, i);
        law.means[st.class][G3] + row_dot(law, G3, z)
    }

    fn gc(&self, law: &GaussianLaw, s: usize, i: usize, c: usize) -> f64 {
        let st = &self.nodes.strata[s];
        let z = st.node(self.nodes.dim, i);
        law.means[st.class][GC + c] + row_dot(law, GC + c, z)
    }

    fn latent(&self, law: &GaussianLaw, s: usize, i: usize) -> Latent {
        let st = &self.nodes.strata[s];
        Latent::new(self.g3(law, s, i), st.class, st.noise)
    }

    /// Solves `α λ V + α E[V h / (1 + V h)] = 1` for `V ∈ (0, 1/(αλ)]`. The
    /// left side is increasing and concave in `V`, so Newton steps started
    /// at 0 increase monotonically towards the root; bisection guards them.
    fn solve_aux(&self, h: &[Vec<f64>], lambda: f64, which: &'static str) -> Result<f64, SeError> {
        let alpha = self.spec.alpha;
        let upper = 1.0 / (alpha * lambda);
        let eval = |v: f64| {
            let f = alpha * lambda * v
                + alpha
                    * self.nodes.mean(|s, i| {
                        let x = v * h[s][i];
                        x / (1.0 + x)
                    })
                - 1.0;
            let fp = alpha * lambda
                + alpha
                    * self.nodes.mean(|s, i| {
                        let d = 1.0 + v * h[s][i];
                        h[s][i] / (d * d)
                    });
            (f, fp)
        };
        let (mut lo, mut hi) = (0.0, upper);
        let mut v = 0.0;
        for _ in 0..200 {
            let (f, fp) = eval(v);
            if !f.is_finite() {
                return Err(SeError::RootSolve { which, upper });
            }
            if f.abs() <= 1e-15 {
                return Ok(v);
            }
            if f < 0.0 {
                lo = v;
            } else {
                hi = v;
            }
            let mut next = v - f / fp;
            if !(next > lo && next <= hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - v).abs() <= 1e-15 * next.abs() {
                return Ok(next);
            }
            v = next;
        }
        if hi - lo <= 1e-12 * hi {
            Ok(v)
        } else {
            Err(SeError::RootSolve { which, upper })
        }
    }

    /// `∂/∂V` of the left side of the auxiliary equation.
    fn aux_slope(&self, h: &[Vec<f64>], lambda: f64, v: f64) -> f64 {
        let alpha = self.spec.alpha;
        alpha * lambda
            + alpha
                * self.nodes.mean(|s, i| {
                    let d = 1.0 + v * h[s][i];
                    h[s][i] / (d * d)
                })
    }

    /// First-stage quantities at every node for the law implied by `p0`.
    pub fn base_state(&self, p0: &Stage0Params) -> Result<BaseState, SeError> {
        if !(p0.v0 > 0.0) {
            return Err(SeError::InvalidConfig(format!(
                "V0 must be positive, got {}",
                p0.v0
            )));
        }
        let law = build_gaussian_law(&self.spec, p0, &Stage1Params::mirror(p0))?;
        let loss = self.spec.loss0.as_ref();
        let rows = self.nodes.try_map_nodes(|s, i| {
            let st = &self.nodes.strata[s];
            let z = st.node(self.nodes.dim, i);
            let g2 = law.means[st.class][G2] + row_dot(&law, G2, z);
            let latent = self.latent(&law, s, i);
            let slice = Stage0Slice { loss, latent };
            let u = prox1d(&slice, p0.v0, g2)?;
            Ok::<_, SeError>((u, loss.d1(u, &latent), loss.d2(u, &latent)))
        })?;
        let mut state = BaseState {
            p0: p0.clone(),
            law,
            u: Vec::with_capacity(rows.len()),
            d1: Vec::with_capacity(rows.len()),
            d2: Vec::with_capacity(rows.len()),
        };
        for r in rows {
            state.u.push(r.iter().map(|x| x.0).collect());
            state.d1.push(r.iter().map(|x| x.1).collect());
            state.d2.push(r.iter().map(|x| x.2).collect());
        }
        Ok(state)
    }

    /// One evaluation of the first-stage right-hand sides at `p0`.
    pub fn stage0_update(&self, p0: &Stage0Params) -> Result<Stage0Update, SeError> {
        let base = self.base_state(p0)?;
        Ok(self.stage0_update_from(&base))
    }

    fn stage0_update_from(&self, base: &BaseState) -> Stage0Update {
        let k = self.spec.n_classes();
        let (alpha, lambda0) = (self.spec.alpha, self.spec.lambda0);
        let law = &base.law;
        // The V0 solve cannot fail for finite curvatures; keep the current
        // value if it does.
        let v0 = self.solve_aux(&base.d2, lambda0, "V0").unwrap_or(base.p0.v0);
        let est = self.nodes.reduce(3 + k, |s, i, out| {
            let d1 = base.d1[s][i];
            let x = v0 * base.d2[s][i];
            out[0] = d1 * self.g3(law, s, i);
            out[1] = d1 * base.u[s][i];
            out[2] = x / (1.0 + x);
            for c in 0..k {
                out[3 + c] = d1 * self.gc(law, s, i, c);
            }
        });
        let params = Stage0Params {
            theta0: neg_ratio(est.mean[0], lambda0),
            q0: neg_ratio(est.mean[1], lambda0),
            v0,
            m0: (0..k).map(|c| neg_ratio(est.mean[3 + c], lambda0)).collect(),
        };
        // Outputs are linear in the kernel means, except V0, which moves
        // along the implicit function of its equation.
        let mut grad = DMatrix::zeros(3 + k, 3 + k);
        grad[(0, 0)] = -1.0 / lambda0;
        grad[(1, 1)] = -1.0 / lambda0;
        grad[(2, 2)] = -alpha / self.aux_slope(&base.d2, lambda0, v0);
        for c in 0..k {
            grad[(3 + c, 3 + c)] = -1.0 / lambda0;
        }
        let cov = &grad * &est.cov * grad.transpose();
        let se = Stage0Params::from_slice(&diag_sqrt(&cov));
        Stage0Update { params, se, cov }
    }

    /// One evaluation of the second-stage right-hand sides at `p1`, with the
    /// first stage frozen at `base`.
    pub fn stage1_update(&self, base: &BaseState, p1: &Stage1Params) -> Result<Stage1Update, SeError> {
        if !(p1.v > 0.0) {
            return Err(SeError::InvalidConfig(format!(
                "V must be positive, got {}",
                p1.v
            )));
        }
        let spec = &self.spec;
        let k = spec.n_classes();
        let (lambda, lambda0, alpha) = (spec.lambda, spec.lambda0, spec.alpha);
        let v0 = base.p0.v0;
        let v = p1.v;
        let law = build_gaussian_law(spec, &base.p0, p1)?;
        let loss = spec.loss1.as_ref();

        let rows = self.nodes.try_map_nodes(|s, i| {
            let st = &self.nodes.strata[s];
            let z = st.node(self.nodes.dim, i);
            let g1 = law.means[st.class][G1] + row_dot(&law, G1, z);
            let u = base.u[s][i];
            let latent = self.latent(&law, s, i);
            let slice = Stage1Slice { loss, u, latent };
            let r = prox1d(&slice, v, g1 + p1.chi * base.d1[s][i])?;
            Ok::<_, SeError>([
                r,
                loss.dr(r, u, &latent),
                loss.drr(r, u, &latent),
                loss.dru(r, u, &latent),
            ])
        })?;
        let h: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x[2]).collect()).collect();
        let v_new = self.solve_aux(&h, lambda, "V").unwrap_or(v);

        // Kernels, in output order: dr·g3, dr·u, dr·r, the V kernel, then
        // dr·g_c…, then the four χ kernels.
        let nk = 4 + k + 4;
        let est = self.nodes.reduce(nk, |s, i, out| {
            let [r, dr, drr, dru] = rows[s][i];
            let u = base.u[s][i];
            let h0 = base.d2[s][i];
            out[0] = dr * self.g3(&law, s, i);
            out[1] = dr * u;
            out[2] = dr * r;
            let x = v_new * drr;
            out[3] = x / (1.0 + x);
            for c in 0..k {
                out[4 + c] = dr * self.gc(&law, s, i, c);
            }
            let a0 = 1.0 + v0 * h0;
            let a1 = 1.0 + v * drr;
            out[4 + k] = dru / a0;
            out[5 + k] = h0 / a0;
            out[6 + k] = drr * dru * v0 * v / (a1 * a0);
            out[7 + k] = drr / (a1 * a0);
        });

        let (ka, kb, kc, ke) = (est.mean[4 + k], est.mean[5 + k], est.mean[6 + k], est.mean[7 + k]);
        let lead = ka / (alpha * (lambda0 + kb));
        let chi = (lead - kc) / (lambda + ke);

        let params = Stage1Params {
            theta: neg_ratio(est.mean[0], lambda),
            t: neg_ratio(est.mean[1], lambda),
            q: neg_ratio(est.mean[2], lambda),
            v: v_new,
            chi,
            m: (0..k).map(|c| neg_ratio(est.mean[4 + c], lambda)).collect(),
        };

        // Rows follow `Stage1Params::to_vec`: θ, t, q, V, χ, m….
        let mut grad = DMatrix::zeros(5 + k, nk);
        grad[(0, 0)] = -1.0 / lambda;
        grad[(1, 1)] = -1.0 / lambda;
        grad[(2, 2)] = -1.0 / lambda;
        grad[(3, 3)] = -alpha / self.aux_slope(&h, lambda, v_new);
        let denom = lambda + ke;
        grad[(4, 4 + k)] = 1.0 / (alpha * (lambda0 + kb) * denom);
        grad[(4, 5 + k)] = -lead / ((lambda0 + kb) * denom);
        grad[(4, 6 + k)] = -1.0 / denom;
        grad[(4, 7 + k)] = -chi / denom;
        for c in 0..k {
            grad[(5 + c, 4 + c)] = -1.0 / lambda;
        }
        let cov = &grad * &est.cov * grad.transpose();
        let se = Stage1Params::from_slice(&diag_sqrt(&cov));
        Ok(Stage1Update { params, se, cov })
    }

    pub fn solve_stage0(&self) -> Result<Stage0Outcome, SeError> {
        self.solve_stage0_from(Stage0Params::initial(&self.spec))
    }

    pub fn solve_stage0_from(&self, init: Stage0Params) -> Result<Stage0Outcome, SeError> {
        let map = |x: &[f64]| -> Result<Vec<f64>, SeError> {
            let upd = self.stage0_update(&Stage0Params::from_slice(x))?;
            if !upd.params.is_finite() {
                return Err(SeError::NonFinite(format!("stage-0 update {:?}", upd.params)));
            }
            Ok(upd.params.to_vec())
        };
        let run = self.drive(init.to_vec(), &map, &[2], &[])?;
        let params = Stage0Params::from_slice(&run.x);
        let base = self.base_state(&params)?;
        let upd = self.stage0_update_from(&base);
        let cov =
            fixed_point_cov(&run.x, &upd.params.to_vec(), &upd.cov, &map).unwrap_or_else(|| upd.cov.clone());
        let se = Stage0Params::from_slice(&diag_sqrt(&cov));
        Ok(Stage0Outcome {
            params,
            se,
            cov,
            report: StageReport {
                iterations: run.iterations,
                residual: run.residual,
                converged: run.converged,
                clipped_mass: base.law.clipped_mass,
            },
        })
    }

    fn check_indicator(&self) -> Result<(), SeError> {
        if self.spec.loss1.has_indicator() && !self.config.zero_derivative_indicators {
            return Err(SeError::IndicatorPolicy);
        }
        Ok(())
    }

    /// Stage-1 right-hand side at `x` for the base estimator `p0`.
    fn stage1_map(&self, p0: &Stage0Params, base: &BaseState, x: &[f64]) -> Result<Vec<f64>, SeError> {
        let p1 = Stage1Params::from_slice(x);
        // Points whose covariance needs real projection are outside the
        // domain of the equations; this keeps Newton steps inside it.
        let law = build_gaussian_law(&self.spec, p0, &p1)?;
        if law.clipped_mass > DOMAIN_TOL * p0.q0.max(p1.q.abs()) {
            return Err(SeError::NonFinite(format!(
                "covariance outside the PSD cone by {}",
                law.clipped_mass
            )));
        }
        let upd = self.stage1_update(base, &p1)?;
        if !upd.params.is_finite() {
            return Err(SeError::NonFinite(format!("stage-1 update {:?}", upd.params)));
        }
        Ok(upd.params.to_vec())
    }

    /// Adds the Monte-Carlo error of the first stage to that of the second.
    ///
    /// At the mirror point the second stage is a relabelling of the first
    /// and inherits its covariance exactly. Elsewhere the sensitivity
    /// `-(∂G/∂x)⁻¹ ∂F/∂p₀` carries `cov₀` over and the two contributions are
    /// added as if independent, which errs on the large side. The stage-1
    /// covariance is left alone when the sensitivity cannot be formed.
    pub fn propagate_stage0(&self, s0: &Stage0Outcome, s1: &mut Stage1Outcome) {
        let p0 = &s0.params;
        let x1 = s1.params.to_vec();
        let k = p0.m0.len();
        let mirror = Stage1Params::mirror(p0).to_vec();
        if x1 == mirror {
            let mut m = DMatrix::zeros(5 + k, 3 + k);
            m[(0, 0)] = 1.0;
            m[(1, 1)] = 1.0;
            m[(2, 1)] = 1.0;
            m[(3, 2)] = 1.0;
            for c in 0..k {
                m[(5 + c, 3 + c)] = 1.0;
            }
            s1.cov = &m * &s0.cov * m.transpose();
            s1.se = Stage1Params::from_slice(&diag_sqrt(&s1.cov));
            return;
        }
        if let Some(j) = self.stage1_sensitivity(p0, &x1) {
            let add = &j * &s0.cov * j.transpose();
            if add.iter().all(|v| v.is_finite()) {
                s1.cov += add;
                s1.se = Stage1Params::from_slice(&diag_sqrt(&s1.cov));
            }
        }
    }

    fn stage1_sensitivity(&self, p0: &Stage0Params, x1: &[f64]) -> Option<DMatrix<f64>> {
        let base = self.base_state(p0).ok()?;
        let f = self.stage1_map(p0, &base, x1).ok()?;
        let g: Vec<f64> = f.iter().zip(x1).map(|(f, x)| f - x).collect();
        let jx = fd_jacobian(x1, &g, &|x: &[f64]| self.stage1_map(p0, &base, x))?;
        let v0 = p0.to_vec();
        let mut jp = DMatrix::zeros(x1.len(), v0.len());
        for j in 0..v0.len() {
            let h = FD_STEP * v0[j].abs().max(1.0);
            let mut probe = v0.clone();
            probe[j] += h;
            let q = Stage0Params::from_slice(&probe);
            let fp = self
                .base_state(&q)
                .and_then(|b| self.stage1_map(&q, &b, x1))
                .ok()?;
            for i in 0..x1.len() {
                jp[(i, j)] = (fp[i] - f[i]) / h;
            }
        }
        Some(-jx.try_inverse()? * jp)
    }

    pub fn solve_stage1(&self, p0: &Stage0Params) -> Result<Stage1Outcome, SeError> {
        self.solve_stage1_from(p0, Stage1Params::initial(&self.spec, p0))
    }

    pub fn solve_stage1_from(&self, p0: &Stage0Params, init: Stage1Params) -> Result<Stage1Outcome, SeError> {
        self.check_indicator()?;
        let base = self.base_state(p0)?;
        let map = |x: &[f64]| self.stage1_map(p0, &base, x);
        // χ is an explicit function of the current samples; the damped
        // scheme takes it as is rather than relaxing it.
        // A second stage that reproduces the first (equal losses and ridges,
        // unit weights) is solved by the mirror point, a corner of the domain
        // that the iteration cannot reach from inside.
        let mirror = Stage1Params::mirror(p0).to_vec();
        let mirror_residual = map(&mirror).ok().map(|f| max_abs_diff(&f, &mirror));
        let run = match mirror_residual {
            Some(r) if r < self.config.tol => Run {
                x: mirror,
                residual: r,
                iterations: 1,
                converged: true,
            },
            _ => self.drive(init.to_vec(), &map, &[3, 4], &[4])?,
        };
        let params = Stage1Params::from_slice(&run.x);
        let upd = self.stage1_update(&base, &params)?;
        let cov =
            fixed_point_cov(&run.x, &upd.params.to_vec(), &upd.cov, &map).unwrap_or_else(|| upd.cov.clone());
        let se = Stage1Params::from_slice(&diag_sqrt(&cov));
        let clipped_mass = build_gaussian_law(&self.spec, p0, &params)?.clipped_mass;
        Ok(Stage1Outcome {
            params,
            se,
            cov,
            report: StageReport {
                iterations: run.iterations,
                residual: run.residual,
                converged: run.converged,
                clipped_mass,
            },
        })
    }

    /// Finds `x = F(x)`. Components in `presolve` are substituted directly a
    /// few times before the main iteration; the damped scheme does not relax
    /// those in `undamped`. Returns the iterate with the smallest residual
    /// when the iteration budget runs out.
    fn drive<M>(&self, x0: Vec<f64>, map: &M, presolve: &[usize], undamped: &[usize]) -> Result<Run, SeError>
    where
        M: Fn(&[f64]) -> Result<Vec<f64>, SeError>,
    {
        let cfg = &self.config;
        let eta = cfg.damping;
        let mut x = x0;
        let mut fx = map(&x)?;
        // Explicitly solved components (the auxiliary roots and χ) are first
        // substituted directly; starting far from them stalls the search.
        for _ in 0..PRESOLVE_ROUNDS {
            let mut trial = x.clone();
            for &j in presolve {
                trial[j] = fx[j];
            }
            let shift = max_abs_diff(&trial, &x);
            match map(&trial) {
                Ok(f) => {
                    x = trial;
                    fx = f;
                }
                Err(_) => break,
            }
            if shift < cfg.tol {
                break;
            }
        }
        let mut jac: Option<DMatrix<f64>> = None;
        let mut best = Run {
            x: x.clone(),
            residual: f64::INFINITY,
            iterations: cfg.max_iter,
            converged: false,
        };
        for it in 1..=cfg.max_iter {
            let g: Vec<f64> = fx.iter().zip(&x).map(|(f, x)| f - x).collect();
            let residual = g.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            if residual < best.residual {
                best.x = x.clone();
                best.residual = residual;
            }
            if residual < cfg.tol {
                // One direct substitution, kept if it does not lose accuracy;
                // at a contraction it removes the Newton rounding left in x.
                if let Ok(ffx) = map(&fx) {
                    let r = ffx
                        .iter()
                        .zip(&fx)
                        .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
                    if r <= residual {
                        return Ok(Run {
                            x: fx,
                            residual: r,
                            iterations: it,
                            converged: true,
                        });
                    }
                }
                return Ok(Run {
                    x,
                    residual,
                    iterations: it,
                    converged: true,
                });
            }
            let newton = match cfg.scheme {
                Scheme::Newton => {
                    // Broyden updates between fresh finite-difference
                    // Jacobians; a failed search with a stale Jacobian is
                    // retried once with a fresh one.
                    let mut found = None;
                    let mut fresh = jac.is_none();
                    if fresh {
                        jac = fd_jacobian(&x, &g, map);
                    }
                    loop {
                        if let Some(j) = &jac {
                            found = line_search(&x, &g, j, map);
                        }
                        if found.is_some() || fresh {
                            break;
                        }
                        jac = fd_jacobian(&x, &g, map);
                        fresh = true;
                    }
                    match (&found, jac.as_mut()) {
                        (Some((xn, fxn)), Some(j)) => {
                            let dx = DVector::from_iterator(x.len(), xn.iter().zip(&x).map(|(a, b)| a - b));
                            let dg = DVector::from_iterator(
                                x.len(),
                                (0..x.len()).map(|i| (fxn[i] - xn[i]) - g[i]),
                            );
                            let denom = dx.norm_squared();
                            if denom > 0.0 {
                                let corr = (dg - &*j * &dx) / denom;
                                *j += corr * dx.transpose();
                            }
                        }
                        _ => jac = None,
                    }
                    found
                }
                Scheme::Damped => None,
            };
            match newton {
                Some((xn, fxn)) => {
                    x = xn;
                    fx = fxn;
                }
                None => {
                    // Damped step, shortened while it leaves the domain.
                    let mut w = eta;
                    let mut last_err = None;
                    for _ in 0..LINE_SEARCH_HALVINGS {
                        let trial: Vec<f64> = x
                            .iter()
                            .enumerate()
                            .map(|(j, &xj)| {
                                if undamped.contains(&j) && w == eta {
                                    fx[j]
                                } else {
                                    (1.0 - w) * xj + w * fx[j]
                                }
                            })
                            .collect();
                        match map(&trial) {
                            Ok(f) => {
                                x = trial;
                                fx = f;
                                last_err = None;
                                break;
                            }
                            Err(e) => last_err = Some(e),
                        }
                        w *= 0.5;
                    }
                    // Every step leaves the domain: report the best iterate
                    // as unconverged.
                    if last_err.is_some() {
                        return Ok(best);
                    }
                }
            }
        }
        Ok(best)
    }

    /// Both stages in sequence.
    pub fn solve(&self) -> Result<Solution, SeError> {
        self.check_indicator()?;
        let s0 = self.solve_stage0()?;
        let mut s1 = self.solve_stage1(&s0.params)?;
        self.propagate_stage0(&s0, &mut s1);
        Ok(Solution {
            stage0: s0.params,
            stage1: s1.params,
            diagnostics: Diagnostics {
                stage0: s0.report,
                stage1: s1.report,
                stage0_se: s0.se,
                stage1_se: s1.se,
            },
        })
    }
}

struct Run {
    x: Vec<f64>,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Forward-difference Jacobian of `G(x) = F(x) - x`, stepping backwards
/// in a coordinate where the forward probe leaves the domain.
fn fd_jacobian<M>(x: &[f64], g: &[f64], map: &M) -> Option<DMatrix<f64>>
where
    M: Fn(&[f64]) -> Result<Vec<f64>, SeError>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = FD_STEP * x[j].abs().max(1.0);
        let mut probe = x.to_vec();
        probe[j] = x[j] + h;
        let (fp, h) = match map(&probe) {
            Ok(f) => (f, h),
            Err(_) => {
                probe[j] = x[j] - h;
                (map(&probe).ok()?, -h)
            }
        };
        for i in 0..n {
            jac[(i, j)] = ((fp[i] - probe[i]) - g[i]) / h;
        }
    }
    Some(jac)
}

/// `-x / l`, with a vanishing mean mapped to `+0`.
#[inline]
fn neg_ratio(x: f64, l: f64) -> f64 {
    0.0 - x / l
}

fn diag_sqrt(cov: &DMatrix<f64>) -> Vec<f64> {
    (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect()
}

/// Covariance of the fixed point `x* = F(x*)` when `F` carries noise of
/// covariance `cov`: to first order `δx* = -(∂G)⁻¹ δF` with `G = F - id`.
fn fixed_point_cov<M>(x: &[f64], fx: &[f64], cov: &DMatrix<f64>, map: &M) -> Option<DMatrix<f64>>
where
    M: Fn(&[f64]) -> Result<Vec<f64>, SeError>,
{
    let g: Vec<f64> = fx.iter().zip(x).map(|(f, x)| f - x).collect();
    let jac = fd_jacobian(x, &g, map)?;
    let inv = jac.try_inverse()?;
    let prop = &inv * cov * inv.transpose();
    prop.iter().all(|v| v.is_finite()).then_some(prop)
}

/// Newton step `-J⁻¹ G(x)` with a backtracking line search on `‖G‖`.
/// `None` when no step along it decreases the residual.
fn line_search<M>(x: &[f64], g: &[f64], jac: &DMatrix<f64>, map: &M) -> Option<(Vec<f64>, Vec<f64>)>
where
    M: Fn(&[f64]) -> Result<Vec<f64>, SeError>,
{
    let n = x.len();
    let delta = jac
        .clone()
        .lu()
        .solve(&DVector::from_iterator(n, g.iter().map(|v| -v)))?;
    if delta.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let g2 = sq_norm(g);
    let mut step = 1.0;
    for _ in 0..LINE_SEARCH_HALVINGS {
        let trial: Vec<f64> = x.iter().zip(delta.iter()).map(|(a, d)| a + step * d).collect();
        if let Ok(ft) = map(&trial) {
            let gt: Vec<f64> = ft.iter().zip(&trial).map(|(f, x)| f - x).collect();
            if sq_norm(&gt) < g2 {
                return Some((trial, ft));
            }
        }
        step *= 0.5;
    }
    None
}

/// Right-hand sides of the first-stage equations at `p0`.
pub fn stage0_update(
    spec: &ProblemSpec,
    p0: &Stage0Params,
    integrator: &IntegratorConfig,
) -> Result<Stage0Update, SeError> {
    Solver::new(spec, FixedPointConfig::default(), integrator)?.stage0_update(p0)
}

/// Right-hand sides of the second-stage equations at `p1`, given a solved
/// first stage `p0`.
pub fn stage1_update(
    spec: &ProblemSpec,
    p0: &Stage0Params,
    p1: &Stage1Params,
    integrator: &IntegratorConfig,
) -> Result<Stage1Update, SeError> {
    let solver = Solver::new(spec, FixedPointConfig::default(), integrator)?;
    let base = solver.base_state(p0)?;
    solver.stage1_update(&base, p1)
}

/// Solves both stages of `spec`.
pub fn solve(
    spec: &ProblemSpec,
    config: &FixedPointConfig,
    integrator: &IntegratorConfig,
) -> Result<Solution, SeError> {
    Solver::new(spec, *config, integrator)?.solve()
}
