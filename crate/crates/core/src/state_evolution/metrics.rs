use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::integrator::{Estimate, IntegratorConfig, NodeSet};
use super::law::GaussianLaw;
use super::{ProblemSpec, SeError, Stage1Params};

/// Generalisation error with a flag for the degenerate estimator `ŵ = 0`,
/// whose predictions carry no information. The error is then reported as
/// chance level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestError {
    pub value: f64,
    pub degenerate: bool,
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// `arccos(θ / √(q ϱ)) / π`: the probability that `sign⟨ŵ, x⟩` disagrees
/// with `sign⟨β, x⟩` for isotropic Gaussian `x`.
pub fn test_error_binary(p1: &Stage1Params, varrho: f64) -> TestError {
    if !(p1.q > 0.0) {
        return TestError {
            value: 0.5,
            degenerate: true,
        };
    }
    let cos = (p1.theta / (p1.q * varrho).sqrt()).clamp(-1.0, 1.0);
    TestError {
        value: cos.acos() / std::f64::consts::PI,
        degenerate: false,
    }
}

/// `Σ_c p_c Φ(-y_c m_c / √q)`: misclassification probability of a clean
/// label `y_c` for a fresh sample of cluster `c`, when the prediction is
/// `sign⟨ŵ, x⟩` and `x ~ N(μ_c, I)`.
pub fn test_error_clusters(spec: &ProblemSpec, p1: &Stage1Params) -> TestError {
    if !(p1.q > 0.0) {
        return TestError {
            value: 0.5,
            degenerate: true,
        };
    }
    let sq = p1.q.sqrt();
    let value = spec
        .class_probs
        .iter()
        .enumerate()
        .map(|(c, &pc)| {
            let y = spec.link.eval(0.0, c, 1.0);
            pc * std_normal_cdf(-y * p1.m[c] / sq)
        })
        .sum();
    TestError {
        value,
        degenerate: false,
    }
}

/// `E[metric(g, c, ε)]` under `law`, by Monte Carlo on fresh nodes.
pub fn eval_test_metric<F>(
    spec: &ProblemSpec,
    law: &GaussianLaw,
    metric: F,
    integrator: &IntegratorConfig,
) -> Result<Estimate, SeError>
where
    F: Fn(&[f64], usize, f64) -> f64 + Sync,
{
    let nodes = NodeSet::generate(spec, integrator)?;
    Ok(nodes.reduce(1, |s, i, out| {
        let st = &nodes.strata[s];
        let g = law.sample(st.class, st.node(nodes.dim, i));
        out[0] = metric(g.as_slice(), st.class, st.noise);
    }))
}
