//! Monte-Carlo nodes and deterministic reductions.
//!
//! Expectations are stratified over the finite support of `(c, ε)`: each
//! stratum carries its exact probability and its own block of standard normal
//! draws, so rare classes are integrated as accurately as common ones.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ProblemSpec, SeError};

/// Units per reduction chunk; fixes the summation tree independently of the
/// number of worker threads.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Plain,
    /// Nodes come in pairs `(z, -z)`.
    Antithetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Nodes per stratum.
    pub nodes: usize,
    pub seed: u64,
    pub estimator: Estimator,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            nodes: 200_000,
            seed: 0,
            estimator: Estimator::Antithetic,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), SeError> {
        if self.nodes < 1000 {
            return Err(SeError::InvalidConfig(format!(
                "at least 1000 integration nodes are required, got {}",
                self.nodes
            )));
        }
        Ok(())
    }
}

/// One atom `(c, ε)` of the discrete latent law with its Gaussian draws.
#[derive(Debug, Clone)]
pub struct Stratum {
    pub class: usize,
    pub noise: f64,
    pub weight: f64,
    /// Row-major `nodes × dim` standard normals in sampling order.
    pub z: Vec<f64>,
}

impl Stratum {
    #[inline]
    pub fn node(&self, dim: usize, i: usize) -> &[f64] {
        &self.z[i * dim..(i + 1) * dim]
    }
}

#[derive(Debug, Clone)]
pub struct NodeSet {
    pub dim: usize,
    pub nodes: usize,
    pub antithetic: bool,
    pub strata: Vec<Stratum>,
}

/// Mean of several kernels together with the covariance of that mean.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl Estimate {
    pub fn se(&self, k: usize) -> f64 {
        self.cov[(k, k)].max(0.0).sqrt()
    }

    /// Standard error of `Σ_k coef_k · mean_k`.
    pub fn se_of(&self, coef: &[f64]) -> f64 {
        let mut var = 0.0;
        for (i, &ci) in coef.iter().enumerate() {
            for (j, &cj) in coef.iter().enumerate() {
                var += ci * cj * self.cov[(i, j)];
            }
        }
        var.max(0.0).sqrt()
    }
}

/// Running moments of a block of units (Chan et al. merge).
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: DMatrix<f64>,
}

impl Moments {
    fn new(k: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; k],
            m2: DMatrix::zeros(k, k),
        }
    }

    fn push(&mut self, x: &[f64], delta: &mut [f64]) {
        self.n += 1.0;
        let k = x.len();
        for j in 0..k {
            delta[j] = x[j] - self.mean[j];
            self.mean[j] += delta[j] / self.n;
        }
        for i in 0..k {
            let after = x[i] - self.mean[i];
            for j in 0..k {
                self.m2[(i, j)] += delta[j] * after;
            }
        }
    }

    fn merge(mut self, other: &Moments) -> Self {
        if other.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return other.clone();
        }
        let n = self.n + other.n;
        let k = self.mean.len();
        let delta: Vec<f64> = (0..k).map(|j| other.mean[j] - self.mean[j]).collect();
        for i in 0..k {
            for j in 0..k {
                self.m2[(i, j)] += other.m2[(i, j)] + delta[i] * delta[j] * self.n * other.n / n;
            }
        }
        for j in 0..k {
            self.mean[j] += delta[j] * other.n / n;
        }
        self.n = n;
        self
    }
}

impl NodeSet {
    /// Draws the nodes for every stratum of `spec`'s discrete latent law.
    /// Stratum `k` uses ChaCha stream `k` of the configured seed.
    pub fn generate(spec: &ProblemSpec, config: &IntegratorConfig) -> Result<Self, SeError> {
        config.validate()?;
        let dim = 3 + spec.n_classes();
        let antithetic = config.estimator == Estimator::Antithetic;
        let nodes = if antithetic {
            config.nodes + config.nodes % 2
        } else {
            config.nodes
        };
        let mut strata = Vec::new();
        for (class, &pc) in spec.class_probs.iter().enumerate() {
            for (noise, pe) in spec.noise.support() {
                let weight = pc * pe;
                if weight <= 0.0 {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(strata.len() as u64);
                let mut z = vec![0.0; nodes * dim];
                if antithetic {
                    for pair in z.chunks_mut(2 * dim) {
                        for j in 0..dim {
                            let v: f64 = StandardNormal.sample(&mut rng);
                            pair[j] = v;
                            pair[dim + j] = -v;
                        }
                    }
                } else {
                    for v in z.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
                strata.push(Stratum {
                    class,
                    noise,
                    weight,
                    z,
                });
            }
        }
        Ok(Self {
            dim,
            nodes,
            antithetic,
            strata,
        })
    }

    fn unit_size(&self) -> usize {
        if self.antithetic {
            2
        } else {
            1
        }
    }

    /// Applies `f(stratum, node)` to every node in parallel, preserving order.
    pub fn map_nodes<T, F>(&self, f: F) -> Vec<Vec<T>>
    where
        T: Send,
        F: Fn(usize, usize) -> T + Sync,
    {
        (0..self.strata.len())
            .map(|s| {
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    (0..self.nodes).into_par_iter().map(|i| f(s, i)).collect()
                }
                #[cfg(not(feature = "parallel"))]
                {
                    (0..self.nodes).map(|i| f(s, i)).collect()
                }
            })
            .collect()
    }

    /// Fallible variant of [`map_nodes`](Self::map_nodes); reports the first
    /// failure in node order.
    pub fn try_map_nodes<T, E, F>(&self, f: F) -> Result<Vec<Vec<T>>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize, usize) -> Result<T, E> + Sync,
    {
        self.map_nodes(f)
            .into_iter()
            .map(|v| v.into_iter().collect::<Result<Vec<T>, E>>())
            .collect()
    }

    /// Probability-weighted mean of `f` without error estimate.
    pub fn mean<F>(&self, f: F) -> f64
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        self.strata
            .iter()
            .enumerate()
            .map(|(s, st)| {
                let mut acc = 0.0;
                for i in 0..self.nodes {
                    acc += f(s, i);
                }
                st.weight * acc / self.nodes as f64
            })
            .sum()
    }

    /// Means of `k` kernels and the covariance of those means. Antithetic
    /// pairs are averaged into a single unit before the variance is taken.
    pub fn reduce<F>(&self, k: usize, f: F) -> Estimate
    where
        F: Fn(usize, usize, &mut [f64]) + Sync,
    {
        let unit = self.unit_size();
        let units = self.nodes / unit;
        let mut mean = vec![0.0; k];
        let mut cov = DMatrix::zeros(k, k);
        for (s, st) in self.strata.iter().enumerate() {
            let chunk_moments = |c: usize| {
                let mut m = Moments::new(k);
                let mut buf = vec![0.0; k];
                let mut val = vec![0.0; k];
                let mut delta = vec![0.0; k];
                for u in c * CHUNK..((c + 1) * CHUNK).min(units) {
                    val.iter_mut().for_each(|v| *v = 0.0);
                    for node in u * unit..(u + 1) * unit {
                        f(s, node, &mut buf);
                        for j in 0..k {
                            val[j] += buf[j];
                        }
                    }
                    for v in val.iter_mut() {
                        *v /= unit as f64;
                    }
                    m.push(&val, &mut delta);
                }
                m
            };
            let n_chunks = units.div_ceil(CHUNK);
            #[cfg(feature = "parallel")]
            let parts: Vec<Moments> = {
                use rayon::prelude::*;
                (0..n_chunks).into_par_iter().map(chunk_moments).collect()
            };
            #[cfg(not(feature = "parallel"))]
            let parts: Vec<Moments> = (0..n_chunks).map(chunk_moments).collect();
            let total = parts.iter().fold(Moments::new(k), |acc, p| acc.merge(p));
            let w = st.weight;
            for i in 0..k {
                mean[i] += w * total.mean[i];
            }
            if total.n > 1.0 {
                let scale = w * w / (total.n * (total.n - 1.0));
                cov += &total.m2 * scale;
            }
        }
        Estimate { mean, cov }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::make_zero_pair;
    use std::sync::Arc;

    fn spec(probs: Vec<f64>, noise: crate::losses::NoiseModel) -> ProblemSpec {
        let k = probs.len();
        let (l0, l1) = make_zero_pair();
        ProblemSpec {
            alpha: 1.0,
            lambda: 1.0,
            lambda0: 1.0,
            class_probs: probs,
            nu: vec![0.0; k],
            rho: DMatrix::zeros(k, k),
            varrho: 1.0,
            link: Arc::new(crate::losses::SignLink),
            noise,
            loss0: l0,
            loss1: l1,
        }
    }

    #[test]
    fn strata_cover_the_latent_law() {
        let s = spec(
            vec![0.25, 0.0, 0.75],
            crate::losses::NoiseModel::SignFlip { p: 0.1 },
        );
        let cfg = IntegratorConfig {
            nodes: 1000,
            ..Default::default()
        };
        let nodes = NodeSet::generate(&s, &cfg).unwrap();
        assert_eq!(nodes.strata.len(), 4);
        let total: f64 = nodes.strata.iter().map(|st| st.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
        assert!(nodes.strata.iter().all(|st| st.class != 1));
    }

    #[test]
    fn too_few_nodes_is_rejected() {
        let s = spec(vec![1.0], Default::default());
        let cfg = IntegratorConfig {
            nodes: 10,
            ..Default::default()
        };
        assert!(NodeSet::generate(&s, &cfg).is_err());
    }

    #[test]
    fn antithetic_pairs_and_moments() {
        let s = spec(vec![1.0], Default::default());
        let cfg = IntegratorConfig {
            nodes: 40_000,
            seed: 11,
            estimator: Estimator::Antithetic,
        };
        let nodes = NodeSet::generate(&s, &cfg).unwrap();
        let st = &nodes.strata[0];
        assert_eq!(st.node(nodes.dim, 0)[2], -st.node(nodes.dim, 1)[2]);
        // Odd moments vanish exactly, even ones are estimated with error bars.
        let est = nodes.reduce(2, |s, i, out| {
            let z = nodes.strata[s].node(nodes.dim, i)[0];
            out[0] = z;
            out[1] = z * z;
        });
        assert!(est.mean[0].abs() < 1e-15);
        assert_eq!(est.se(0), 0.0);
        assert!((est.mean[1] - 1.0).abs() < 4.0 * est.se(1));
        let expected_se = (2.0f64 / 20_000.0).sqrt();
        assert!((est.se(1) / expected_se - 1.0).abs() < 0.1);
    }

    #[test]
    fn generation_is_reproducible() {
        let s = spec(vec![0.5, 0.5], Default::default());
        let cfg = IntegratorConfig {
            nodes: 2000,
            seed: 5,
            estimator: Estimator::Plain,
        };
        let a = NodeSet::generate(&s, &cfg).unwrap();
        let b = NodeSet::generate(&s, &cfg).unwrap();
        assert_eq!(a.strata[1].z, b.strata[1].z);
        assert_ne!(a.strata[0].z, a.strata[1].z);
    }
}
