use nalgebra::{DMatrix, DVector};

use super::{ProblemSpec, SeError, Stage0Params, Stage1Params};

/// Pivots below this (relative to the largest diagonal entry) are treated as
/// exact zeros of a semidefinite matrix.
const PIVOT_TOL: f64 = 1e-12;

/// Per-class law `N(Ψ_c, Φ)` of `g = (g₁, g₂, g₃, g_{c'}…)`, the joint
/// Gaussian standing in for `(⟨ŵ, x⟩, ⟨ŵ₀, x⟩, ⟨β, x⟩, ⟨μ_{c'}, x⟩…)` at a
/// fresh sample of class `c`.
///
/// Sampling uses `g = Ψ_c + L z` with `L` the Cholesky factor of `Φ` taken in
/// the order `(g₃, g_{c'}…, g₂, g₁)`. In that order `g₂` never depends on the
/// second-stage parameters, and the block belonging to `(β, μ)` is factored
/// exactly. Only the conditional covariance of `(g₂, g₁)` given that block
/// is projected onto the PSD cone when Monte-Carlo noise makes it indefinite.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    /// `Ψ_c` for each class.
    pub means: Vec<DVector<f64>>,
    /// `Φ` as assembled, unprojected.
    pub cov: DMatrix<f64>,
    /// Rows in `Φ` coordinates, columns in sampling order.
    pub(crate) factor: DMatrix<f64>,
    /// Sum of the negative eigenvalues removed by the projection.
    pub clipped_mass: f64,
}

/// Index of `g₁`, `g₂`, `g₃` and the first mean projection in `Φ`.
pub(crate) const G1: usize = 0;
pub(crate) const G2: usize = 1;
pub(crate) const G3: usize = 2;
pub(crate) const GC: usize = 3;

impl GaussianLaw {
    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    /// `g` for a draw `z` (sampling order) from class `class`.
    pub fn sample(&self, class: usize, z: &[f64]) -> DVector<f64> {
        &self.means[class] + &self.factor * DVector::from_column_slice(z)
    }

    /// `L Lᵀ`: the covariance actually sampled from.
    pub fn sampled_cov(&self) -> DMatrix<f64> {
        &self.factor * self.factor.transpose()
    }
}

/// Assembles `Ψ_c` and `Φ` from the order parameters.
pub fn build_gaussian_law(
    spec: &ProblemSpec,
    p0: &Stage0Params,
    p1: &Stage1Params,
) -> Result<GaussianLaw, SeError> {
    if !p0.is_finite() || !p1.is_finite() {
        return Err(SeError::NonFinite(format!("{p0:?} / {p1:?}")));
    }
    let k = spec.n_classes();
    if p0.m0.len() != k || p1.m.len() != k {
        return Err(SeError::InvalidSpec(format!(
            "mean overlaps have lengths {}/{} for {k} classes",
            p0.m0.len(),
            p1.m.len()
        )));
    }
    let dim = 3 + k;

    let mut cov = DMatrix::zeros(dim, dim);
    let mut set = |i: usize, j: usize, v: f64| {
        cov[(i, j)] = v;
        cov[(j, i)] = v;
    };
    set(G1, G1, p1.q);
    set(G1, G2, p1.t);
    set(G1, G3, p1.theta);
    set(G2, G2, p0.q0);
    set(G2, G3, p0.theta0);
    set(G3, G3, spec.varrho);
    for c in 0..k {
        set(G1, GC + c, p1.m[c]);
        set(G2, GC + c, p0.m0[c]);
        set(G3, GC + c, spec.nu[c]);
        for c2 in 0..k {
            set(GC + c, GC + c2, spec.rho[(c, c2)]);
        }
    }

    let means = (0..k)
        .map(|c| {
            let mut mu = DVector::zeros(dim);
            mu[G1] = p1.m[c];
            mu[G2] = p0.m0[c];
            mu[G3] = spec.nu[c];
            for c2 in 0..k {
                mu[GC + c2] = spec.rho[(c, c2)];
            }
            mu
        })
        .collect();

    // Sampling order: g3, g_c..., g2, g1.
    let mut order = vec![G3];
    order.extend(GC..GC + k);
    order.push(G2);
    order.push(G1);
    let permuted = DMatrix::from_fn(dim, dim, |i, j| cov[(order[i], order[j])]);

    let mut lower = DMatrix::<f64>::zeros(dim, dim);
    let na = 1 + k;
    let scale = (0..na).map(|i| permuted[(i, i)]).fold(1.0f64, f64::max);
    // Semidefinite Cholesky of the (beta, mu) block.
    for j in 0..na {
        let mut d = permuted[(j, j)];
        for m in 0..j {
            d -= lower[(j, m)] * lower[(j, m)];
        }
        if d <= PIVOT_TOL * scale {
            continue;
        }
        let ljj = d.sqrt();
        lower[(j, j)] = ljj;
        for i in j + 1..dim {
            let mut s = permuted[(i, j)];
            for m in 0..j {
                s -= lower[(i, m)] * lower[(j, m)];
            }
            lower[(i, j)] = s / ljj;
        }
    }

    // Conditional covariance of (g2, g1) given the block above.
    let (i2, i1) = (na, na + 1);
    let dot = |a: usize, b: usize| (0..na).map(|m| lower[(a, m)] * lower[(b, m)]).sum::<f64>();
    let s22 = permuted[(i2, i2)] - dot(i2, i2);
    let s21 = permuted[(i2, i1)] - dot(i2, i1);
    let s11 = permuted[(i1, i1)] - dot(i1, i1);
    let (s22, s21, s11, clipped_mass) = clip_2x2(s22, s21, s11);

    let l22 = s22.max(0.0).sqrt();
    let l12 = if l22 > 0.0 { s21 / l22 } else { 0.0 };
    let l11 = (s11 - l12 * l12).max(0.0).sqrt();
    lower[(i2, i2)] = l22;
    lower[(i1, i2)] = l12;
    lower[(i1, i1)] = l11;

    let mut factor = DMatrix::zeros(dim, dim);
    for (pos, &row) in order.iter().enumerate() {
        for col in 0..dim {
            factor[(row, col)] = lower[(pos, col)];
        }
    }

    Ok(GaussianLaw {
        means,
        cov,
        factor,
        clipped_mass,
    })
}

/// Projects the symmetric 2×2 matrix `[[a, b], [b, c]]` onto the PSD cone by
/// zeroing negative eigenvalues; returns the projected entries and the
/// removed mass.
fn clip_2x2(a: f64, b: f64, c: f64) -> (f64, f64, f64, f64) {
    let half_trace = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (hi, lo) = (half_trace + radius, half_trace - radius);
    if lo >= 0.0 {
        return (a, b, c, 0.0);
    }
    if hi <= 0.0 {
        return (0.0, 0.0, 0.0, -(hi + lo));
    }
    // Eigenvector of the positive eigenvalue.
    let (vx, vy) = if b.abs() > 0.0 {
        (hi - c, b)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm2 = vx * vx + vy * vy;
    let f = hi / norm2;
    (f * vx * vx, f * vx * vy, f * vy * vy, -lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{make_square_pair, SignLink};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn two_class_spec() -> ProblemSpec {
        let (l0, l1) = make_square_pair(Arc::new(SignLink));
        ProblemSpec {
            alpha: 2.0,
            lambda: 0.1,
            lambda0: 0.2,
            class_probs: vec![0.4, 0.6],
            nu: vec![0.3, -0.2],
            rho: DMatrix::from_row_slice(2, 2, &[1.0, 0.25, 0.25, 0.8]),
            varrho: 1.3,
            link: Arc::new(SignLink),
            noise: Default::default(),
            loss0: l0,
            loss1: l1,
        }
    }

    #[test]
    fn clip_2x2_keeps_psd_and_reports_mass() {
        assert_eq!(clip_2x2(2.0, 1.0, 1.0), (2.0, 1.0, 1.0, 0.0));
        let (a, b, c, mass) = clip_2x2(1.0, 2.0, 1.0);
        assert_relative_eq!(mass, 1.0, epsilon = 1e-14);
        assert!(a * c - b * b > -1e-12);
        assert_relative_eq!(a + c, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn degenerate_second_stage_gives_zero_row() {
        let spec = two_class_spec();
        let p0 = Stage0Params {
            m0: vec![0.1, 0.05],
            theta0: 0.2,
            q0: 0.5,
            v0: 1.0,
        };
        let p1 = Stage1Params {
            m: vec![0.0, 0.0],
            theta: 0.0,
            t: 0.0,
            q: 0.0,
            v: 1.0,
            chi: 0.0,
        };
        let law = build_gaussian_law(&spec, &p0, &p1).unwrap();
        for j in 0..law.dim() {
            assert_eq!(law.cov[(G1, j)], 0.0);
            assert_eq!(law.factor[(G1, j)], 0.0);
        }
        let z = vec![0.3, -1.0, 2.0, 0.7, 1.5];
        for c in 0..2 {
            assert_eq!(law.sample(c, &z)[G1], 0.0);
        }
    }

    #[test]
    fn lower_block_is_exactly_the_gram_matrix() {
        let spec = two_class_spec();
        let p0 = Stage0Params {
            m0: vec![0.4, -0.1],
            theta0: 0.5,
            q0: 0.9,
            v0: 1.0,
        };
        let p1 = Stage1Params {
            m: vec![0.2, 0.3],
            theta: 0.4,
            t: 0.3,
            q: 0.7,
            v: 1.0,
            chi: 0.1,
        };
        let law = build_gaussian_law(&spec, &p0, &p1).unwrap();
        let a = spec.gram();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(law.cov[(G3 + i, G3 + j)], a[(i, j)]);
            }
        }
        assert_relative_eq!(law.sampled_cov(), law.cov, epsilon = 1e-12);
        assert_eq!(law.clipped_mass, 0.0);
    }

    #[test]
    fn zero_mean_classes_have_zero_means() {
        let (l0, l1) = make_square_pair(Arc::new(SignLink));
        let spec = ProblemSpec {
            alpha: 8.0,
            lambda: 0.01,
            lambda0: 0.01,
            class_probs: vec![0.7, 0.3],
            nu: vec![0.0, 0.0],
            rho: DMatrix::zeros(2, 2),
            varrho: 1.0,
            link: Arc::new(SignLink),
            noise: Default::default(),
            loss0: l0,
            loss1: l1,
        };
        let p0 = Stage0Params {
            m0: vec![0.0; 2],
            theta0: 0.3,
            q0: 0.5,
            v0: 1.0,
        };
        let law = build_gaussian_law(&spec, &p0, &Stage1Params::mirror(&p0)).unwrap();
        for c in 0..2 {
            assert!(law.means[c].iter().all(|&v| v == 0.0));
        }
        // g1 and g2 coincide under the mirror parameters.
        let z = vec![0.3, 0.0, 0.0, -1.2, 0.8];
        let g = law.sample(0, &z);
        assert_relative_eq!(g[G1], g[G2], epsilon = 1e-14);
    }

    #[test]
    fn indefinite_stage1_block_is_projected() {
        let spec = two_class_spec();
        let p0 = Stage0Params {
            m0: vec![0.0, 0.0],
            theta0: 0.0,
            q0: 1.0,
            v0: 1.0,
        };
        let p1 = Stage1Params {
            m: vec![0.0, 0.0],
            theta: 0.0,
            t: 1.5,
            q: 1.0,
            v: 1.0,
            chi: 0.0,
        };
        let law = build_gaussian_law(&spec, &p0, &p1).unwrap();
        assert!(law.clipped_mass > 0.0);
        let eig = nalgebra::SymmetricEigen::new(law.sampled_cov()).eigenvalues;
        assert!(eig.min() > -1e-12);
        // The (beta, mu) block is untouched by the projection.
        let sampled = law.sampled_cov();
        for i in G3..law.dim() {
            for j in G3..law.dim() {
                assert_relative_eq!(sampled[(i, j)], law.cov[(i, j)], epsilon = 1e-12);
            }
        }
    }
}
