//! One-dimensional proximal operators `prox_{V f}(x) = argmin_z ½(z - x)² + V f(z)`.
//!
//! The minimiser is the unique root of the strictly increasing function
//! `g(z) = z - x + V f'(z)`, found by Newton steps safeguarded with bisection
//! inside a sign-change bracket.

use thiserror::Error;

use crate::losses::{Latent, Stage0Loss, Stage1Loss};

pub const MAX_ITERATIONS: usize = 200;
pub const TOLERANCE: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxError {
    #[error("prox scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("non-finite prox input x={0}")]
    NonFiniteInput(f64),
    #[error("prox did not converge for x={x}, V={scale}: last bracket [{lo}, {hi}]")]
    NoConvergence { x: f64, scale: f64, lo: f64, hi: f64 },
    #[error("prox failed at element {index}: {source}")]
    Element {
        index: usize,
        #[source]
        source: Box<ProxError>,
    },
}

/// A convex, twice differentiable function of one real variable.
pub trait ScalarConvexFn {
    fn value(&self, z: f64) -> f64;
    fn d1(&self, z: f64) -> f64;
    fn d2(&self, z: f64) -> f64;
}

impl<T: ScalarConvexFn + ?Sized> ScalarConvexFn for &T {
    fn value(&self, z: f64) -> f64 {
        (**self).value(z)
    }
    fn d1(&self, z: f64) -> f64 {
        (**self).d1(z)
    }
    fn d2(&self, z: f64) -> f64 {
        (**self).d2(z)
    }
}

/// `z ↦ ℓ₀(z, s, c, ε)` at a fixed latent.
pub struct Stage0Slice<'a> {
    pub loss: &'a dyn Stage0Loss,
    pub latent: Latent,
}

impl ScalarConvexFn for Stage0Slice<'_> {
    fn value(&self, z: f64) -> f64 {
        self.loss.value(z, &self.latent)
    }
    fn d1(&self, z: f64) -> f64 {
        self.loss.d1(z, &self.latent)
    }
    fn d2(&self, z: f64) -> f64 {
        self.loss.d2(z, &self.latent)
    }
}

/// `z ↦ ℓ(z, u, s, c, ε)` at a fixed base prediction and latent.
pub struct Stage1Slice<'a> {
    pub loss: &'a dyn Stage1Loss,
    pub u: f64,
    pub latent: Latent,
}

impl ScalarConvexFn for Stage1Slice<'_> {
    fn value(&self, z: f64) -> f64 {
        self.loss.value(z, self.u, &self.latent)
    }
    fn d1(&self, z: f64) -> f64 {
        self.loss.dr(z, self.u, &self.latent)
    }
    fn d2(&self, z: f64) -> f64 {
        self.loss.drr(z, self.u, &self.latent)
    }
}

/// `prox_{V f}(x)`.
pub fn prox1d<F: ScalarConvexFn + ?Sized>(f: &F, scale: f64, x: f64) -> Result<f64, ProxError> {
    if !(scale > 0.0) {
        return Err(ProxError::NonPositiveScale(scale));
    }
    if !x.is_finite() {
        return Err(ProxError::NonFiniteInput(x));
    }
    let tol = TOLERANCE * (1.0 + x.abs());
    let g = |z: f64| z - x + scale * f.d1(z);

    let gx = g(x);
    if gx.abs() <= tol {
        return Ok(x);
    }

    // Bracket the root. g is strictly increasing, so the sign of g(x) tells
    // on which side of x the root lies.
    let spread = scale * f.d1(x).abs() + 1.0;
    let (mut lo, mut hi) = (x - spread, x + spread);
    let (mut g_lo, mut g_hi) = (g(lo), g(hi));
    let mut step = spread;
    let mut expansions = 0;
    while g_lo > 0.0 {
        step *= 2.0;
        hi = lo;
        g_hi = g_lo;
        lo = x - step;
        g_lo = g(lo);
        expansions += 1;
        if expansions > 200 || !g_lo.is_finite() {
            return Err(ProxError::NoConvergence { x, scale, lo, hi });
        }
    }
    while g_hi < 0.0 {
        step *= 2.0;
        lo = hi;
        g_lo = g_hi;
        hi = x + step;
        g_hi = g(hi);
        expansions += 1;
        if expansions > 200 || !g_hi.is_finite() {
            return Err(ProxError::NoConvergence { x, scale, lo, hi });
        }
    }
    if g_lo.abs() <= tol {
        return Ok(lo);
    }
    if g_hi.abs() <= tol {
        return Ok(hi);
    }

    let mut z = x.clamp(lo, hi);
    let mut gz = if z == x { gx } else { g(z) };
    let mut last_step = hi - lo;
    for _ in 0..MAX_ITERATIONS {
        if gz.abs() <= tol {
            return Ok(z);
        }
        if gz < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let slope = 1.0 + scale * f.d2(z);
        let newton = z - gz / slope;
        // Bisect when Newton leaves the bracket or stops halving its step,
        // which happens when it cycles across a steep sigmoid.
        let next = if newton > lo && newton < hi && 2.0 * (newton - z).abs() <= last_step {
            newton
        } else {
            0.5 * (lo + hi)
        };
        last_step = (next - z).abs();
        if next == z || hi - lo <= f64::EPSILON * (1.0 + z.abs()) {
            // No representable progress left; z is as good as it gets.
            return Ok(z);
        }
        z = next;
        gz = g(z);
    }
    Err(ProxError::NoConvergence { x, scale, lo, hi })
}

/// Elementwise `prox1d` over a family of functions indexed by node.
pub fn prox1d_batch<F, G>(family: G, scale: f64, xs: &[f64]) -> Result<Vec<f64>, ProxError>
where
    F: ScalarConvexFn,
    G: Fn(usize) -> F + Sync,
{
    let solve = |(i, &x): (usize, &f64)| {
        prox1d(&family(i), scale, x).map_err(|e| ProxError::Element {
            index: i,
            source: Box::new(e),
        })
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        xs.par_iter().enumerate().map(solve).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        xs.iter().enumerate().map(solve).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Quadratic {
        center: f64,
    }

    impl ScalarConvexFn for Quadratic {
        fn value(&self, z: f64) -> f64 {
            0.5 * (z - self.center).powi(2)
        }
        fn d1(&self, z: f64) -> f64 {
            z - self.center
        }
        fn d2(&self, _z: f64) -> f64 {
            1.0
        }
    }

    struct Zero;

    impl ScalarConvexFn for Zero {
        fn value(&self, _z: f64) -> f64 {
            0.0
        }
        fn d1(&self, _z: f64) -> f64 {
            0.0
        }
        fn d2(&self, _z: f64) -> f64 {
            0.0
        }
    }

    struct Logistic;

    impl ScalarConvexFn for Logistic {
        fn value(&self, z: f64) -> f64 {
            crate::losses::MarginLoss::Logistic.value(z, 1.0)
        }
        fn d1(&self, z: f64) -> f64 {
            crate::losses::MarginLoss::Logistic.d1(z, 1.0)
        }
        fn d2(&self, z: f64) -> f64 {
            crate::losses::MarginLoss::Logistic.d2(z, 1.0)
        }
    }

    /// `exp(z)`: steep on the right, flat on the left.
    struct Exp;

    impl ScalarConvexFn for Exp {
        fn value(&self, z: f64) -> f64 {
            z.exp()
        }
        fn d1(&self, z: f64) -> f64 {
            z.exp()
        }
        fn d2(&self, z: f64) -> f64 {
            z.exp()
        }
    }

    #[test]
    fn quadratic_closed_form() {
        let z = prox1d(&Quadratic { center: 3.0 }, 1.0, 1.0).unwrap();
        assert_eq!(z, 2.0);
    }

    #[test]
    fn zero_function_is_identity() {
        assert_eq!(prox1d(&Zero, 2.5, 0.7).unwrap(), 0.7);
    }

    #[test]
    fn exponential_residual() {
        for &(v, x) in &[(1.0, 0.0), (10.0, 30.0), (0.01, -40.0), (100.0, 5.0)] {
            let z = prox1d(&Exp, v, x).unwrap();
            let res = z - x + v * z.exp();
            assert!(res.abs() <= 1e-11 * (1.0 + x.abs()), "v={v} x={x} res={res}");
        }
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert_eq!(prox1d(&Zero, 0.0, 1.0), Err(ProxError::NonPositiveScale(0.0)));
        assert!(prox1d(&Zero, -1.0, 1.0).is_err());
        assert!(prox1d(&Zero, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn batch_matches_scalar_and_handles_empty() {
        let centers = [1.0, -2.0, 0.5];
        let xs = [0.0, 4.0, -1.0];
        let out = prox1d_batch(|i| Quadratic { center: centers[i] }, 0.5, &xs).unwrap();
        for i in 0..3 {
            assert_eq!(out[i], (xs[i] + 0.5 * centers[i]) / 1.5);
        }
        let empty = prox1d_batch(|_| Zero, 1.0, &[]).unwrap();
        assert!(empty.is_empty());
        match prox1d_batch(|_| Zero, -1.0, &[1.0, 2.0]) {
            Err(ProxError::Element { index: 0, .. }) | Err(ProxError::Element { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn logistic_prox_is_firmly_nonexpansive(
            v in 0.01f64..50.0, x1 in -30.0f64..30.0, x2 in -30.0f64..30.0,
        ) {
            let p1 = prox1d(&Logistic, v, x1).unwrap();
            let p2 = prox1d(&Logistic, v, x2).unwrap();
            prop_assert!((p1 - p2).abs() <= (x1 - x2).abs() + 1e-12);
            // Firm nonexpansiveness: (p1-p2)² ≤ (p1-p2)(x1-x2).
            prop_assert!((p1 - p2).powi(2) <= (p1 - p2) * (x1 - x2) + 1e-12);
            if x1 < x2 {
                prop_assert!(p1 <= p2);
            }
            let res = p1 - x1 + v * Logistic.d1(p1);
            prop_assert!(res.abs() <= 1e-11 * (1.0 + x1.abs()));
        }

        #[test]
        fn quadratic_prox_matches_closed_form(
            v in 1e-3f64..1e3, x in -100.0f64..100.0, c in -100.0f64..100.0,
        ) {
            let z = prox1d(&Quadratic { center: c }, v, x).unwrap();
            let exact = (x + v * c) / (1.0 + v);
            prop_assert!((z - exact).abs() <= 1e-14 * (1.0 + exact.abs()) * 4.0);
        }
    }
}
