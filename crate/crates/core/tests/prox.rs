use std::sync::Arc;

use itererm::losses::{make_logistic_pair, Latent, LinkFunction, MarginLoss, SignLink};
use itererm::prox::{prox1d, ScalarConvexFn, TOLERANCE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
struct Margin {
    loss: MarginLoss,
    y: f64,
}

impl ScalarConvexFn for Margin {
    fn value(&self, z: f64) -> f64 {
        self.loss.value(z, self.y)
    }
    fn d1(&self, z: f64) -> f64 {
        self.loss.d1(z, self.y)
    }
    fn d2(&self, z: f64) -> f64 {
        self.loss.d2(z, self.y)
    }
}

/// Golden-section search on `|z - x + V ∂ℓ(z)|`, which is unimodal since
/// the stationarity map is increasing. The logistic derivative is written
/// out here rather than taken from the library. Searching on the objective
/// itself would stall near `√ε` in `z`.
fn logistic_prox_oracle(y: f64, v: f64, x: f64) -> f64 {
    let dl = |z: f64| -y / (1.0 + (y * z).exp());
    let obj = |z: f64| (z - x + v * dl(z)).abs();
    let (mut a, mut b) = (x - v - 1.0, x + v + 1.0);
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (obj(c), obj(d));
    for _ in 0..300 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = obj(d);
        }
    }
    0.5 * (a + b)
}

#[test]
fn square_loss_has_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let x = rng.random_range(-50.0..50.0);
        let v = 10f64.powf(rng.random_range(-3.0..3.0));
        let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let f = Margin {
            loss: MarginLoss::Square,
            y,
        };
        // (z - y)² / 2 gives z = (x + V y) / (1 + V).
        let exact = (x + v * y) / (1.0 + v);
        let z = prox1d(&f, v, x).unwrap();
        assert!(
            (z - exact).abs() <= 1e-14 * exact.abs().max(1.0),
            "x={x} V={v}: {z} vs {exact}"
        );
    }
}

#[test]
fn logistic_matches_golden_section_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1_000 {
        let x = rng.random_range(-20.0..20.0);
        let v = 10f64.powf(rng.random_range(-2.0..2.0));
        let y = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let f = Margin {
            loss: MarginLoss::Logistic,
            y,
        };
        let z = prox1d(&f, v, x).unwrap();
        let oracle = logistic_prox_oracle(y, v, x);
        assert!(
            (z - oracle).abs() <= 1e-8 * (1.0 + x.abs()),
            "x={x} V={v}: {z} vs {oracle}"
        );
    }
}

#[test]
fn stage_slices_agree_with_margin_form() {
    use itererm::prox::Stage0Slice;
    let link: Arc<dyn LinkFunction> = Arc::new(SignLink);
    let (l0, _) = make_logistic_pair(link);
    for &(s, x, v) in &[(0.4, 1.5, 0.7), (-2.0, -0.3, 3.0), (1.0, -8.0, 0.05)] {
        let slice = Stage0Slice {
            loss: l0.as_ref(),
            latent: Latent::new(s, 0, 1.0),
        };
        let margin = Margin {
            loss: MarginLoss::Logistic,
            y: s.signum(),
        };
        assert_eq!(prox1d(&slice, v, x).unwrap(), prox1d(&margin, v, x).unwrap());
    }
}

#[test]
fn rejects_bad_arguments() {
    let f = Margin {
        loss: MarginLoss::Square,
        y: 1.0,
    };
    assert!(prox1d(&f, 0.0, 1.0).is_err());
    assert!(prox1d(&f, -1.0, 1.0).is_err());
    assert!(prox1d(&f, 1.0, f64::NAN).is_err());
}

fn loss_strategy() -> impl Strategy<Value = Margin> {
    (
        prop_oneof![Just(MarginLoss::Logistic), Just(MarginLoss::Square)],
        prop_oneof![Just(1.0), Just(-1.0)],
    )
        .prop_map(|(loss, y)| Margin { loss, y })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn optimality_residual_is_small(f in loss_strategy(), x in -100.0..100.0f64, lv in -3.0..3.0f64) {
        let v = 10f64.powf(lv);
        let z = prox1d(&f, v, x).unwrap();
        prop_assert!((z - x + v * f.d1(z)).abs() <= TOLERANCE * (1.0 + x.abs()));
    }

    #[test]
    fn firmly_nonexpansive(f in loss_strategy(), x1 in -50.0..50.0f64, x2 in -50.0..50.0f64, lv in -3.0..3.0f64) {
        let v = 10f64.powf(lv);
        let p1 = prox1d(&f, v, x1).unwrap();
        let p2 = prox1d(&f, v, x2).unwrap();
        let slack = 4.0 * TOLERANCE * (1.0 + x1.abs().max(x2.abs())) * (1.0 + (x1 - x2).abs());
        prop_assert!((p1 - p2).powi(2) <= (p1 - p2) * (x1 - x2) + slack);
        if x1 <= x2 {
            prop_assert!(p1 <= p2 + slack);
        }
    }
}
