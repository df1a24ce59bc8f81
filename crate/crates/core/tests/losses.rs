use std::sync::Arc;

use itererm::losses::{
    make_al_losses, make_logistic_pair, make_pruning_losses, make_square_pair, make_zero_pair, ClassLink,
    Latent, LinkFunction, MarginLoss, PolicyKind, SelectionPolicy, SharedStage0, SharedStage1, SignLink,
};
use proptest::prelude::*;

const H: f64 = 1e-5;
const REL: f64 = 1e-6;

fn close(an: f64, fd: f64) -> bool {
    (an - fd).abs() <= REL * an.abs().max(1.0)
}

fn policies() -> Vec<SelectionPolicy> {
    let mut v = vec![SelectionPolicy::constant(1.0), SelectionPolicy::constant(0.3)];
    for width in [0.05, 0.3] {
        for kind in [
            PolicyKind::SmallMargin { kappa: 0.7 },
            PolicyKind::LargeMargin { kappa: 0.7 },
            PolicyKind::Mixed {
                kappa_minus: 0.3,
                kappa_plus: 1.2,
            },
            PolicyKind::CorrectlyClassified,
        ] {
            v.push(SelectionPolicy::new(kind, width).unwrap());
        }
    }
    v
}

/// Every loss pair the library builds, each with the latents it is used on.
fn catalogue() -> Vec<(String, SharedStage0, SharedStage1, Vec<usize>)> {
    let sign: Arc<dyn LinkFunction> = Arc::new(SignLink);
    let cls: Arc<dyn LinkFunction> = Arc::new(ClassLink::binary());
    let mut out = Vec::new();
    let (a, b) = make_logistic_pair(sign.clone());
    out.push(("logistic".into(), a, b, vec![0]));
    let (a, b) = make_square_pair(cls.clone());
    out.push(("square/class".into(), a, b, vec![0, 1]));
    let (a, b) = make_zero_pair();
    out.push(("zero".into(), a, b, vec![0]));
    for base in [MarginLoss::Logistic, MarginLoss::Square] {
        for pol in policies() {
            if matches!(pol.kind, PolicyKind::CorrectlyClassified) {
                continue;
            }
            let (a, b) = make_al_losses(base, base, pol, 0.3, 0.7).unwrap();
            out.push((format!("al {base:?} {pol:?}"), a, b, vec![0, 1]));
        }
        for pol in policies() {
            let (a, b) = make_pruning_losses(base, base, cls.clone(), pol);
            out.push((format!("prune {base:?} {pol:?}"), a, b, vec![0, 1]));
        }
    }
    out
}

fn grid() -> Vec<f64> {
    // Avoids u = 0, where |u| has a kink, and s = 0, where the label flips.
    (0..13).map(|k| -2.95 + 0.49 * k as f64).collect()
}

#[test]
fn loss_partials_match_central_differences() {
    let mut checked = 0;
    for (name, l0, l1, classes) in catalogue() {
        for &c in &classes {
            for &noise in &[1.0, -1.0] {
                for &s in &grid() {
                    let x = Latent::new(s, c, noise);
                    for &u in &grid() {
                        let fd1 = (l0.value(u + H, &x) - l0.value(u - H, &x)) / (2.0 * H);
                        let fd2 = (l0.d1(u + H, &x) - l0.d1(u - H, &x)) / (2.0 * H);
                        let fd3 = (l0.d2(u + H, &x) - l0.d2(u - H, &x)) / (2.0 * H);
                        assert!(close(l0.d1(u, &x), fd1), "{name} d1 at u={u} {x:?}");
                        assert!(close(l0.d2(u, &x), fd2), "{name} d2 at u={u} {x:?}");
                        assert!(close(l0.d3(u, &x), fd3), "{name} d3 at u={u} {x:?}");
                        for &r in &grid() {
                            let dr = (l1.value(r + H, u, &x) - l1.value(r - H, u, &x)) / (2.0 * H);
                            let drr = (l1.dr(r + H, u, &x) - l1.dr(r - H, u, &x)) / (2.0 * H);
                            let du = (l1.value(r, u + H, &x) - l1.value(r, u - H, &x)) / (2.0 * H);
                            let dru = (l1.dr(r, u + H, &x) - l1.dr(r, u - H, &x)) / (2.0 * H);
                            assert!(close(l1.dr(r, u, &x), dr), "{name} dr at r={r} u={u} {x:?}");
                            assert!(close(l1.drr(r, u, &x), drr), "{name} drr at r={r} u={u} {x:?}");
                            assert!(close(l1.du(r, u, &x), du), "{name} du at r={r} u={u} {x:?}");
                            assert!(close(l1.dru(r, u, &x), dru), "{name} dru at r={r} u={u} {x:?}");
                            checked += 1;
                        }
                    }
                }
            }
        }
    }
    assert!(checked > 100_000);
}

fn latent_strategy() -> impl Strategy<Value = (f64, f64, f64, usize, f64)> {
    (
        -30.0..30.0f64,
        -30.0..30.0f64,
        -5.0..5.0f64,
        0usize..2,
        prop_oneof![Just(1.0), Just(-1.0)],
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn curvatures_are_non_negative((r, u, s, c, noise) in latent_strategy()) {
        let x = Latent::new(s, c, noise);
        for (name, l0, l1, classes) in catalogue() {
            if !classes.contains(&c) {
                continue;
            }
            prop_assert!(l0.d2(u, &x) >= 0.0, "{} d2 at u={}", name, u);
            prop_assert!(l1.drr(r, u, &x) >= 0.0, "{} drr at r={} u={}", name, r, u);
        }
    }

    #[test]
    fn base_set_weight_is_one_over_gamma(
        (r, u, s, _c, _noise) in latent_strategy(),
        gamma in 0.05..1.0f64,
        frac in 0.01..1.0f64,
    ) {
        let psi = gamma * frac;
        let x = Latent::new(s, 1, 1.0);
        let y = if s >= 0.0 { 1.0 } else { -1.0 };
        for base in [MarginLoss::Logistic, MarginLoss::Square] {
            for pol in policies() {
                if matches!(pol.kind, PolicyKind::CorrectlyClassified) {
                    continue;
                }
                let (_, l1) = make_al_losses(base, base, pol, psi, gamma).unwrap();
                let (w, e) = (gamma * l1.value(r, u, &x), base.value(r, y));
                prop_assert!((w - e).abs() <= 4.0 * f64::EPSILON * e.abs(), "{} vs {}", w, e);
            }
        }
    }
}
