use itererm::active_learning::{isotropic_point, CurvePoint, IsotropicProblem, MarginLossName, TheoryConfig};
use itererm::losses::PolicyKind;
use itererm::report::{format_float, parse_float, write_csv, SolutionRecord, CSV_COLUMNS};
use itererm::state_evolution::IntegratorConfig;
use proptest::prelude::*;

fn point() -> CurvePoint {
    let problem = IsotropicProblem {
        alpha: 2.0,
        lambda: 0.1,
        lambda0: 0.1,
        loss0: MarginLossName::Square,
        loss1: MarginLossName::Square,
        flip: 0.0,
    };
    let cfg = TheoryConfig {
        integrator: IntegratorConfig {
            nodes: 2_000,
            ..IntegratorConfig::default()
        },
        ..TheoryConfig::default()
    };
    isotropic_point(&problem, PolicyKind::Constant(1.0), "constant", Some(&cfg), None).unwrap()
}

fn any_float() -> impl Strategy<Value = f64> {
    prop_oneof![
        8 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
        1 => Just(f64::INFINITY),
        1 => Just(f64::NEG_INFINITY),
    ]
}

#[test]
fn csv_has_header_and_one_line_per_point() {
    let p = point();
    let mut buf = Vec::new();
    write_csv(&mut buf, &[p.clone(), p]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], CSV_COLUMNS.join(","));
    assert_eq!(lines[1].split(',').count(), CSV_COLUMNS.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn floats_survive_text(v in any_float()) {
        prop_assert_eq!(parse_float(&format_float(v)).unwrap().to_bits(), v.to_bits());
    }

    #[test]
    fn solution_record_survives_json(
        psi in proptest::option::of(any_float()),
        km in proptest::option::of(any_float()),
        kp in proptest::option::of(any_float()),
        egen in 0.0..=1.0f64,
        q in any::<f64>().prop_filter("finite", |v| v.is_finite()),
    ) {
        let mut p = point();
        p.thresholds.kappa_minus = km;
        p.thresholds.kappa_plus = kp;
        let mut rec = SolutionRecord::from_point("run", 3, &p).unwrap();
        rec.psi = psi;
        rec.egen = egen;
        rec.solution.stage1.q = q;
        let back = SolutionRecord::from_json(&rec.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, rec);
    }
}
