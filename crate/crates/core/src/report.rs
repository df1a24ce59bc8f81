//! Tabular and JSON output of curve points.
//!
//! Every curve, whether a `ψ` sweep or a pruning curve over `α`, is written
//! with the same CSV columns; fields that do not apply to a row are left
//! empty. Floats are printed with 17 significant digits so they read back
//! exactly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::active_learning::{CurvePoint, Thresholds};
use crate::state_evolution::Solution;

pub const CSV_COLUMNS: [&str; 22] = [
    "psi",
    "gamma",
    "alpha",
    "lambda0",
    "lambda",
    "policy",
    "kappa_minus",
    "kappa_plus",
    "q0",
    "theta0",
    "V0",
    "q",
    "t",
    "theta",
    "chi",
    "V",
    "egen_theory",
    "egen_sim_mean",
    "egen_sim_std",
    "seeds_ok",
    "residual",
    "iters",
];

/// `{:.16e}`, with `inf`, `-inf` and `nan` spelled out.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.16e}")
    }
}

/// Inverse of [`format_float`].
pub fn parse_float(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

/// The CSV fields of one point, in [`CSV_COLUMNS`] order.
pub fn csv_record(p: &CurvePoint) -> Vec<String> {
    let sol = p.theory.as_ref().map(|t| &t.solution);
    let s0 = sol.map(|s| &s.stage0);
    let s1 = sol.map(|s| &s.stage1);
    let sim = p.sim.as_ref();
    vec![
        opt(p.budget.map(|b| b.psi)),
        opt(p.budget.map(|b| b.gamma)),
        format_float(p.alpha),
        format_float(p.lambda0),
        format_float(p.lambda),
        p.policy.clone(),
        opt(p.thresholds.kappa_minus),
        opt(p.thresholds.kappa_plus),
        opt(s0.map(|s| s.q0)),
        opt(s0.map(|s| s.theta0)),
        opt(s0.map(|s| s.v0)),
        opt(s1.map(|s| s.q)),
        opt(s1.map(|s| s.t)),
        opt(s1.map(|s| s.theta)),
        opt(s1.map(|s| s.chi)),
        opt(s1.map(|s| s.v)),
        opt(p.theory.as_ref().map(|t| t.egen)),
        opt(sim.filter(|s| s.seeds_ok > 0).map(|s| s.egen.mean)),
        opt(sim.filter(|s| s.seeds_ok > 0).map(|s| s.egen.std)),
        sim.map(|s| s.seeds_ok.to_string()).unwrap_or_default(),
        opt(sol.map(|s| s.diagnostics.stage0.residual.max(s.diagnostics.stage1.residual))),
        sol.map(|s| (s.diagnostics.stage0.iterations + s.diagnostics.stage1.iterations).to_string())
            .unwrap_or_default(),
    ]
}

pub fn write_csv<W: Write>(out: W, points: &[CurvePoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for p in points {
        w.write_record(csv_record(p))?;
    }
    w.flush()?;
    Ok(())
}

/// Everything solved at one point, as written to `<run-id>-<k>.solution.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub run_id: String,
    pub index: usize,
    #[serde(with = "extended_float::option")]
    pub psi: Option<f64>,
    #[serde(with = "extended_float::option")]
    pub gamma: Option<f64>,
    pub alpha: f64,
    pub lambda0: f64,
    pub lambda: f64,
    pub policy: String,
    pub thresholds: Thresholds,
    pub solution: Solution,
    pub egen: f64,
    pub egen_se: f64,
    pub base_egen: f64,
    #[serde(with = "extended_float::option")]
    pub selected_mass: Option<f64>,
    pub converged: bool,
    pub failure: Option<String>,
}

impl SolutionRecord {
    pub fn from_point(run_id: &str, index: usize, p: &CurvePoint) -> Option<Self> {
        let t = p.theory.as_ref()?;
        Some(Self {
            run_id: run_id.to_string(),
            index,
            psi: p.budget.map(|b| b.psi),
            gamma: p.budget.map(|b| b.gamma),
            alpha: p.alpha,
            lambda0: p.lambda0,
            lambda: p.lambda,
            policy: p.policy.clone(),
            thresholds: p.thresholds,
            solution: t.solution.clone(),
            egen: t.egen,
            egen_se: t.egen_se,
            base_egen: t.base_egen,
            selected_mass: t.selected_mass,
            converged: t.converged(),
            failure: p.failure.clone(),
        })
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"`
/// and `"nan"`, which plain JSON numbers cannot carry.
pub mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_float(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => {
                super::parse_float(&s).ok_or_else(|| de::Error::custom(format!("not a float: {s:?}")))
            }
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            #[derive(Deserialize)]
            struct Wrap(#[serde(deserialize_with = "super::deserialize")] f64);
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [
            0.1,
            -1.0 / 3.0,
            1e-300,
            6.02e23,
            0.0,
            f64::INFINITY,
            f64::NEG_INFINITY,
        ] {
            let s = format_float(v);
            assert_eq!(parse_float(&s).unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert!(parse_float("nan").unwrap().is_nan());
        assert_eq!(format_float(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn thresholds_json_with_infinity() {
        let th = Thresholds {
            kappa_minus: Some(0.25),
            kappa_plus: Some(f64::INFINITY),
        };
        let s = serde_json::to_string(&th).unwrap();
        assert_eq!(s, r#"{"kappa_minus":0.25,"kappa_plus":"inf"}"#);
        assert_eq!(serde_json::from_str::<Thresholds>(&s).unwrap(), th);
        let none = Thresholds::default();
        let s = serde_json::to_string(&none).unwrap();
        assert_eq!(serde_json::from_str::<Thresholds>(&s).unwrap(), none);
    }
}
