use itererm_web::{pruning_json, thresholds_json, tradeoff_json};
use serde_json::Value;

#[test]
fn tradeoff_rows_cover_the_grid() {
    let v: Value =
        serde_json::from_str(&tradeoff_json(4.0, 0.6, 0.01, "small-margin", 5, 4000).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!((rows[4]["x"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    for r in rows {
        let e = r["theory"].as_f64().unwrap();
        assert!(e > 0.0 && e < 0.5, "{r}");
    }
}

#[test]
fn thresholds_saturate_the_share() {
    let v: Value = serde_json::from_str(&thresholds_json(0.5, 0.2, 1.0, "small-margin").unwrap()).unwrap();
    assert!((v["share"].as_f64().unwrap() - 0.375).abs() < 1e-12);
    assert!(v["kappa_minus"].as_f64().unwrap() > 0.0);
    assert!(v["kappa_plus"].is_null());
    assert!(thresholds_json(0.5, 0.7, 1.0, "small-margin").is_err());
    assert!(thresholds_json(0.5, 0.2, 1.0, "widest").is_err());
}

#[test]
fn pruning_has_both_curves() {
    let v: Value = serde_json::from_str(&pruning_json(0.2, 3.0, 3, 4000).unwrap()).unwrap();
    assert_eq!(v["pruned"].as_array().unwrap().len(), 3);
    assert_eq!(v["baseline"].as_array().unwrap().len(), 3);
}
