//! Executes a validated plan and writes its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use itererm::active_learning::{isotropic_point, run_pruning_experiment, sweep_psi, CurvePoint};
use itererm::report::{format_float, write_csv, SolutionRecord};

use crate::config::{Plan, Resolved};

/// Runs every row of `plan`. A failing row is recorded in the row; only
/// an error that stops the whole run is returned.
pub fn execute(plan: &Plan) -> Result<Vec<CurvePoint>, String> {
    let theory = plan.theory.as_ref();
    let sim = plan.sim.as_ref();
    let mut rows = Vec::new();
    match &plan.resolved {
        Resolved::Isotropic { problem, policies } => {
            for p in policies {
                rows.push(isotropic_point(problem, p.kind, p.name, theory, sim).map_err(|e| e.to_string())?);
            }
        }
        Resolved::ActiveLearning {
            problem,
            gammas,
            grids,
            policies,
        } => {
            for (gamma, grid) in gammas.iter().zip(grids) {
                for policy in policies {
                    let sweep =
                        sweep_psi(problem, *gamma, grid, policy, theory, sim).map_err(|e| e.to_string())?;
                    rows.extend(sweep.points);
                }
            }
        }
        Resolved::Gmm {
            problem,
            variant,
            alphas,
        } => {
            let curve =
                run_pruning_experiment(problem, variant, alphas, theory, sim).map_err(|e| e.to_string())?;
            rows.extend(curve.pruned);
            rows.extend(curve.baseline);
        }
    }
    Ok(rows)
}

/// Writes `<run-id>.csv` and one solution record per solved row; returns
/// the paths written.
pub fn write_artifacts(out: &Path, run_id: &str, rows: &[CurvePoint]) -> Result<Vec<PathBuf>, String> {
    fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let csv_path = out.join(format!("{run_id}.csv"));
    let file =
        fs::File::create(&csv_path).map_err(|e| format!("cannot write {}: {e}", csv_path.display()))?;
    write_csv(std::io::BufWriter::new(file), rows).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    let mut written = vec![csv_path];
    for (k, row) in rows.iter().enumerate() {
        let Some(rec) = SolutionRecord::from_point(run_id, k, row) else {
            continue;
        };
        let name = if rows.len() == 1 {
            format!("{run_id}.solution.json")
        } else {
            format!("{run_id}-{k}.solution.json")
        };
        let path = out.join(name);
        let json = rec.to_json().map_err(|e| e.to_string())?;
        fs::write(&path, json + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

fn short(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        format_float(v)
    }
}

/// One-line summary of a row.
pub fn summary_line(k: usize, row: &CurvePoint) -> String {
    let mut s = format!("[{k}] {}", row.policy);
    if let Some(b) = row.budget {
        s += &format!(" gamma={} psi={}", short(b.gamma), short(b.psi));
    }
    s += &format!(" alpha={}", short(row.alpha));
    if let Some(t) = &row.theory {
        s += &format!(" egen_theory={}", short(t.egen));
        if t.egen_se > 0.0 {
            s += &format!("±{:.1e}", t.egen_se);
        }
    }
    if let Some(sim) = &row.sim {
        if sim.seeds_ok > 0 {
            s += &format!(" egen_sim={}±{:.1e}", short(sim.egen.mean), sim.egen.sem());
        }
        s += &format!(" seeds_ok={}/{}", sim.seeds_ok, sim.n_seeds);
    }
    match &row.failure {
        Some(f) => s += &format!(" FAILED: {f}"),
        None => s += " ok",
    }
    s
}
