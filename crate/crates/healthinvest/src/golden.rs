//! Golden-file regression corpus: small solved cases whose CSV outputs
//! are stored under a versioned directory and compared column by column
//! within per-column tolerances (never bit-exact, so the corpus stays
//! portable across math libraries).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::boundary::{solve_surface, write_surface_csv};
use crate::params::ModelParams;
use crate::policy::{solve_policy_grid, write_policy_csv};
use crate::sim::{simulate_closed_loop, write_summary_csv, PolicyKind, SimConfig};
use crate::value::{solve_value_surface, write_value_csv};
use crate::verify::read_numeric_csv;

/// Per-column comparison tolerance: a drift is |fresh - stored| beyond
/// abs + rel |stored|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnTol {
    pub rel: f64,
    pub abs: f64,
}

impl Default for ColumnTol {
    fn default() -> Self {
        ColumnTol { rel: 1e-8, abs: 1e-10 }
    }
}

/// What a golden case solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CaseKind {
    /// Boundary surface CSV over `h_values` at `n_steps`.
    Boundary,
    /// Policy grid CSV on a small (t, x) lattice.
    Policy,
    /// Value surface CSV on a small (t, z) lattice.
    Value,
    /// Simulation summary CSV for a short seeded run.
    Sim,
}

/// One regression case: a self-contained configuration and the
/// tolerance profile for its CSV columns.
#[derive(Debug, Clone)]
pub struct GoldenCase {
    pub name: String,
    pub kind: CaseKind,
    pub n_steps: usize,
    pub h_values: Vec<f64>,
    /// Column-name overrides; unlisted columns use `ColumnTol::default`.
    pub tolerances: Vec<(String, ColumnTol)>,
}

impl GoldenCase {
    fn tol_for(&self, column: &str) -> ColumnTol {
        self.tolerances
            .iter()
            .find(|(name, _)| name == column)
            .map(|(_, t)| *t)
            .unwrap_or_default()
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.name)
    }

    /// Short config description for the manifest.
    fn describe(&self) -> String {
        format!("{:?} n_steps={} h_values={:?}", self.kind, self.n_steps, self.h_values)
    }

    /// Solves the case and renders its CSV body.
    pub fn generate(&self) -> String {
        let p = ModelParams::default();
        let surface =
            solve_surface(&p, &self.h_values, self.n_steps).expect("golden case must solve");
        let mut out = Vec::new();
        match self.kind {
            CaseKind::Boundary => {
                write_surface_csv(&surface, p.horizon, &mut out).expect("in-memory write")
            }
            CaseKind::Policy => {
                let t_grid = [0.0, 8.0, 16.0];
                let x_grid = [40.0, 80.0, 120.0];
                let grid = solve_policy_grid(&p, &surface, &t_grid, &x_grid)
                    .expect("golden policy grid must solve");
                write_policy_csv(&grid, &mut out).expect("in-memory write");
            }
            CaseKind::Value => {
                let t_grid = [0.0, 10.0, 19.0];
                let z_grid = [0.1, 1.0, 10.0];
                let vs = solve_value_surface(&p, &surface, &t_grid, &z_grid)
                    .expect("golden value surface must solve");
                write_value_csv(&vs, &mut out).expect("in-memory write");
            }
            CaseKind::Sim => {
                let cfg = SimConfig {
                    n_paths: 16,
                    n_steps: 32,
                    seed: 42,
                    initial_wealth: 60.0,
                    initial_health: *self.h_values.last().unwrap(),
                    policy: PolicyKind::OptimalBoundary,
                    keep_trajectories: 2,
                    exact_feedback: false,
                };
                let bundle =
                    simulate_closed_loop(&p, &surface, &cfg).expect("golden simulation must run");
                write_summary_csv(&bundle, &mut out).expect("in-memory write");
            }
        }
        String::from_utf8(out).expect("CSV is UTF-8")
    }
}

/// The committed suite. Each case is independent: retuning one case's
/// resolution drifts that case alone.
pub fn golden_cases() -> Vec<GoldenCase> {
    let sim_tols = vec![
        ("invest_time".to_string(), ColumnTol { rel: 0.0, abs: 1e-9 }),
        ("terminal_wealth".to_string(), ColumnTol { rel: 1e-6, abs: 1e-8 }),
        ("welfare".to_string(), ColumnTol { rel: 1e-6, abs: 1e-8 }),
    ];
    vec![
        GoldenCase {
            name: "boundary_two_healths".to_string(),
            kind: CaseKind::Boundary,
            n_steps: 60,
            h_values: vec![2.0, 1000.0],
            tolerances: vec![("residual".to_string(), ColumnTol { rel: 0.0, abs: 1e-8 })],
        },
        GoldenCase {
            name: "policy_grid_healthy".to_string(),
            kind: CaseKind::Policy,
            n_steps: 40,
            h_values: vec![1000.0],
            tolerances: vec![
                ("z_star".to_string(), ColumnTol { rel: 1e-7, abs: 1e-10 }),
                ("v".to_string(), ColumnTol { rel: 1e-7, abs: 1e-10 }),
                ("c_star".to_string(), ColumnTol { rel: 1e-7, abs: 1e-10 }),
                ("pi_star".to_string(), ColumnTol { rel: 1e-7, abs: 1e-10 }),
            ],
        },
        GoldenCase {
            name: "value_slice_sick".to_string(),
            kind: CaseKind::Value,
            n_steps: 40,
            h_values: vec![2.0],
            tolerances: vec![
                ("j_z".to_string(), ColumnTol { rel: 1e-7, abs: 1e-9 }),
                ("j_zz".to_string(), ColumnTol { rel: 1e-6, abs: 1e-9 }),
            ],
        },
        GoldenCase {
            name: "sim_summary_seeded".to_string(),
            kind: CaseKind::Sim,
            n_steps: 40,
            h_values: vec![1000.0],
            tolerances: sim_tols,
        },
    ]
}

/// Directory of the committed corpus, under the crate root.
pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("goldens").join("v1")
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Recomputes every case into `dir` and writes `manifest.json` listing
/// case, config, file, and content digest.
pub fn regenerate_goldens(cases: &[GoldenCase], dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::from("{\n  \"version\": \"v1\",\n  \"cases\": [\n");
    for (i, case) in cases.iter().enumerate() {
        let body = case.generate();
        fs::write(dir.join(case.file_name()), &body)?;
        let _ = write!(
            manifest,
            "    {{\"name\": \"{}\", \"config\": \"{}\", \"file\": \"{}\", \"digest\": \"{:016x}\"}}{}\n",
            case.name,
            case.describe(),
            case.file_name(),
            fnv1a64(body.as_bytes()),
            if i + 1 < cases.len() { "," } else { "" }
        );
    }
    manifest.push_str("  ]\n}\n");
    fs::write(dir.join("manifest.json"), manifest)
}

/// One out-of-tolerance column.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub case_name: String,
    pub column: String,
    pub worst: f64,
    pub tolerance: f64,
}

/// Recomputes every case and compares it column by column against the
/// stored corpus; returns only the drifts beyond tolerance (empty means
/// clean).
pub fn compare_goldens(cases: &[GoldenCase], dir: &Path) -> Result<Vec<Drift>, String> {
    let mut drifts = Vec::new();
    for case in cases {
        let stored_text = fs::read_to_string(dir.join(case.file_name()))
            .map_err(|e| format!("{}: {e}", case.name))?;
        let (stored_headers, stored) = read_numeric_csv(&stored_text)?;
        let (fresh_headers, fresh) = read_numeric_csv(&case.generate())?;
        if stored_headers != fresh_headers || stored.len() != fresh.len() {
            drifts.push(Drift {
                case_name: case.name.clone(),
                column: "<shape>".to_string(),
                worst: f64::INFINITY,
                tolerance: 0.0,
            });
            continue;
        }
        for (c, column) in stored_headers.iter().enumerate() {
            let tol = case.tol_for(column);
            let mut worst = 0.0f64;
            for (a, b) in stored.iter().zip(&fresh) {
                let (a, b) = (a[c], b[c]);
                if a == b || (a.is_nan() && b.is_nan()) {
                    continue;
                }
                let gap = (a - b).abs();
                let allowed = tol.abs + tol.rel * a.abs();
                if gap.is_nan() || gap > allowed {
                    worst = worst.max(if gap.is_nan() { f64::INFINITY } else { gap });
                }
            }
            if worst > 0.0 {
                drifts.push(Drift {
                    case_name: case.name.clone(),
                    column: column.clone(),
                    worst,
                    tolerance: tol.abs,
                });
            }
        }
    }
    Ok(drifts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_regeneration_has_zero_drifts() {
        let dir = tempfile::tempdir().unwrap();
        let cases = &golden_cases()[..1];
        regenerate_goldens(cases, dir.path()).unwrap();
        let drifts = compare_goldens(cases, dir.path()).unwrap();
        assert!(drifts.is_empty(), "{drifts:?}");
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("boundary_two_healths"));
        assert!(manifest.contains("digest"));
    }

    #[test]
    fn resolution_change_drifts_only_the_changed_case() {
        let dir = tempfile::tempdir().unwrap();
        let mut cases: Vec<GoldenCase> = golden_cases()
            .into_iter()
            .filter(|c| matches!(c.kind, CaseKind::Boundary | CaseKind::Value))
            .collect();
        regenerate_goldens(&cases, dir.path()).unwrap();
        cases[0].n_steps += 4;
        let drifts = compare_goldens(&cases, dir.path()).unwrap();
        assert!(!drifts.is_empty());
        assert!(drifts.iter().all(|d| d.case_name == cases[0].name), "{drifts:?}");
    }

    #[test]
    fn tolerance_widening_clears_a_drifting_column() {
        let dir = tempfile::tempdir().unwrap();
        let mut cases = vec![golden_cases().remove(0)];
        regenerate_goldens(&cases, dir.path()).unwrap();
        // Tamper with the stored file: bump the terminal boundary value,
        // which is exactly zero ("h,t,xi,b_dual,..." = "2,20,0,0,...").
        let path = dir.path().join(cases[0].file_name());
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replacen(",20,0,0,", ",20,0,0.0001,", 1);
        assert_ne!(text, tampered, "tamper target must exist");
        fs::write(&path, tampered).unwrap();
        let drifts = compare_goldens(&cases, dir.path()).unwrap();
        assert!(drifts.iter().any(|d| d.column == "b_dual"), "{drifts:?}");
        cases[0].tolerances.push(("b_dual".to_string(), ColumnTol { rel: 0.0, abs: 1.0 }));
        let drifts = compare_goldens(&cases, dir.path()).unwrap();
        assert!(drifts.iter().all(|d| d.column != "b_dual"), "{drifts:?}");
    }
}
