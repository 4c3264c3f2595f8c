//! First-hitting-time table for the normalized Ornstein-Uhlenbeck process.

use std::fs;
use std::path::Path;

use anyhow::Result;
use pchid_core::ou::{compare_fht, DensityDiscrepancy, FhtComparison};
use pchid_core::seeding::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct OuSettings {
    pub starts: Vec<f64>,
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for OuSettings {
    fn default() -> Self {
        Self {
            starts: vec![0.5, 1.0, 2.0],
            paths: 100_000,
            dt: 1e-4,
            horizon: 50.0,
            seed: 11,
        }
    }
}

/// KS distance below which the published density is considered to match
/// the simulation.
pub const KS_THRESHOLD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct OuRow {
    pub comparison: FhtComparison,
    pub discrepancy: DensityDiscrepancy,
}

/// Quadrature against Monte Carlo for every start, with the density check.
pub fn ou_analyze(settings: &OuSettings) -> Result<Vec<OuRow>> {
    settings
        .starts
        .iter()
        .enumerate()
        .map(|(i, &s0)| {
            let seed = derive_seed(settings.seed, i as u64);
            let (comparison, times) =
                compare_fht(s0, settings.paths, settings.dt, settings.horizon, seed)?;
            let discrepancy = DensityDiscrepancy::new(s0, settings.horizon, &times);
            Ok(OuRow {
                comparison,
                discrepancy,
            })
        })
        .collect()
}

pub fn table_csv(rows: &[OuRow]) -> String {
    let mut out = format!("{}\n", FhtComparison::CSV_HEADER);
    for row in rows {
        out.push_str(&row.comparison.csv_row());
        out.push('\n');
    }
    out
}

/// Discrepancy report for every start where the published density misses
/// the KS threshold; empty when it passes everywhere.
pub fn discrepancy_report(rows: &[OuRow]) -> String {
    rows.iter()
        .filter(|r| !r.discrepancy.printed_passes(KS_THRESHOLD))
        .map(|r| r.discrepancy.report())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Writes `fht.csv` and, when needed, `density_discrepancy.txt`.
pub fn write_ou(rows: &[OuRow], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("fht.csv"), table_csv(rows))?;
    let report = discrepancy_report(rows);
    if !report.is_empty() {
        fs::write(out_dir.join("density_discrepancy.txt"), report + "\n")?;
    }
    Ok(())
}
