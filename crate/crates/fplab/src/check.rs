//! Recomputes a run's summary from its round log and stealth report.

use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::experiment::{read_summary, required_run_files, summarize, MisFile, RunSummary, MIS_FILE, ROUND_LOG, SUMMARY_FILE};
use crate::io::{read_json, read_round_log};

/// Summary values are written with six decimals.
const TOLERANCE: f64 = 5e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub stored: RunSummary,
    pub recomputed: RunSummary,
    pub mismatches: Vec<String>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn same(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) if x.is_infinite() || y.is_infinite() => x == y,
        (Some(x), Some(y)) => (x - y).abs() <= TOLERANCE,
        _ => false,
    }
}

pub fn check_run(dir: &Path) -> Result<CheckReport> {
    let missing: Vec<String> =
        required_run_files(dir).into_iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(HarnessError::Validation(format!("not a run directory; missing {}", missing.join(", "))));
    }
    let records = read_round_log(&dir.join(ROUND_LOG))?;
    let mis_path = dir.join(MIS_FILE);
    let mis: Option<MisFile> = if mis_path.is_file() { Some(read_json(&mis_path)?) } else { None };
    let recomputed = summarize(&records, mis.as_ref().map(|m| &m.report));
    let stored = read_summary(&dir.join(SUMMARY_FILE))?;
    let mut mismatches = Vec::new();
    if stored.rounds != recomputed.rounds {
        mismatches.push(format!("rounds: stored {} vs log {}", stored.rounds, recomputed.rounds));
    }
    for (name, a, b) in [
        ("final_acc", stored.final_acc, recomputed.final_acc),
        ("final_asr", stored.final_asr, recomputed.final_asr),
        ("mis", stored.mis, recomputed.mis),
    ] {
        if !same(a, b) {
            mismatches.push(format!("{name}: stored {a:?} vs recomputed {b:?}"));
        }
    }
    Ok(CheckReport { stored, recomputed, mismatches })
}
