//! End-to-end runs persisted to a self-describing directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use fplab_core::classifier::Classifier;
use fplab_core::data::Dataset;
use fplab_core::fl::{run_federation, ClientUpdate, FederationOutcome, FederationSetup, RoundObserver, RoundRecord};
use fplab_core::metrics::MisReport;
use fplab_core::psg::PoisonGenerator;
use fplab_core::ParamVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::io::{save_generator, write_json, write_params, RoundLogWriter};

pub const CONFIG_FILE: &str = "config.toml";
pub const ROUND_LOG: &str = "rounds.jsonl";
pub const INITIAL_MODEL: &str = "initial_model.fplb";
pub const FINAL_MODEL: &str = "final_model.fplb";
pub const MIS_FILE: &str = "mis.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GENERATOR_FILE: &str = "generator.fplb";

/// Number of trailing rounds averaged into the summary.
pub const SUMMARY_WINDOW: usize = 5;

/// Headline numbers of one run. Missing values (no rounds, no stealth
/// score) are `None` and serialize as `NA`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: u32,
    pub final_acc: Option<f64>,
    pub final_asr: Option<f64>,
    pub mis: Option<f64>,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "rounds,final_acc,final_asr,mis";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.rounds, fmt_opt(self.final_acc), fmt_opt(self.final_asr), fmt_opt(self.mis))
    }

    pub fn parse_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        if lines.next()? != Self::CSV_HEADER {
            return None;
        }
        let f: Vec<&str> = lines.next()?.split(',').collect();
        if f.len() != 4 {
            return None;
        }
        Some(Self { rounds: f[0].parse().ok()?, final_acc: parse_opt(f[1])?, final_asr: parse_opt(f[2])?, mis: parse_opt(f[3])? })
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    match v {
        None => "NA".into(),
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn parse_opt(s: &str) -> Option<Option<f64>> {
    match s {
        "NA" => Some(None),
        "inf" => Some(Some(f64::INFINITY)),
        other => other.parse().ok().map(Some),
    }
}

/// Mean ACC and ASR over the last [`SUMMARY_WINDOW`] rounds.
pub fn summarize(records: &[RoundRecord], mis: Option<&MisReport>) -> RunSummary {
    let tail = &records[records.len().saturating_sub(SUMMARY_WINDOW)..];
    let mean = |f: fn(&RoundRecord) -> f64| {
        (!tail.is_empty()).then(|| tail.iter().map(f).sum::<f64>() / tail.len() as f64)
    };
    RunSummary {
        rounds: records.len() as u32,
        final_acc: mean(|r| r.acc),
        final_asr: mean(|r| r.asr),
        mis: mis.map(|m| m.mis),
    }
}

/// Everything a run produced, kept in memory.
pub struct RunResult {
    pub outcome: FederationOutcome,
    pub classifier: Classifier,
    pub train: Dataset,
    pub test: Dataset,
    pub warnings: Vec<String>,
}

impl RunResult {
    pub fn summary(&self) -> RunSummary {
        summarize(&self.outcome.records, self.outcome.mis.as_ref().map(|(_, m)| m))
    }
}

/// Runs a configuration without touching the filesystem (except to read a
/// folder dataset). `generator` skips generator training when supplied.
pub fn execute(
    cfg: &ExperimentConfig,
    generator: Option<Arc<PoisonGenerator>>,
    observer: &mut dyn RoundObserver,
) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test, warnings) = cfg.load_data()?;
    let shape = train
        .image_shape()
        .ok_or_else(|| HarnessError::Validation("dataset: training split is empty".into()))?;
    let classifier = Classifier::new(cfg.classifier, shape, train.num_classes())?;
    let setup = FederationSetup {
        config: cfg.federation.clone(),
        arch: cfg.classifier,
        train: &train,
        test: &test,
        attack: cfg.attack_spec(),
        defense: cfg.defense.clone(),
        generator,
    };
    let outcome = run_federation(&setup, observer)?;
    Ok(RunResult { outcome, classifier, train, test, warnings })
}

struct LogObserver {
    log: RoundLogWriter,
    failure: Option<HarnessError>,
}

impl RoundObserver for LogObserver {
    fn on_round(&mut self, record: &RoundRecord, _: &ParamVector, _: &[ClientUpdate]) -> fplab_core::Result<()> {
        self.log.append(record).map_err(|e| {
            self.failure = Some(e);
            fplab_core::Error::InvalidInput("round log write failed".into())
        })
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(HarnessError::io(path))
}

/// Runs `cfg` and persists the config snapshot, round log, model
/// checkpoints, stealth report and summary under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let snapshot = out.join(CONFIG_FILE);
    std::fs::write(&snapshot, cfg.to_toml_string()).map_err(HarnessError::io(&snapshot))?;
    let mut observer = LogObserver { log: RoundLogWriter::create(&out.join(ROUND_LOG))?, failure: None };
    let result = execute(cfg, None, &mut observer);
    if let Some(e) = observer.failure.take() {
        return Err(e);
    }
    let result = result?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    let o = &result.outcome;
    write_params(&out.join(INITIAL_MODEL), &o.initial_params)?;
    write_params(&out.join(FINAL_MODEL), &o.final_params)?;
    if let Some((round, report)) = &o.mis {
        write_json(&out.join(MIS_FILE), &MisFile { round: *round, report: report.clone() })?;
    }
    if let Some(g) = &o.generator {
        save_generator(&out.join(GENERATOR_FILE), g)?;
    }
    let summary = result.summary();
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Stealth report plus the round whose local models it scored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MisFile {
    pub round: u32,
    #[serde(flatten)]
    pub report: MisReport,
}

pub fn write_summary(path: &Path, s: &RunSummary) -> Result<()> {
    let text = format!("{}\n{}\n", RunSummary::CSV_HEADER, s.csv_row());
    std::fs::write(path, text).map_err(HarnessError::io(path))
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    RunSummary::parse_csv(&text).ok_or_else(|| HarnessError::format(path, "malformed summary"))
}

/// Lists the files a run directory must contain for plotting and checking.
pub fn required_run_files(dir: &Path) -> Vec<PathBuf> {
    [CONFIG_FILE, ROUND_LOG, SUMMARY_FILE].iter().map(|f| dir.join(f)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use fplab_core::fl::Diagnostics;

    fn rec(round: u32, acc: f64, asr: f64) -> RoundRecord {
        RoundRecord { round, selected_ids: vec![], acc, asr, defense_diagnostics: Diagnostics::new(), update_snapshot_ref: None }
    }

    #[test]
    fn summary_averages_the_last_rounds() {
        let recs: Vec<_> = (0..7).map(|r| rec(r, r as f64 / 10.0, 0.5)).collect();
        let s = summarize(&recs, None);
        assert!((s.final_acc.unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(s.final_asr, Some(0.5));
        assert_eq!(s.mis, None);
        let short = summarize(&recs[..2], None);
        assert!((short.final_acc.unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn summary_csv_round_trip() {
        let empty = summarize(&[], None);
        assert_eq!(empty.csv_row(), "0,NA,NA,NA");
        let s = RunSummary { rounds: 3, final_acc: Some(0.5), final_asr: Some(0.25), mis: Some(f64::INFINITY) };
        let text = format!("{}\n{}\n", RunSummary::CSV_HEADER, s.csv_row());
        assert_eq!(RunSummary::parse_csv(&text), Some(s));
    }
}
