//! One-parameter sweeps over several seeds.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepSpec};
use crate::error::{HarnessError, Result};
use crate::experiment::{fmt_opt, run_experiment, RunSummary};

pub const SWEEP_TABLE: &str = "sweep.csv";
pub const RUNS_TABLE: &str = "runs.csv";

/// Worker count from `FPLAB_THREADS`, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("FPLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` on a pool bounded by [`thread_count`].
pub fn with_pool<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub value: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<RunSummary, String>,
}

/// Mean and sample standard deviation of the successful runs at one value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub runs: usize,
    pub acc_mean: Option<f64>,
    pub acc_std: Option<f64>,
    pub asr_mean: Option<f64>,
    pub asr_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: String,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunEntry>,
}

impl SweepReport {
    pub fn failures(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.result.is_err())
    }
}

pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (Some(mean), Some(std))
}

fn aggregate(values: &[f64], runs: &[RunEntry]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&value| {
            let ok: Vec<&RunSummary> =
                runs.iter().filter(|r| r.value == value).filter_map(|r| r.result.as_ref().ok()).collect();
            let accs: Vec<f64> = ok.iter().filter_map(|s| s.final_acc).collect();
            let asrs: Vec<f64> = ok.iter().filter_map(|s| s.final_asr).collect();
            let (acc_mean, acc_std) = mean_std(&accs);
            let (asr_mean, asr_std) = mean_std(&asrs);
            SweepRow { value, runs: ok.len(), acc_mean, acc_std, asr_mean, asr_std }
        })
        .collect()
}

fn value_label(v: f64) -> String {
    format!("{v}")
}

/// One run per (value, seed) under `out/<param>=<value>/seed=<seed>`,
/// then `sweep.csv` (aggregated) and `runs.csv` (per run). A failing run
/// is recorded and the sweep carries on.
pub fn run_sweep(spec: &SweepSpec, base: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    spec.validate()?;
    let jobs: Vec<(f64, u64, ExperimentConfig, PathBuf)> = spec
        .values
        .iter()
        .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
        .map(|(v, s)| {
            let dir = out.join(format!("{}={}", spec.param.name(), value_label(v))).join(format!("seed={s}"));
            let mut cfg = spec.apply(base, v, s);
            cfg.output_dir = dir.clone();
            (v, s, cfg, dir)
        })
        .collect();
    for (_, _, cfg, _) in &jobs {
        cfg.validate()?;
    }
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    let runs: Vec<RunEntry> = with_pool(|| {
        jobs.into_par_iter()
            .map(|(value, seed, cfg, dir)| {
                let result = run_experiment(&cfg, &dir).map_err(|e| e.to_string());
                RunEntry { value, seed, dir, result }
            })
            .collect()
    })?;
    let report = SweepReport { param: spec.param.name().into(), rows: aggregate(&spec.values, &runs), runs };
    write_tables(&report, out)?;
    Ok(report)
}

pub const SWEEP_HEADER: &str = "param,value,runs,acc_mean,acc_std,asr_mean,asr_std";

fn write_tables(report: &SweepReport, out: &Path) -> Result<()> {
    let mut table = format!("{SWEEP_HEADER}\n");
    for r in &report.rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            report.param,
            value_label(r.value),
            r.runs,
            fmt_opt(r.acc_mean),
            fmt_opt(r.acc_std),
            fmt_opt(r.asr_mean),
            fmt_opt(r.asr_std)
        ));
    }
    let path = out.join(SWEEP_TABLE);
    std::fs::write(&path, table).map_err(HarnessError::io(&path))?;

    let mut runs = String::from("value,seed,status,rounds,final_acc,final_asr,mis,error\n");
    for r in &report.runs {
        match &r.result {
            Ok(s) => runs.push_str(&format!("{},{},ok,{},\n", value_label(r.value), r.seed, s.csv_row())),
            Err(e) => runs.push_str(&format!(
                "{},{},failed,NA,NA,NA,NA,\"{}\"\n",
                value_label(r.value),
                r.seed,
                e.replace('"', "'")
            )),
        }
    }
    let path = out.join(RUNS_TABLE);
    std::fs::write(&path, runs).map_err(HarnessError::io(&path))
}

/// One parsed line of `sweep.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTableRow {
    pub param: String,
    pub value: f64,
    pub acc_mean: Option<f64>,
    pub asr_mean: Option<f64>,
}

pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepTableRow>> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(HarnessError::format(path, "unexpected sweep table header"));
    }
    let parse = |s: &str| -> Option<Option<f64>> { if s == "NA" { Some(None) } else { s.parse().ok().map(Some) } };
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || HarnessError::format(path, format!("malformed row {}", i + 1));
            if f.len() != 7 {
                return Err(bad());
            }
            Ok(SweepTableRow {
                param: f[0].to_string(),
                value: f[1].parse().map_err(|_| bad())?,
                acc_mean: parse(f[3]).ok_or_else(bad)?,
                asr_mean: parse(f[5]).ok_or_else(bad)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]), (Some(4.0), Some(0.0)));
        assert_eq!(mean_std(&[]), (None, None));
    }

    #[test]
    fn failed_runs_do_not_enter_the_means() {
        let ok = |v, a| RunEntry {
            value: v,
            seed: 0,
            dir: PathBuf::new(),
            result: Ok(RunSummary { rounds: 1, final_acc: Some(a), final_asr: Some(0.0), mis: None }),
        };
        let runs = vec![
            ok(0.1, 0.5),
            ok(0.1, 0.7),
            RunEntry { value: 0.1, seed: 2, dir: PathBuf::new(), result: Err("boom".into()) },
        ];
        let rows = aggregate(&[0.1, 0.2], &runs);
        assert_eq!(rows[0].runs, 2);
        assert!((rows[0].acc_mean.unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(rows[1].runs, 0);
        assert_eq!(rows[1].acc_mean, None);
    }
}
