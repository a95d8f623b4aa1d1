//! Parameter sweeps over misaligned count, local steps and heterogeneity.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::analysis::{growth_summary, mean, std_dev, GrowthRow};
use crate::config::{Misalignment, RunConfig};
use crate::csvio::{fmt_f64, Table};
use crate::error::{Error, Result};

use super::{artifacts, execute, write_files, RunOutcome};

pub const PRESETS: &[&str] = &["fig2a", "fig2b", "fig2c", "fig3"];

const TAU_GRID: [f64; 6] = [1.0, 5.0, 10.0, 25.0, 50.0, 100.0];
const H_GRID: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    MisalignedCount,
    Tau,
    H,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "misaligned_count" | "misaligned" => Ok(Axis::MisalignedCount),
            "tau" => Ok(Axis::Tau),
            "h" => Ok(Axis::H),
            _ => Err(Error::Usage(format!(
                "unknown sweep axis {s:?}; expected misaligned_count, tau or h"
            ))),
        }
    }

    fn as_count(value: f64, what: &str) -> Result<usize> {
        if value >= 0.0 && value.fract() == 0.0 && value <= usize::MAX as f64 {
            Ok(value as usize)
        } else {
            Err(Error::Usage(format!("{what} must be a nonnegative integer, got {value}")))
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            Axis::MisalignedCount => {
                cfg.misaligned = Misalignment::per_class(Self::as_count(value, "misaligned count")?)
            }
            Axis::Tau => cfg.tau = Self::as_count(value, "tau")?,
            Axis::H => cfg.h = value,
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn format_value(self, value: f64) -> String {
        match self {
            Axis::MisalignedCount | Axis::Tau => format!("{}", value as usize),
            Axis::H => fmt_f64(value),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::MisalignedCount => "misaligned_count",
            Axis::Tau => "tau",
            Axis::H => "h",
        })
    }
}

/// One curve of a sweep: a label and the configuration the axis is applied to.
#[derive(Clone, Debug)]
pub struct SweepSeries {
    pub label: String,
    pub base: RunConfig,
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub name: String,
    pub axis: Axis,
    pub values: Vec<f64>,
    pub series: Vec<SweepSeries>,
    /// Seeds `base_seed, base_seed + 1, ...`, shared by every value.
    pub repeats: usize,
    pub base_seed: u64,
    /// Keep the final-round coefficients of every run.
    pub dump_ledger: bool,
}

impl SweepSpec {
    /// A single-series sweep of `axis` over `values` on top of `base`.
    pub fn custom(base: &RunConfig, axis: Axis, values: Vec<f64>, repeats: usize) -> Result<Self> {
        let spec = SweepSpec {
            name: "custom".into(),
            axis,
            values,
            series: vec![SweepSeries {
                label: "base".into(),
                base: base.clone(),
            }],
            repeats,
            base_seed: base.seeds[0],
            dump_ledger: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Usage(format!("sweep {} has no axis values", self.name)));
        }
        if self.repeats == 0 {
            return Err(Error::Usage("sweep needs at least one repeat".into()));
        }
        for s in &self.series {
            for &v in &self.values {
                self.axis.apply(&s.base, v)?;
            }
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.base_seed.wrapping_add(r)).collect()
    }
}

fn series(label: String, base: RunConfig) -> SweepSeries {
    SweepSeries { label, base }
}

/// Figure-protocol presets built on `base`; `fig3` trains for exactly one
/// round without early stopping.
pub fn preset(name: &str, base: &RunConfig, repeats: usize) -> Result<SweepSpec> {
    base.validate()?;
    let half = base.m / 2;
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let misaligned_series = |tau_h: &dyn Fn(&mut RunConfig)| {
        [0, half]
            .into_iter()
            .map(|c| {
                series(
                    format!("misaligned={c}"),
                    with(&|cfg| {
                        tau_h(cfg);
                        cfg.misaligned = Misalignment::per_class(c);
                    }),
                )
            })
            .collect::<Vec<_>>()
    };
    let (axis, values, series_list, dump_ledger) = match name {
        "fig2a" => (
            Axis::MisalignedCount,
            (0..=base.m).map(|c| c as f64).collect(),
            [0.0, 0.5]
                .into_iter()
                .map(|h| {
                    series(
                        format!("h={h}"),
                        with(&|c| {
                            c.h = h;
                            c.tau = 100;
                        }),
                    )
                })
                .collect(),
            false,
        ),
        "fig2b" => (Axis::Tau, TAU_GRID.to_vec(), misaligned_series(&|c| c.h = 0.0), false),
        "fig2c" => (Axis::H, H_GRID.to_vec(), misaligned_series(&|c| c.tau = 100), false),
        "fig3" => (
            Axis::Tau,
            TAU_GRID.to_vec(),
            [0.0, 0.5]
                .into_iter()
                .map(|h| {
                    series(
                        format!("h={h}"),
                        with(&|c| {
                            c.h = h;
                            c.rounds = 1;
                            c.early_stop = false;
                            c.misaligned = Misalignment::per_class(half);
                        }),
                    )
                })
                .collect(),
            true,
        ),
        _ => {
            return Err(Error::Usage(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let spec = SweepSpec {
        name: name.to_string(),
        axis,
        values,
        series: series_list,
        repeats,
        base_seed: base.seeds[0],
        dump_ledger,
    };
    spec.validate()?;
    Ok(spec)
}

/// Per-run result kept by a sweep.
#[derive(Clone, Debug)]
pub enum RunStatus {
    Ok {
        final_test_error: f64,
        test_error_stderr: f64,
        final_train_loss: f64,
        stop_round: usize,
        reached_epsilon: Option<bool>,
        /// Final-round coefficient rows when the spec dumps the ledger.
        ledger: Vec<GrowthRow>,
    },
    Failed(String),
}

#[derive(Clone, Debug)]
pub struct SweepRun {
    pub series: String,
    pub value: f64,
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub status: RunStatus,
}

impl SweepRun {
    pub fn test_error(&self) -> Option<f64> {
        match self.status {
            RunStatus::Ok { final_test_error, .. } => Some(final_test_error),
            RunStatus::Failed(_) => None,
        }
    }
}

/// Aggregate over the seeds of one `(series, value)` cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub series: String,
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub reached_epsilon: usize,
    pub mean_test_error: f64,
    pub std_test_error: f64,
    pub mean_stop_round: f64,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub name: String,
    pub axis: Axis,
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn row(&self, series: &str, value: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.series == series && r.value == value)
    }

    /// Seed-mean test error along the axis for one series.
    pub fn curve(&self, series: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.series == series)
            .map(|r| (r.value, r.mean_test_error))
            .collect()
    }

    pub fn aggregate_table(&self) -> Table {
        let mut t = Table::new(&[
            "series",
            "axis",
            "value",
            "runs",
            "failures",
            "reached_epsilon",
            "mean_test_error",
            "std_test_error",
            "mean_stop_round",
        ]);
        for r in &self.rows {
            t.row(vec![
                r.series.clone(),
                self.axis.to_string(),
                self.axis.format_value(r.value),
                r.runs.to_string(),
                r.failures.to_string(),
                r.reached_epsilon.to_string(),
                fmt_f64(r.mean_test_error),
                fmt_f64(r.std_test_error),
                fmt_f64(r.mean_stop_round),
            ]);
        }
        t
    }

    pub fn runs_table(&self) -> Table {
        let mut t = Table::new(&[
            "series",
            "axis",
            "value",
            "seed",
            "status",
            "final_test_error",
            "test_error_stderr",
            "final_train_loss",
            "stop_round",
            "reached_epsilon",
            "run_dir",
        ]);
        for run in &self.runs {
            let dir = run.dir.as_ref().map_or(String::new(), |d| d.display().to_string());
            let mut row = vec![
                run.series.clone(),
                self.axis.to_string(),
                self.axis.format_value(run.value),
                run.seed.to_string(),
            ];
            match &run.status {
                RunStatus::Ok {
                    final_test_error,
                    test_error_stderr,
                    final_train_loss,
                    stop_round,
                    reached_epsilon,
                    ..
                } => row.extend([
                    "ok".to_string(),
                    fmt_f64(*final_test_error),
                    fmt_f64(*test_error_stderr),
                    fmt_f64(*final_train_loss),
                    stop_round.to_string(),
                    reached_epsilon.map_or("disabled".to_string(), |b| b.to_string()),
                ]),
                RunStatus::Failed(msg) => row.extend([
                    format!("failed: {}", msg.replace([',', '\n'], ";")),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]),
            }
            row.push(dir);
            t.row(row);
        }
        t
    }

    /// Final-round coefficients of every run, for sweeps that dump the ledger.
    pub fn ledger_table(&self) -> Table {
        let mut t = Table::new(&[
            "series",
            "axis",
            "value",
            "seed",
            "round",
            "j",
            "r",
            "gamma",
            "sum_pbar",
            "ratio_or_flag",
            "aligned_at_init",
        ]);
        for run in &self.runs {
            if let RunStatus::Ok { ledger, .. } = &run.status {
                for g in ledger {
                    t.row(vec![
                        run.series.clone(),
                        self.axis.to_string(),
                        self.axis.format_value(run.value),
                        run.seed.to_string(),
                        g.round.to_string(),
                        g.j.to_string(),
                        g.r.to_string(),
                        fmt_f64(g.gamma),
                        fmt_f64(g.sum_pbar),
                        g.ratio.to_string(),
                        if g.aligned_at_init { "1" } else { "0" }.to_string(),
                    ]);
                }
            }
        }
        t
    }

    /// Writes `sweep.csv`, `runs.csv` and, when present, `ledger.csv`.
    pub fn write(&self, dir: &Path, dump_ledger: bool) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.aggregate_table().write(&dir.join("sweep.csv"))?;
        self.runs_table().write(&dir.join("runs.csv"))?;
        if dump_ledger {
            self.ledger_table().write(&dir.join("ledger.csv"))?;
        }
        Ok(())
    }
}

fn summarize(out: &RunOutcome, dump_ledger: bool) -> RunStatus {
    let ledger = if dump_ledger {
        let last = out.stop_round();
        growth_summary(&out.train.ledger, &out.init_alignment)
            .into_iter()
            .filter(|g| g.round == last)
            .collect()
    } else {
        Vec::new()
    };
    let err = out.final_test_error();
    RunStatus::Ok {
        final_test_error: err.error,
        test_error_stderr: err.stderr,
        final_train_loss: out.train.final_loss(),
        stop_round: out.stop_round(),
        reached_epsilon: out.train.reached_target,
        ledger,
    }
}

fn run_dir(root: &Path, spec: &SweepSpec, series: &str, value: f64, seed: u64) -> PathBuf {
    root.join("runs")
        .join(series)
        .join(format!("{}={}", spec.axis, spec.axis.format_value(value)))
        .join(format!("seed_{seed}"))
}

/// Runs every `(series, value, seed)` in parallel and aggregates per cell.
/// With `out`, each run also writes its own directory under `out/runs`.
/// Failed runs are recorded, not propagated.
pub fn run_sweep(spec: &SweepSpec, out: Option<&Path>) -> Result<SweepReport> {
    spec.validate()?;
    let seeds = spec.seeds();
    let mut jobs: Vec<(&SweepSeries, f64, u64)> = Vec::new();
    for s in &spec.series {
        for &v in &spec.values {
            jobs.extend(seeds.iter().map(|&seed| (s, v, seed)));
        }
    }

    let runs: Vec<SweepRun> = jobs
        .par_iter()
        .map(|&(s, value, seed)| {
            let dir = out.map(|root| run_dir(root, spec, &s.label, value, seed));
            let status = spec.axis.apply(&s.base, value).and_then(|cfg| {
                let outcome = execute(&cfg, seed)?;
                if let Some(d) = &dir {
                    write_files(d, &artifacts(&outcome))?;
                }
                Ok(summarize(&outcome, spec.dump_ledger))
            });
            SweepRun {
                series: s.label.clone(),
                value,
                seed,
                dir,
                status: status.unwrap_or_else(|e| RunStatus::Failed(e.to_string())),
            }
        })
        .collect();

    let mut rows = Vec::new();
    for s in &spec.series {
        for &value in &spec.values {
            let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.series == s.label && r.value == value).collect();
            let errors: Vec<f64> = cell.iter().filter_map(|r| r.test_error()).collect();
            let stops: Vec<f64> = cell
                .iter()
                .filter_map(|r| match r.status {
                    RunStatus::Ok { stop_round, .. } => Some(stop_round as f64),
                    RunStatus::Failed(_) => None,
                })
                .collect();
            let reached = cell
                .iter()
                .filter(|r| matches!(r.status, RunStatus::Ok { reached_epsilon: Some(true), .. }))
                .count();
            rows.push(SweepRow {
                series: s.label.clone(),
                value,
                runs: cell.len(),
                failures: cell.len() - errors.len(),
                reached_epsilon: reached,
                mean_test_error: if errors.is_empty() { f64::NAN } else { mean(&errors) },
                std_test_error: std_dev(&errors),
                mean_stop_round: if stops.is_empty() { f64::NAN } else { mean(&stops) },
            });
        }
    }
    let report = SweepReport {
        name: spec.name.clone(),
        axis: spec.axis,
        runs,
        rows,
    };
    if let Some(root) = out {
        report.write(root, spec.dump_ledger)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRow {
    pub eta: f64,
    pub runs: usize,
    /// Runs that failed, divergence or otherwise.
    pub failures: usize,
}

pub const ETA_GRID: [f64; 3] = [1e-2, 3e-2, 1e-1];

/// Runs the three figure-2 presets at every step size in the grid and
/// returns the largest one without a failed run, plus the per-step tallies.
pub fn calibrate_eta(base: &RunConfig, repeats: usize) -> Result<(f64, Vec<CalibrationRow>)> {
    let mut rows = Vec::new();
    for &eta in &ETA_GRID {
        let cfg = RunConfig { eta, ..base.clone() };
        let mut runs = 0;
        let mut failures = 0;
        for name in ["fig2a", "fig2b", "fig2c"] {
            let report = run_sweep(&preset(name, &cfg, repeats)?, None)?;
            runs += report.runs.len();
            failures += report.runs.iter().filter(|r| r.test_error().is_none()).count();
        }
        rows.push(CalibrationRow { eta, runs, failures });
    }
    let best = rows
        .iter()
        .filter(|r| r.failures == 0)
        .map(|r| r.eta)
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))))
        .ok_or_else(|| Error::Usage("every step size in the calibration grid failed".into()))?;
    Ok((best, rows))
}
