//! Plot-ready CSV tables and versioned JSON for the experiment reports.
//!
//! CSV columns:
//!
//! * sweep `runs`: `pe_cycles,solver,converged,stopped_by_step,iterations,final_cost,clamp_events,rejected_steps,rank_deficient,lambda,sigma_p,sigma_e,gamma_sigma_r,gamma_mu_r,error`
//! * sweep `gamma_mu_r`: `pe_cycles,solver,truth_gamma_mu_r,estimate_gamma_mu_r`
//! * binning `binning`: `pe_cycles,strategy,M,de2,effective_resolution,mutual_information_bits`
//! * read-count `iterations`: `M,reads,solver,runs,converged,min,mean,max,std`
//! * read-count `convergence`: `reads,M` followed by one count column per solver

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinningStudy, ReadCountStudy, SweepReport};
use crate::error::{Error, Result};

/// Bumped whenever a JSON report field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &'static str, header: &[&str]) -> Self {
        Self {
            name,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Numeric {
            routine: "csv writer",
            detail: e.to_string(),
        };
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Numeric {
            routine: "csv writer",
            detail: e.to_string(),
        })?;
        Ok(())
    }
}

/// A report with a JSON form and one or more CSV tables.
pub trait Report: Serialize {
    /// The first table is the primary one.
    fn tables(&self) -> Vec<Table>;
}

fn num(x: f64) -> String {
    x.to_string()
}

impl Report for SweepReport {
    fn tables(&self) -> Vec<Table> {
        let mut runs = Table::new(
            "runs",
            &[
                "pe_cycles",
                "solver",
                "converged",
                "stopped_by_step",
                "iterations",
                "final_cost",
                "clamp_events",
                "rejected_steps",
                "rank_deficient",
                "lambda",
                "sigma_p",
                "sigma_e",
                "gamma_sigma_r",
                "gamma_mu_r",
                "error",
            ],
        );
        let mut gamma = Table::new(
            "gamma_mu_r",
            &["pe_cycles", "solver", "truth_gamma_mu_r", "estimate_gamma_mu_r"],
        );
        for c in &self.conditions {
            if let Some(err) = &c.error {
                let mut row = vec![c.pe_cycles.to_string(), String::new()];
                row.extend(std::iter::repeat_n(String::new(), 12));
                row.push(err.clone());
                runs.rows.push(row);
                continue;
            }
            for run in &c.runs {
                let mut row = vec![
                    c.pe_cycles.to_string(),
                    run.solver.name().to_string(),
                    run.converged().to_string(),
                ];
                match &run.report {
                    Some(r) => {
                        row.extend([
                            r.converged_by_step.to_string(),
                            r.iterations.to_string(),
                            num(r.final_cost()),
                            r.clamp_events.to_string(),
                            r.rejected_steps.to_string(),
                            r.rank_deficient.to_string(),
                        ]);
                        row.extend(r.estimate.to_array().map(num));
                        gamma.rows.push(vec![
                            c.pe_cycles.to_string(),
                            run.solver.name().to_string(),
                            num(c.truth.gamma_mu_r),
                            num(r.estimate.gamma_mu_r),
                        ]);
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 11)),
                }
                row.push(run.error.clone().unwrap_or_default());
                runs.rows.push(row);
            }
        }
        vec![runs, gamma]
    }
}

impl Report for BinningStudy {
    fn tables(&self) -> Vec<Table> {
        let mut t = Table::new(
            "binning",
            &[
                "pe_cycles",
                "strategy",
                "M",
                "de2",
                "effective_resolution",
                "mutual_information_bits",
            ],
        );
        for r in &self.rows {
            t.rows.push(vec![
                r.pe_cycles.to_string(),
                r.strategy.name().to_string(),
                r.m.to_string(),
                num(r.de2),
                r.effective_resolution.to_string(),
                num(r.mutual_information),
            ]);
        }
        vec![t]
    }
}

impl Report for ReadCountStudy {
    fn tables(&self) -> Vec<Table> {
        let mut iters = Table::new(
            "iterations",
            &["M", "reads", "solver", "runs", "converged", "min", "mean", "max", "std"],
        );
        let mut header = vec!["reads", "M"];
        header.extend(self.spec.solvers.iter().map(|s| s.name()));
        let mut conv = Table::new("convergence", &header);
        for e in &self.entries {
            let mut crow = vec![e.reads.to_string(), e.m.to_string()];
            for s in &e.summaries {
                let mut row = vec![
                    e.m.to_string(),
                    e.reads.to_string(),
                    s.solver.name().to_string(),
                    s.iterations.len().to_string(),
                    s.converged.to_string(),
                ];
                match &s.iteration_stats {
                    Some(st) => row.extend([st.min.to_string(), num(st.mean), st.max.to_string(), num(st.std)]),
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
                iters.rows.push(row);
                crow.push(s.converged.to_string());
            }
            conv.rows.push(crow);
        }
        vec![iters, conv]
    }
}

/// Writes `report` to `path`.
///
/// JSON goes to `path` as one document. CSV writes the primary table to
/// `path` and every further table next to it as `<stem>_<table>.csv`.
/// Returns the files written.
pub fn emit_report<R: Report>(report: &R, format: ReportFormat, path: &Path) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Json => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            serde_json::to_writer_pretty(&mut w, report).map_err(|e| Error::Numeric {
                routine: "json writer",
                detail: e.to_string(),
            })?;
            w.write_all(b"\n")
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path, e))?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let mut written = Vec::new();
            for (i, table) in report.tables().iter().enumerate() {
                let target = if i == 0 {
                    path.to_path_buf()
                } else {
                    path.with_file_name(format!("{stem}_{}.csv", table.name))
                };
                let file = File::create(&target).map_err(|e| Error::io(&target, e))?;
                table.write_csv(BufWriter::new(file))?;
                written.push(target);
            }
            Ok(written)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn tiny() -> ExperimentSpec {
        ExperimentSpec {
            trajectory: synthetic_trajectory().into_iter().skip(10).take(2).collect(),
            study_bins: vec![7, 10],
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn sweep_json_round_trips() {
        let r = run_sweep(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.json");
        emit_report(&r, ReportFormat::Json, &path).unwrap();
        let back: SweepReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.schema_version, SCHEMA_VERSION);
    }

    #[test]
    fn sweep_csv_tables() {
        let r = run_sweep(&tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&r, ReportFormat::Csv, &dir.path().join("sweep.csv")).unwrap();
        assert_eq!(files.len(), 2);
        let runs = std::fs::read_to_string(&files[0]).unwrap();
        assert!(runs.starts_with("pe_cycles,solver,converged,stopped_by_step,iterations"));
        assert_eq!(runs.lines().count(), 1 + 2 * 3);
        let gamma = std::fs::read_to_string(dir.path().join("sweep_gamma_mu_r.csv")).unwrap();
        assert!(gamma.starts_with("pe_cycles,solver,truth_gamma_mu_r,estimate_gamma_mu_r\n"));
        assert!(gamma.contains("3000,lm,-0.5882,"));
    }

    #[test]
    fn convergence_table_has_one_row_per_read_count() {
        let study = run_read_count_study(&tiny()).unwrap();
        let tables = study.tables();
        let conv = &tables[1];
        assert_eq!(conv.header, ["reads", "M", "gd", "gn", "lm"]);
        assert_eq!(conv.rows.len(), 2);
        assert_eq!(conv.rows[0][..2], ["6".to_string(), "7".to_string()]);
        let back: ReadCountStudy = serde_json::from_str(&serde_json::to_string(&study).unwrap()).unwrap();
        assert_eq!(back, study);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let r = run_sweep(&ExperimentSpec {
            solvers: vec![SolverKind::Lm],
            ..tiny()
        })
        .unwrap();
        let bad = Path::new("/nonexistent-dir/x/report.json");
        let msg = emit_report(&r, ReportFormat::Json, bad).unwrap_err().to_string();
        assert!(msg.contains("/nonexistent-dir/x/report.json"), "{msg}");
    }
}
