use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::run::{final_test_acc, is_complete, run_dir, run_single};
use super::stats::{aggregate_seeds, format_pm};
use super::ExperimentError;
use crate::engine::ResetMode;

pub const SUMMARY_FILE: &str = "summary.csv";

/// Teacher counts, cycle lengths and number of seeds to sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub teachers: Vec<usize>,
    pub cycles: Vec<usize>,
    /// Seeds `base.seed .. base.seed + seeds`.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub teachers: usize,
    pub cycle: usize,
    pub runs: Vec<PathBuf>,
    /// Final test accuracy of each successful run, in seed order.
    pub finals: Vec<f64>,
    pub failures: Vec<String>,
}

impl GridCell {
    /// `mean ± std` of the final test accuracy in percent.
    pub fn summary(&self) -> String {
        let pct: Vec<f64> = self.finals.iter().map(|a| a * 100.0).collect();
        match aggregate_seeds(&pct) {
            Ok((m, s)) => format_pm(m, s),
            Err(_) if pct.len() == 1 => format!("{:.2} ± n/a", pct[0]),
            Err(_) => "failed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSummary {
    pub label: String,
    pub reset: ResetMode,
    pub cells: Vec<GridCell>,
    pub path: PathBuf,
}

impl GridSummary {
    pub fn header(&self) -> Vec<String> {
        vec!["K".into(), "R".into(), "T_cycle".into(), "M".into(), self.label.clone()]
    }

    pub fn rows(&self) -> Vec<Vec<String>> {
        let r = u8::from(self.reset != ResetMode::Off);
        let m = u8::from(self.reset == ResetMode::Mean);
        self.cells
            .iter()
            .map(|c| {
                vec![
                    c.teachers.to_string(),
                    r.to_string(),
                    c.cycle.to_string(),
                    m.to_string(),
                    c.summary(),
                ]
            })
            .collect()
    }

    fn write(&self) -> Result<(), ExperimentError> {
        let csv_err = |source| ExperimentError::Csv {
            path: self.path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&self.path).map_err(csv_err)?;
        w.write_record(self.header()).map_err(csv_err)?;
        for row in self.rows() {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|source| ExperimentError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Runs every `(K, T, seed)` cell, skipping run directories that already
/// hold a completed run, and writes `summary.csv` into `base.out`. A failed
/// cell is recorded and the sweep continues.
pub fn grid_search(
    base: &RunConfig,
    spec: &GridSpec,
    mut progress: impl FnMut(&str),
) -> Result<GridSummary, ExperimentError> {
    if spec.teachers.is_empty() || spec.cycles.is_empty() || spec.seeds == 0 {
        return Err(ExperimentError::Invalid(
            "grid needs at least one K, one T and one seed".into(),
        ));
    }
    let mut cells = Vec::new();
    for &k in &spec.teachers {
        for &t in &spec.cycles {
            let mut cell = GridCell {
                teachers: k,
                cycle: t,
                runs: Vec::new(),
                finals: Vec::new(),
                failures: Vec::new(),
            };
            for i in 0..spec.seeds as u64 {
                let mut cfg = base.clone();
                cfg.dfl.teachers = k;
                cfg.dfl.update_every = t;
                cfg.dfl.reset_every = t;
                cfg.seed = base.seed + i;
                let dir = run_dir(&cfg);
                let outcome = if is_complete(&dir) {
                    progress(&format!("K={k} T={t} seed={}: reusing {}", cfg.seed, dir.display()));
                    final_test_acc(&dir)
                } else {
                    progress(&format!("K={k} T={t} seed={}: running", cfg.seed));
                    run_single(&cfg, |_| {}).and_then(|o| final_test_acc(&o.dir))
                };
                cell.runs.push(dir);
                match outcome {
                    Ok(acc) => cell.finals.push(acc),
                    Err(e) => {
                        progress(&format!("K={k} T={t} seed={}: failed: {e}", cfg.seed));
                        cell.failures.push(e.to_string());
                    }
                }
            }
            cells.push(cell);
        }
    }
    std::fs::create_dir_all(&base.out).map_err(|source| ExperimentError::Io {
        path: base.out.clone(),
        source,
    })?;
    let summary = GridSummary {
        label: base.arch.label(),
        reset: base.dfl.reset,
        cells,
        path: base.out.join(SUMMARY_FILE),
    };
    summary.write()?;
    Ok(summary)
}

/// Final test accuracies of the given run directories.
pub fn collect_finals(dirs: &[impl AsRef<Path>]) -> Result<Vec<f64>, ExperimentError> {
    dirs.iter().map(|d| final_test_acc(d.as_ref())).collect()
}
