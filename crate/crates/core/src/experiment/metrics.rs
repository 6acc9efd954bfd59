use std::fs::File;
use std::path::{Path, PathBuf};

use super::ExperimentError;
use crate::engine::{Event, MetricsRecord};

/// Formats `x` with six significant digits in the style of C's `%g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV header for a run with `teachers` teachers.
pub fn header(teachers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "lr", "train_loss_main", "train_loss_distill"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..=teachers).map(|k| format!("train_acc_{k}")));
    h.push("test_acc".into());
    h.push("events".into());
    h
}

pub fn record_fields(r: &MetricsRecord) -> Vec<String> {
    let mut f = vec![
        r.epoch.to_string(),
        format_sig6(r.lr),
        format_sig6(r.train_loss_main),
        format_sig6(r.train_loss_distill),
    ];
    f.extend(r.train_acc.iter().map(|a| format_sig6(*a)));
    f.push(format_sig6(r.test_acc));
    let events: Vec<String> = r.events.iter().map(ToString::to_string).collect();
    f.push(events.join(";"));
    f
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends metrics rows to `metrics.csv`, flushing after every row so a
/// failed run keeps everything written so far.
pub struct MetricsWriter {
    path: PathBuf,
    teachers: usize,
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path, teachers: usize) -> Result<Self, ExperimentError> {
        let mut inner = csv::Writer::from_path(path).map_err(csv_err(path))?;
        inner.write_record(header(teachers)).map_err(csv_err(path))?;
        let mut w = Self {
            path: path.to_path_buf(),
            teachers,
            inner,
        };
        w.flush()?;
        Ok(w)
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<(), ExperimentError> {
        if r.train_acc.len() != self.teachers + 1 {
            return Err(ExperimentError::Invalid(format!(
                "record has {} accuracies, header has {}",
                r.train_acc.len(),
                self.teachers + 1
            )));
        }
        self.inner
            .write_record(record_fields(r))
            .map_err(csv_err(&self.path))?;
        self.flush()
    }

    fn flush(&mut self) -> Result<(), ExperimentError> {
        self.inner.flush().map_err(|source| ExperimentError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Metrics {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a metrics file written by [`MetricsWriter`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let head: Vec<String> = rdr
        .headers()
        .map_err(csv_err(path))?
        .iter()
        .map(str::to_string)
        .collect();
    if head.len() < 7 {
        return Err(malformed(path, "header too short"));
    }
    let teachers = head.len() - 7;
    if head != header(teachers) {
        return Err(malformed(path, format!("unexpected header {head:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(csv_err(path))?;
        let num = |j: usize| -> Result<f64, ExperimentError> {
            row[j]
                .parse()
                .map_err(|_| malformed(path, format!("row {}: bad number {:?}", i + 1, &row[j])))
        };
        let epoch = row[0]
            .parse()
            .map_err(|_| malformed(path, format!("row {}: bad epoch {:?}", i + 1, &row[0])))?;
        let train_acc = (4..5 + teachers).map(num).collect::<Result<_, _>>()?;
        let events = row[6 + teachers]
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Event>().map_err(|e| malformed(path, e)))
            .collect::<Result<_, _>>()?;
        out.push(MetricsRecord {
            epoch,
            lr: num(1)?,
            train_loss_main: num(2)?,
            train_loss_distill: num(3)?,
            train_acc,
            test_acc: num(5 + teachers)?,
            events,
        });
    }
    Ok(out)
}
