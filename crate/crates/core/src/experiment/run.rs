use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{DatasetKind, RunConfig};
use super::metrics::{format_sig6, read_metrics, MetricsWriter};
use super::ExperimentError;
use crate::data::{
    load_cifar, synthetic_blobs, Augmentation, BatchPlan, Dataset, Normalization, Split,
    SyntheticSpec,
};
use crate::engine::{EpochReport, MetricsRecord, Trainer};
use crate::model::{build_model, write_checkpoint, Model};
use crate::optim::{LrSchedule, Sgd};

pub const DATA_DIR_ENV: &str = "DFL_DATA_DIR";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.log";
pub const CONFIG_FILE: &str = "effective-config.txt";
pub const CHECKPOINT_FILE: &str = "model.dflm";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Dataset root: the config's `data_dir`, else `$DFL_DATA_DIR`, else `./data`.
pub fn resolve_data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), ExperimentError> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let s = &cfg.synthetic;
            let spec = |n| SyntheticSpec {
                n_per_class: n,
                classes: s.classes,
                shape: s.shape,
                spread: s.spread,
                seed: s.seed,
            };
            Ok((
                synthetic_blobs(&spec(s.train_per_class), Split::Train)?,
                synthetic_blobs(&spec(s.test_per_class), Split::Test)?,
            ))
        }
        DatasetKind::Cifar(variant) => Ok(load_cifar(&resolve_data_dir(cfg), variant)?),
    }
}

/// Directory of a run: `<out>/run-<fingerprint>`.
pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(format!("run-{}", cfg.fingerprint()))
}

/// A run is complete once its checkpoint has been written.
pub fn is_complete(dir: &Path) -> bool {
    dir.join(CHECKPOINT_FILE).is_file() && dir.join(METRICS_FILE).is_file()
}

/// Test accuracy of the last epoch recorded in `dir`.
pub fn final_test_acc(dir: &Path) -> Result<f64, ExperimentError> {
    let path = dir.join(METRICS_FILE);
    read_metrics(&path)?
        .last()
        .map(|r| r.test_acc)
        .ok_or_else(|| ExperimentError::Metrics {
            path,
            reason: "no epochs recorded".into(),
        })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<MetricsRecord>,
}

struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLog {
    fn create(path: PathBuf) -> Result<Self, ExperimentError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    fn line(&mut self, text: &str) -> Result<(), ExperimentError> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(io_err(&self.path))
    }

    fn epoch(&mut self, report: &EpochReport, cfg: &RunConfig) -> Result<(), ExperimentError> {
        let epoch = report.record.epoch;
        if let Some(u) = &report.update {
            let p: Vec<String> = u.teacher_accuracies.iter().map(|a| format_sig6(*a)).collect();
            self.line(&format!(
                "epoch {epoch} update teacher={} p0={} p=[{}] {}",
                u.teacher,
                format_sig6(u.student_accuracy),
                p.join(","),
                if u.replaced { "replaced" } else { "kept" }
            ))?;
        }
        if report.record.events.contains(&crate::engine::Event::Reset) {
            self.line(&format!("epoch {epoch} reset {}", cfg.dfl.reset))?;
        }
        Ok(())
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format_sig6(*x)).collect();
    format!("[{}]", parts.join(","))
}

/// Builds the model for `cfg` on data shaped like `train`.
pub fn build_for(cfg: &RunConfig, train: &Dataset) -> Result<Model, ExperimentError> {
    let specs = cfg.arch.specs(train.sample_shape(), train.classes())?;
    Ok(build_model(
        train.sample_shape(),
        &specs,
        cfg.dfl.head_len,
        cfg.init,
        cfg.seed,
    )?)
}

/// Trains one configuration and writes its run directory. `on_epoch` sees
/// every metrics row as soon as it is written.
pub fn run_single(
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let dir = run_dir(cfg);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        fs::remove_file(&ckpt).map_err(io_err(&ckpt))?;
    }
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.render()).map_err(io_err(&cfg_path))?;
    let mut log = EventLog::create(dir.join(EVENTS_FILE))?;

    let (train, test) = load_datasets(cfg)?;
    log.line(&format!(
        "dataset train={} test={} classes={} sample={:?}",
        train.len(),
        test.len(),
        train.classes(),
        train.sample_shape()
    ))?;
    let normalization = cfg.normalize.then(|| Normalization::from_dataset(&train));
    if let Some(n) = &normalization {
        log.line(&format!("normalization mean={} std={}", fmt_list(&n.mean), fmt_list(&n.std)))?;
    }
    let augmentation = if train.is_image() {
        cfg.augmentation
    } else {
        Augmentation::default()
    };
    if augmentation.any() {
        log.line(&format!(
            "augmentation crop_pad4={} hflip={} (assumed baseline defaults)",
            augmentation.crop_pad4, augmentation.hflip
        ))?;
    }

    let model = build_for(cfg, &train)?;
    let sgd = Sgd::new(model.params(), cfg.momentum, cfg.weight_decay)?;
    let plan = BatchPlan {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        drop_last: false,
        augmentation,
        normalization,
    };
    let schedule = LrSchedule::new(
        cfg.lr,
        cfg.warmup_epochs,
        cfg.milestones.clone(),
        cfg.gamma,
        plan.batches_per_epoch(train.len()),
    )?;
    let mut trainer = Trainer::new(model, cfg.dfl, sgd, schedule, plan, cfg.seed)?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS_FILE), cfg.dfl.teachers)?;
    let mut records = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let report = match trainer.run_epoch(&train, &test) {
            Ok(r) => r,
            Err(e) => {
                log.line(&format!("abort after epoch {}: {e}", trainer.epoch()))?;
                return Err(e.into());
            }
        };
        writer.write(&report.record)?;
        log.epoch(&report, cfg)?;
        on_epoch(&report.record);
        records.push(report.record);
    }

    let tmp = dir.join("model.dflm.tmp");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(trainer.model(), &mut out)?;
    out.flush().map_err(io_err(&tmp))?;
    fs::rename(&tmp, &ckpt).map_err(io_err(&ckpt))?;
    log.line(&format!("completed {} epochs", cfg.epochs))?;
    Ok(RunOutcome { dir, records })
}
