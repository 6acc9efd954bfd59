use std::fmt;
use std::str::FromStr;

use super::{
    compute_total_loss, forward_all, init_pool, reset_student, DflConfig, EngineError,
    ReplacementReport, ResetMode, TeacherPool,
};
use crate::data::{iterate_epoch, Augmentation, BatchPlan, Dataset};
use crate::model::Model;
use crate::optim::{LrSchedule, Sgd};
use crate::rng::{self, Purpose};
use crate::tensor::{Graph, Tensor};

/// Boundary event recorded in a [`MetricsRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// A teacher update considered teacher `teacher` and replaced it or not.
    Update { teacher: usize, replaced: bool },
    Reset,
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Update {
                teacher,
                replaced: true,
            } => write!(f, "replace:{teacher}"),
            Event::Update {
                teacher,
                replaced: false,
            } => write!(f, "keep:{teacher}"),
            Event::Reset => f.write_str("reset"),
        }
    }
}

impl FromStr for Event {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "reset" {
            return Ok(Event::Reset);
        }
        let (kind, k) = s.split_once(':').ok_or_else(|| format!("bad event {s:?}"))?;
        let teacher = k.parse().map_err(|_| format!("bad teacher index in {s:?}"))?;
        match kind {
            "replace" => Ok(Event::Update {
                teacher,
                replaced: true,
            }),
            "keep" => Ok(Event::Update {
                teacher,
                replaced: false,
            }),
            _ => Err(format!("bad event {s:?}")),
        }
    }
}

/// One row of per-epoch training metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Sample-weighted mean cross-entropy of the student.
    pub train_loss_main: f64,
    /// Sample-weighted mean over batches of the teacher-averaged KL term.
    pub train_loss_distill: f64,
    /// Training accuracy of the student followed by each teacher.
    pub train_acc: Vec<f64>,
    /// Student accuracy on the test split, measured before boundary events.
    pub test_acc: f64,
    pub events: Vec<Event>,
}

/// A metrics row plus the full teacher-update report, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub record: MetricsRecord,
    pub update: Option<ReplacementReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub loss_main: f64,
    /// Mean of the per-teacher KL terms; zero without teachers.
    pub loss_distill: f64,
}

/// Student accuracy on `ds`, in dataset order without augmentation.
pub fn evaluate(model: &Model, ds: &Dataset, plan: &BatchPlan) -> Result<f64, EngineError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let plan = BatchPlan {
        augmentation: Augmentation::default(),
        drop_last: false,
        ..plan.clone()
    };
    let mut correct = 0;
    for batch in iterate_epoch(ds, &plan, 0) {
        let logits = model.predict(&batch.x)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

fn check_params(model: &Model, grads: bool) -> Result<(), EngineError> {
    for (i, p) in model.params().enumerate() {
        let (finite, what) = if grads {
            (p.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())), "gradient of parameter")
        } else {
            (p.is_finite(), "parameter")
        };
        if !finite {
            return Err(EngineError::NonFinite {
                step: 0,
                tensor: format!("{what} {i}"),
            });
        }
    }
    Ok(())
}

/// Owns everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: Model,
    pool: TeacherPool,
    sgd: Sgd,
    schedule: LrSchedule,
    plan: BatchPlan,
    cfg: DflConfig,
    seed: u64,
    step: usize,
    epoch: usize,
    resets: u64,
}

impl Trainer {
    /// Starts a run with a freshly drawn teacher pool.
    pub fn new(
        model: Model,
        cfg: DflConfig,
        sgd: Sgd,
        schedule: LrSchedule,
        plan: BatchPlan,
        seed: u64,
    ) -> Result<Self, EngineError> {
        let pool = init_pool(&model, cfg.teachers, seed)?;
        Self::with_pool(model, pool, cfg, sgd, schedule, plan, seed)
    }

    pub fn with_pool(
        model: Model,
        pool: TeacherPool,
        cfg: DflConfig,
        sgd: Sgd,
        schedule: LrSchedule,
        plan: BatchPlan,
        seed: u64,
    ) -> Result<Self, EngineError> {
        cfg.validate()?;
        if cfg.head_len != model.head_len() {
            return Err(EngineError::Config(format!(
                "configured head length {} but the model head has {}",
                cfg.head_len,
                model.head_len()
            )));
        }
        if pool.len() != cfg.teachers {
            return Err(EngineError::Config(format!(
                "pool holds {} teachers, configuration asks for {}",
                pool.len(),
                cfg.teachers
            )));
        }
        if plan.batch_size == 0 {
            return Err(EngineError::Config("batch size must be positive".into()));
        }
        Ok(Self {
            model,
            pool,
            sgd,
            schedule,
            plan,
            cfg,
            seed,
            step: 0,
            epoch: 0,
            resets: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn pool(&self) -> &TeacherPool {
        &self.pool
    }

    pub fn sgd(&self) -> &Sgd {
        &self.sgd
    }

    pub fn config(&self) -> &DflConfig {
        &self.cfg
    }

    /// Optimizer steps taken so far.
    pub fn global_step(&self) -> usize {
        self.step
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on a batch at the scheduled learning rate.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepStats, EngineError> {
        let at = self.step;
        let lr = self.schedule.lr_at(at);
        let stats = self.step_inner(x, labels, lr).map_err(|e| e.at_step(at))?;
        self.step += 1;
        Ok(stats)
    }

    fn step_inner(&mut self, x: &Tensor, labels: &[usize], lr: f64) -> Result<StepStats, EngineError> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let xv = g.constant(x.clone());
        let fwd = forward_all(&mut g, &self.model, &vars, &self.pool, xv)?;
        let predictions: Vec<Vec<usize>> =
            fwd.all_logits().map(|v| g.value(v).argmax_rows()).collect();
        self.pool.update_meaningfulness(&predictions, labels);

        let loss = compute_total_loss(&mut g, &fwd, labels, &self.cfg)?;
        let value = |v| g.value(v).item().unwrap_or(f64::NAN);
        let loss_main = value(loss.main);
        if !loss_main.is_finite() {
            return Err(EngineError::NonFinite {
                step: 0,
                tensor: "main loss".into(),
            });
        }
        let mut distill_sum = 0.0;
        for (k, &d) in loss.distill.iter().enumerate() {
            let v = value(d);
            if !v.is_finite() {
                return Err(EngineError::NonFinite {
                    step: 0,
                    tensor: format!("distillation loss for teacher {k}"),
                });
            }
            distill_sum += v;
        }
        let loss_distill = if loss.distill.is_empty() {
            0.0
        } else {
            distill_sum / loss.distill.len() as f64
        };

        g.backward(loss.total)?;
        self.model.zero_grads();
        self.model.accumulate_grads(&g, &vars)?;
        check_params(&self.model, true)?;
        self.sgd.step(self.model.params_mut(), lr)?;
        check_params(&self.model, false)?;
        Ok(StepStats {
            lr,
            loss_main,
            loss_distill,
        })
    }

    /// Trains one epoch, evaluates on `test`, then applies the teacher update
    /// and the student reset if this epoch ends a cycle, in that order.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochReport, EngineError> {
        let epoch = self.epoch + 1;
        let (mut main, mut distill, mut n, mut lr) = (0.0, 0.0, 0usize, 0.0);
        let plan = self.plan.clone();
        for batch in iterate_epoch(train, &plan, epoch) {
            let b = batch.labels.len();
            let s = self.train_step(&batch.x, &batch.labels)?;
            main += s.loss_main * b as f64;
            distill += s.loss_distill * b as f64;
            n += b;
            lr = s.lr;
        }
        if n == 0 {
            return Err(EngineError::Config("empty training set".into()));
        }
        self.pool.end_epoch();
        let train_acc = self
            .pool
            .meaningfulness()
            .iter()
            .map(|m| m.last_epoch_accuracy())
            .collect();
        let test_acc = evaluate(&self.model, test, &self.plan)?;

        let mut events = Vec::new();
        let mut update = None;
        if !self.pool.is_empty() && epoch.is_multiple_of(self.cfg.update_every) {
            let report = self.pool.maybe_update_teachers(&self.model)?;
            events.push(Event::Update {
                teacher: report.teacher,
                replaced: report.replaced,
            });
            update = Some(report);
        }
        if self.cfg.reset != ResetMode::Off && epoch.is_multiple_of(self.cfg.reset_every) {
            let mut rng = rng::stream(self.seed, Purpose::Reset, self.resets);
            self.resets += 1;
            reset_student(&mut self.model, &mut self.sgd, &self.pool, self.cfg.reset, &mut rng)?;
            events.push(Event::Reset);
        }
        self.epoch = epoch;
        Ok(EpochReport {
            record: MetricsRecord {
                epoch,
                lr,
                train_loss_main: main / n as f64,
                train_loss_distill: distill / n as f64,
                train_acc,
                test_acc,
                events,
            },
            update,
        })
    }

    /// Runs `epochs` further epochs and returns their metrics rows.
    pub fn train(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        epochs: usize,
    ) -> Result<Vec<MetricsRecord>, EngineError> {
        (0..epochs)
            .map(|_| self.run_epoch(train, test).map(|r| r.record))
            .collect()
    }
}

/// Convenience wrapper: builds a [`Trainer`] and runs it for `epochs`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: Model,
    cfg: DflConfig,
    sgd: Sgd,
    schedule: LrSchedule,
    plan: BatchPlan,
    seed: u64,
    data: (&Dataset, &Dataset),
    epochs: usize,
) -> Result<(Model, Vec<MetricsRecord>), EngineError> {
    let mut t = Trainer::new(model, cfg, sgd, schedule, plan, seed)?;
    let records = t.train(data.0, data.1, epochs)?;
    Ok((t.into_model(), records))
}

/// Plain minibatch SGD on the cross-entropy, with no teachers and no resets.
pub fn train_baseline(
    model: &mut Model,
    sgd: &mut Sgd,
    schedule: &LrSchedule,
    plan: &BatchPlan,
    data: (&Dataset, &Dataset),
    epochs: usize,
) -> Result<Vec<MetricsRecord>, EngineError> {
    let (train, test) = data;
    let mut step = 0;
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let (mut loss_sum, mut correct, mut n, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for batch in iterate_epoch(train, plan, epoch) {
            lr = schedule.lr_at(step);
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let x = g.constant(batch.x);
            let logits = model.forward(&mut g, &vars, x)?;
            correct += g
                .value(logits)
                .argmax_rows()
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let loss = g.cross_entropy(logits, &batch.labels)?;
            let value = g.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(EngineError::NonFinite {
                    step,
                    tensor: "main loss".into(),
                });
            }
            loss_sum += value * batch.labels.len() as f64;
            n += batch.labels.len();
            g.backward(loss)?;
            model.zero_grads();
            model.accumulate_grads(&g, &vars)?;
            sgd.step(model.params_mut(), lr)?;
            step += 1;
        }
        records.push(MetricsRecord {
            epoch,
            lr,
            train_loss_main: loss_sum / n as f64,
            train_loss_distill: 0.0,
            train_acc: vec![correct as f64 / n as f64],
            test_acc: evaluate(model, test, plan)?,
            events: Vec::new(),
        });
    }
    Ok(records)
}
