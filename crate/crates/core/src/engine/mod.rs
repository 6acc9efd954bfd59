//! Self-distillation from a teacher pool combined with student reset.
//!
//! Every training step runs the shared body once, applies the student head
//! and each teacher head to its output, and minimises
//! `CE(student, y) + w · Σ_k KL(student ‖ teacher_k)` over body and student
//! parameters. At epoch boundaries the least accurate teacher may be replaced
//! by a snapshot of the student, and the student head may be re-initialised.
//!
//! ```
//! use dfl::engine::{DflConfig, ResetMode};
//!
//! let cfg = DflConfig::cycle(2, 5, 1, ResetMode::Mean);
//! assert_eq!((cfg.update_every, cfg.reset_every), (5, 5));
//! assert!(cfg.validate().is_ok());
//! assert!(DflConfig::cycle(0, 5, 1, ResetMode::Mean).validate().is_err());
//! ```

mod pool;
mod trainer;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use pool::{init_pool, Meaningfulness, ReplacementReport, TeacherPool};
pub use trainer::{
    evaluate, train, train_baseline, EpochReport, Event, MetricsRecord, StepStats, Trainer,
};

use crate::model::{Head, HeadSnapshot, Model, ModelError, ParamVars};
use crate::optim::{OptimError, Sgd};
use crate::rng::Rng;
use crate::tensor::{Graph, TensorError, Var};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("non-finite values in {tensor} at step {step}")]
    NonFinite { step: usize, tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

impl EngineError {
    fn at_step(self, at: usize) -> Self {
        match self {
            EngineError::NonFinite { tensor, .. } => EngineError::NonFinite { step: at, tensor },
            other => other,
        }
    }
}

/// How the student head is re-initialised at a reset boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResetMode {
    /// No resets.
    Off,
    /// A fresh draw from the model's init scheme.
    Random,
    /// Elementwise mean of the teacher heads.
    Mean,
}

impl fmt::Display for ResetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResetMode::Off => "none",
            ResetMode::Random => "random",
            ResetMode::Mean => "mean",
        })
    }
}

impl FromStr for ResetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" | "off" => Ok(ResetMode::Off),
            "random" => Ok(ResetMode::Random),
            "mean" => Ok(ResetMode::Mean),
            _ => Err(format!("unknown reset mode {s:?} (expected none, random or mean)")),
        }
    }
}

/// Weight applied to the summed distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DistillWeight {
    /// `1/K`.
    #[default]
    MeanOverK,
    /// `1`.
    Sum,
}

impl fmt::Display for DistillWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillWeight::MeanOverK => "mean",
            DistillWeight::Sum => "sum",
        })
    }
}

impl FromStr for DistillWeight {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(DistillWeight::MeanOverK),
            "sum" => Ok(DistillWeight::Sum),
            _ => Err(format!("unknown distillation weighting {s:?} (expected mean or sum)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DflConfig {
    /// Number of teachers. Zero disables distillation and teacher updates.
    pub teachers: usize,
    /// Epochs between teacher updates.
    pub update_every: usize,
    /// Epochs between student resets.
    pub reset_every: usize,
    pub reset: ResetMode,
    pub distill_weight: DistillWeight,
    /// Number of parameterized layers in the student head.
    pub head_len: usize,
}

impl Default for DflConfig {
    fn default() -> Self {
        Self::cycle(4, 100, 3, ResetMode::Mean)
    }
}

impl DflConfig {
    /// Teacher update and student reset sharing one cycle length.
    pub fn cycle(teachers: usize, every: usize, head_len: usize, reset: ResetMode) -> Self {
        Self {
            teachers,
            update_every: every,
            reset_every: every,
            reset,
            distill_weight: DistillWeight::MeanOverK,
            head_len,
        }
    }

    /// No teachers and no resets: plain supervised training.
    pub fn disabled(head_len: usize) -> Self {
        Self::cycle(0, 1, head_len, ResetMode::Off)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.update_every == 0 || self.reset_every == 0 {
            return Err(EngineError::Config("cycle lengths must be at least one epoch".into()));
        }
        if self.head_len == 0 {
            return Err(EngineError::Config("head length must be at least one".into()));
        }
        if self.reset == ResetMode::Mean && self.teachers == 0 {
            return Err(EngineError::Config("mean reset needs at least one teacher".into()));
        }
        Ok(())
    }

    /// Factor applied to the summed distillation terms.
    pub fn weight(&self) -> f64 {
        match self.distill_weight {
            DistillWeight::MeanOverK => 1.0 / self.teachers as f64,
            DistillWeight::Sum => 1.0,
        }
    }
}

/// Graph handles produced by [`forward_all`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub body: Var,
    pub student_logits: Var,
    /// Present only when there are teachers to distil from.
    pub student_probs: Option<Var>,
    pub teacher_logits: Vec<Var>,
    pub teacher_probs: Vec<Var>,
}

impl Forward {
    /// Student logits followed by teacher logits.
    pub fn all_logits(&self) -> impl Iterator<Item = Var> + '_ {
        std::iter::once(self.student_logits).chain(self.teacher_logits.iter().copied())
    }
}

fn check_finite(g: &Graph, v: Var, name: impl FnOnce() -> String) -> Result<(), EngineError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(EngineError::NonFinite {
            step: 0,
            tensor: name(),
        })
    }
}

/// Runs the body once and every head on top of it. Teacher outputs are
/// detached from the body and from their own parameters.
pub fn forward_all(
    g: &mut Graph,
    model: &Model,
    vars: &ParamVars,
    pool: &TeacherPool,
    x: Var,
) -> Result<Forward, EngineError> {
    let body = model.forward_body(g, vars, x)?;
    check_finite(g, body, || "body output".into())?;
    let student_logits = model.apply_head(g, body, Head::Student(vars))?;
    check_finite(g, student_logits, || "student logits".into())?;
    let mut teacher_logits = Vec::with_capacity(pool.len());
    let mut teacher_probs = Vec::with_capacity(pool.len());
    for (k, snap) in pool.teachers().iter().enumerate() {
        let logits = model.apply_head(g, body, Head::Teacher(snap))?;
        check_finite(g, logits, || format!("teacher {k} logits"))?;
        teacher_probs.push(g.softmax(logits)?);
        teacher_logits.push(logits);
    }
    let student_probs = if pool.is_empty() {
        None
    } else {
        Some(g.softmax(student_logits)?)
    };
    Ok(Forward {
        body,
        student_logits,
        student_probs,
        teacher_logits,
        teacher_probs,
    })
}

/// Handles for the pieces of the training objective.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    /// `KL(student ‖ teacher_k)` in teacher order, before weighting.
    pub distill: Vec<Var>,
}

/// `CE(student, y) + w · Σ_k KL(student ‖ teacher_k)`, summed in teacher
/// order. With no teachers the total is the cross-entropy node itself.
pub fn compute_total_loss(
    g: &mut Graph,
    fwd: &Forward,
    labels: &[usize],
    cfg: &DflConfig,
) -> Result<LossTerms, EngineError> {
    let main = g.cross_entropy(fwd.student_logits, labels)?;
    if fwd.teacher_probs.is_empty() {
        return Ok(LossTerms {
            total: main,
            main,
            distill: Vec::new(),
        });
    }
    let student = fwd
        .student_probs
        .ok_or_else(|| EngineError::Protocol("student probabilities were not computed".into()))?;
    let distill = fwd
        .teacher_probs
        .iter()
        .map(|&q| g.kl_divergence(student, q))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = distill[0];
    for &term in &distill[1..] {
        sum = g.add(sum, term)?;
    }
    let weighted = g.scale(sum, cfg.weight());
    let total = g.add(main, weighted)?;
    Ok(LossTerms {
        total,
        main,
        distill,
    })
}

/// Loads `snap` into the student head and clears the head's momentum.
pub fn load_student(model: &mut Model, sgd: &mut Sgd, snap: &HeadSnapshot) -> Result<(), EngineError> {
    model.load_head(snap)?;
    sgd.zero_momentum(model.head_param_range());
    Ok(())
}

/// Elementwise mean of the teacher heads, accumulated in teacher order and
/// divided by `K` once.
pub fn mean_head(teachers: &[HeadSnapshot]) -> Result<HeadSnapshot, EngineError> {
    let (first, rest) = teachers
        .split_first()
        .ok_or_else(|| EngineError::Config("mean of an empty teacher set".into()))?;
    let mut acc: Vec<Vec<f64>> = first.params().to_vec();
    for t in rest {
        if t.manifest() != first.manifest() {
            return Err(ModelError::Manifest {
                expected: first.manifest().to_vec(),
                actual: t.manifest().to_vec(),
            }
            .into());
        }
        for (a, p) in acc.iter_mut().zip(t.params()) {
            for (x, y) in a.iter_mut().zip(p) {
                *x += y;
            }
        }
    }
    let k = teachers.len() as f64;
    for a in &mut acc {
        for x in a.iter_mut() {
            *x /= k;
        }
    }
    Ok(HeadSnapshot::new(first.manifest().to_vec(), acc)?)
}

/// Re-initialises the student head. The body is untouched and head momentum
/// is cleared. `rng` is only drawn from in random mode.
pub fn reset_student(
    model: &mut Model,
    sgd: &mut Sgd,
    pool: &TeacherPool,
    mode: ResetMode,
    rng: &mut Rng,
) -> Result<(), EngineError> {
    let head = match mode {
        ResetMode::Off => return Ok(()),
        ResetMode::Random => model.random_head(rng)?,
        ResetMode::Mean => {
            if pool.is_empty() {
                return Err(EngineError::Config("mean reset needs at least one teacher".into()));
            }
            mean_head(pool.teachers())?
        }
    };
    load_student(model, sgd, &head)
}
