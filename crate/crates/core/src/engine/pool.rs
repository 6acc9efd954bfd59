use super::EngineError;
use crate::model::{HeadSnapshot, Model, ModelError};
use crate::rng::{self, Purpose};

/// Training-accuracy accumulator for one head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Meaningfulness {
    correct: usize,
    seen: usize,
    last_epoch_accuracy: f64,
    last_epoch_seen: usize,
}

impl Meaningfulness {
    pub fn correct(&self) -> usize {
        self.correct
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Accuracy over the most recently completed epoch.
    pub fn last_epoch_accuracy(&self) -> f64 {
        self.last_epoch_accuracy
    }

    /// Samples behind [`Self::last_epoch_accuracy`]; zero means no epoch has
    /// completed since the last re-initialisation.
    pub fn last_epoch_seen(&self) -> usize {
        self.last_epoch_seen
    }

    fn record(&mut self, correct: usize, seen: usize) {
        assert!(correct <= seen, "{correct} correct out of {seen}");
        self.correct += correct;
        self.seen += seen;
    }

    fn roll_over(&mut self) {
        if self.seen > 0 {
            self.last_epoch_accuracy = self.correct as f64 / self.seen as f64;
        }
        self.last_epoch_seen = self.seen;
        self.correct = 0;
        self.seen = 0;
    }
}

/// Outcome of one teacher update.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementReport {
    /// Index of the least accurate teacher (lowest index on ties).
    pub teacher: usize,
    pub student_accuracy: f64,
    pub teacher_accuracies: Vec<f64>,
    pub replaced: bool,
}

impl ReplacementReport {
    /// Teacher accuracies after the update: the candidate slot carries the
    /// student's accuracy if it was replaced.
    pub fn retained_accuracies(&self) -> Vec<f64> {
        let mut acc = self.teacher_accuracies.clone();
        if self.replaced {
            acc[self.teacher] = self.student_accuracy;
        }
        acc
    }
}

/// The teacher heads plus one meaningfulness accumulator per head, student
/// first.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPool {
    teachers: Vec<HeadSnapshot>,
    meaningfulness: Vec<Meaningfulness>,
}

/// `k` teacher heads drawn independently from the model's init scheme.
pub fn init_pool(model: &Model, k: usize, seed: u64) -> Result<TeacherPool, ModelError> {
    let mut rng = rng::stream(seed, Purpose::Teachers, 0);
    let teachers = (0..k)
        .map(|_| model.random_head(&mut rng))
        .collect::<Result<_, _>>()?;
    Ok(TeacherPool::new(teachers))
}

impl TeacherPool {
    pub fn new(teachers: Vec<HeadSnapshot>) -> Self {
        let meaningfulness = vec![Meaningfulness::default(); teachers.len() + 1];
        Self {
            teachers,
            meaningfulness,
        }
    }

    pub fn teachers(&self) -> &[HeadSnapshot] {
        &self.teachers
    }

    /// Number of teachers.
    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// Accumulators for the student (index 0) and each teacher.
    pub fn meaningfulness(&self) -> &[Meaningfulness] {
        &self.meaningfulness
    }

    /// Adds `correct` hits out of `seen` samples to head `head`.
    pub fn record(&mut self, head: usize, correct: usize, seen: usize) {
        self.meaningfulness[head].record(correct, seen);
    }

    /// Counts argmax hits of each head's predictions (student first).
    pub fn update_meaningfulness(&mut self, predictions: &[Vec<usize>], labels: &[usize]) {
        assert_eq!(predictions.len(), self.meaningfulness.len(), "one prediction row per head");
        for (m, preds) in self.meaningfulness.iter_mut().zip(predictions) {
            assert_eq!(preds.len(), labels.len());
            let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
            m.record(hits, labels.len());
        }
    }

    /// Turns the running counts into last-epoch accuracies and zeroes them.
    pub fn end_epoch(&mut self) {
        for m in &mut self.meaningfulness {
            m.roll_over();
        }
    }

    /// Clears every accumulator, including last-epoch values.
    pub fn reset_meaningfulness(&mut self) {
        self.meaningfulness.fill(Meaningfulness::default());
    }

    pub fn fingerprints(&self) -> Vec<[u8; 32]> {
        self.teachers.iter().map(HeadSnapshot::fingerprint).collect()
    }

    /// Replaces the least accurate teacher with the current student head when
    /// the student is at least as accurate, then re-initialises all
    /// meaningfulness state whether or not a replacement happened.
    pub fn maybe_update_teachers(&mut self, model: &Model) -> Result<ReplacementReport, EngineError> {
        if self.teachers.is_empty() {
            return Err(EngineError::Protocol("teacher update with an empty pool".into()));
        }
        if let Some(head) = self.meaningfulness.iter().position(|m| m.last_epoch_seen == 0) {
            return Err(EngineError::Protocol(format!(
                "meaningfulness of head {head} is stale: no completed epoch since the last update"
            )));
        }
        let student_accuracy = self.meaningfulness[0].last_epoch_accuracy;
        let teacher_accuracies: Vec<f64> = self.meaningfulness[1..]
            .iter()
            .map(|m| m.last_epoch_accuracy)
            .collect();
        let mut teacher = 0;
        for (k, &p) in teacher_accuracies.iter().enumerate() {
            if p < teacher_accuracies[teacher] {
                teacher = k;
            }
        }
        let replaced = teacher_accuracies[teacher] <= student_accuracy;
        if replaced {
            self.teachers[teacher] = model.snapshot_head();
        }
        self.reset_meaningfulness();
        Ok(ReplacementReport {
            teacher,
            student_accuracy,
            teacher_accuracies,
            replaced,
        })
    }
}
