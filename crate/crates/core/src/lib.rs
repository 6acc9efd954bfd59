//! Diverse feature learning: a training engine that combines self-distillation
//! from a pool of teacher heads taken from the training trajectory with
//! periodic reset of the student head.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//! - [`model`]: sequential layer stacks split into a body and a student head.
//! - [`optim`]: momentum SGD and the warmup/milestone learning-rate schedule.
//! - [`data`]: CIFAR binary readers, synthetic datasets and batch iteration.
//! - [`engine`]: the teacher pool, the combined loss and the training loop.
//! - [`experiment`]: run configuration, metrics files, grids and seed statistics.

pub mod tensor;
pub mod model;
pub mod rng;
pub mod optim;
pub mod data;
pub mod engine;
pub mod experiment;
