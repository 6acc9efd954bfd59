//! Momentum SGD with weight decay, and the warmup + milestone step schedule.

use std::ops::Range;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("optimizer state mismatch: {0}")]
    Internal(String),
}

/// Per-parameter momentum buffers plus the momentum and decay coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    /// One zeroed buffer per parameter tensor.
    pub fn new<'a>(
        params: impl IntoIterator<Item = &'a Tensor>,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self, OptimError> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(OptimError::Config(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(OptimError::Config(format!(
                "weight decay {weight_decay} must be non-negative"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers: params.into_iter().map(|p| vec![0.0; p.len()]).collect(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    /// `g' = g + λw; buf = μ·buf + g'; w -= lr·buf`. A parameter without a
    /// gradient buffer is treated as having zero gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        lr: f64,
    ) -> Result<(), OptimError> {
        let mut count = 0;
        for (i, param) in params.into_iter().enumerate() {
            count += 1;
            let buf = self
                .buffers
                .get_mut(i)
                .ok_or_else(|| OptimError::Internal(format!("no buffer for parameter {i}")))?;
            if buf.len() != param.len() {
                return Err(OptimError::Internal(format!(
                    "parameter {i} has {} values but its buffer has {}",
                    param.len(),
                    buf.len()
                )));
            }
            let grad = param.grad().map(<[f64]>::to_vec);
            if grad.as_ref().is_some_and(|g| g.len() != buf.len()) {
                return Err(OptimError::Internal(format!(
                    "gradient length mismatch for parameter {i}"
                )));
            }
            let (mu, wd) = (self.momentum, self.weight_decay);
            for (j, (w, b)) in param.data_mut().iter_mut().zip(buf.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]) + wd * *w;
                *b = mu * *b + g;
                *w -= lr * *b;
            }
        }
        if count != self.buffers.len() {
            return Err(OptimError::Internal(format!(
                "stepped {count} parameters, state holds {}",
                self.buffers.len()
            )));
        }
        Ok(())
    }

    /// Clears the buffers of the parameters in `range`.
    pub fn zero_momentum(&mut self, range: Range<usize>) {
        for buf in &mut self.buffers[range] {
            buf.fill(0.0);
        }
    }
}

/// Linear warmup followed by multiplicative decay at epoch milestones.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    base_lr: f64,
    warmup_epochs: usize,
    milestones: Vec<usize>,
    gamma: f64,
    steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn new(
        base_lr: f64,
        warmup_epochs: usize,
        milestones: Vec<usize>,
        gamma: f64,
        steps_per_epoch: usize,
    ) -> Result<Self, OptimError> {
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(OptimError::Config(format!("base lr {base_lr} must be positive")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(OptimError::Config(format!("gamma {gamma} must be positive")));
        }
        if steps_per_epoch == 0 {
            return Err(OptimError::Config("steps per epoch must be positive".into()));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OptimError::Config(format!(
                "milestones {milestones:?} must be strictly increasing"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            milestones,
            gamma,
            steps_per_epoch,
        })
    }

    /// lr 0.1, one warmup epoch, ×0.2 at epochs 60, 120 and 160.
    pub fn standard(steps_per_epoch: usize) -> Self {
        Self::new(0.1, 1, vec![60, 120, 160], 0.2, steps_per_epoch)
            .expect("standard schedule is valid")
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    /// Learning rate for the zero-based `global_step`.
    pub fn lr_at(&self, global_step: usize) -> f64 {
        let epoch = global_step / self.steps_per_epoch;
        if epoch < self.warmup_epochs {
            let ramp = self.warmup_epochs * self.steps_per_epoch;
            if global_step + 1 == ramp {
                return self.base_lr;
            }
            return self.base_lr * (global_step + 1) as f64 / ramp as f64;
        }
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count() as i32;
        // Dividing by the integral reciprocal keeps 0.1·0.2^m on the nearest
        // decimal value (0.02, 0.004, 0.0008) instead of accumulating error.
        let inv = self.gamma.recip();
        if inv.fract() == 0.0 {
            self.base_lr / inv.powi(passed)
        } else {
            self.base_lr * self.gamma.powi(passed)
        }
    }
}
