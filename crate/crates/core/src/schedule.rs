//! Noise schedules and the closed-form forward corruption.

use crate::error::{Error, Result};
use crate::io::Csv;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind {
    /// β interpolated linearly in √β space.
    ScaledLinear,
    Linear,
}

/// β and cumulative α̃ tables for steps `1..=T`. Index 0 of each table is
/// step 1; `alpha_bar(0)` is defined as 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::build(
            ScheduleKind::ScaledLinear,
            DEFAULT_TRAIN_STEPS,
            DEFAULT_BETA_START,
            DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let frac = |i: usize| {
            if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            }
        };
        let betas: Vec<f64> = (0..steps)
            .map(|i| match kind {
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let s = a + frac(i) * (b - a);
                    s * s
                }
                ScheduleKind::Linear => beta_start + frac(i) * (beta_end - beta_start),
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
        })
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// α̃_t for `t` in `0..=T`, with α̃_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = √α̃_t · x0 + √(1 − α̃_t) · ε`.
    pub fn forward_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (T::from_f64_lossy(ab.sqrt()), T::from_f64_lossy((1.0 - ab).sqrt()));
        x0.zip_map(eps, "forward_sample", |x, e| a * x + b * e)
    }

    /// Model input and regression target for the noise-prediction loss.
    pub fn training_target<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        Ok((self.forward_sample(x0, t, eps)?, eps.clone()))
    }

    /// `t,beta,alpha_bar` rows for auditing.
    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&["t", "beta", "alpha_bar"]);
        for t in 1..=self.steps() {
            csv.row(&[
                t.to_string(),
                format!("{:e}", self.beta(t)),
                format!("{:e}", self.alpha_bar(t)),
            ]);
        }
        csv
    }
}
