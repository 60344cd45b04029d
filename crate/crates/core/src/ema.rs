//! Teacher weights as a moving average of the student.
//!
//! At update `t` (1-based) the teacher becomes
//!
//! ```text
//! θ'_t = (1 − 1/t)·θ'_{t−1} + (1/t)·θ_t     if 1 − 1/t < α   (running mean)
//! θ'_t = α·θ'_{t−1} + (1 − α)·θ_t           otherwise
//! ```
//!
//! so early on the teacher is the plain average of every student snapshot and
//! switches to an exponential average once `1 − 1/t` reaches `α`.

use crate::error::{Error, Result};
use crate::net::ParameterVector;

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    params: ParameterVector,
    /// Updates applied so far; the next update has index `updates + 1`.
    updates: u64,
    alpha: f64,
}

impl TeacherState {
    /// Starts the teacher as a copy of the student.
    pub fn new(student: &ParameterVector, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "EMA decay must lie in (0, 1), got {alpha}"
            )));
        }
        Ok(Self {
            params: student.clone(),
            updates: 0,
            alpha,
        })
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn into_params(self) -> ParameterVector {
        self.params
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Whether update index `t` uses the running-mean branch.
    pub fn uses_running_mean(t: u64, alpha: f64) -> bool {
        1.0 - 1.0 / (t as f64) < alpha
    }

    /// Folds the current student into the teacher.
    pub fn update(&mut self, student: &ParameterVector) -> Result<()> {
        if !student.same_layout(self.params.layout()) {
            return Err(Error::Shape("student and teacher layouts differ".into()));
        }
        let t = self.updates + 1;
        let (keep, take) = if Self::uses_running_mean(t, self.alpha) {
            let w = 1.0 / t as f64;
            (1.0 - w, w)
        } else {
            (self.alpha, 1.0 - self.alpha)
        };
        for (tp, &sp) in self.params.values_mut().iter_mut().zip(student.values()) {
            *tp = keep * *tp + take * sp;
        }
        self.updates = t;
        Ok(())
    }
}
