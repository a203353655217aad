use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Periodic slope configuration `u_j`, `j = 0..N-1`, with `u_{N+j} = u_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeField {
    values: Vec<f64>,
}

impl SlopeField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(Error::InvalidField(format!(
                "ring needs at least 3 sites, got {}",
                values.len()
            )));
        }
        let f = Self { values };
        f.check_finite(0.0)?;
        Ok(f)
    }

    pub fn constant(value: f64, ring_size: usize) -> Result<Self> {
        Self::new(vec![value; ring_size])
    }

    pub fn ring_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.total() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Blow-up is detected, never silently propagated.
    pub fn check_finite(&self, time: f64) -> Result<()> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp {
                time,
                max_abs: f64::INFINITY,
                threshold: f64::INFINITY,
            });
        }
        Ok(())
    }
}
