//! Models, data, and the local trainer.
//!
//! Flat-parameter models with closed-form gradients (linear softmax, a
//! one-hidden-layer MLP, and a quadratic task with a per-agent optimum),
//! a seeded minibatch SGD loop producing client deltas, synthetic
//! Gaussian-blob classification data, and the disjoint-label non-IID
//! partitioner.

mod data;
mod task;
mod train;

pub use data::{generate_synthetic_classification, partition_noniid, Dataset, PartitionSpec};
pub use task::{loss_and_gradient, predict_class, TaskKind, TaskSpec};
pub use train::{local_train, sgd_steps, MinibatchSampler};

use std::ops::{Index, IndexMut};

use crate::{Error, Result};

/// Dense flat model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: other.dim() });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    /// `self - other` as a new vector.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: other.dim() });
        }
        Ok(ParamVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}
