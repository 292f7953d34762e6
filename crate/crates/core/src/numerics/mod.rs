//! Minimal differentiable-array core.
//!
//! Supplies exactly the primitives the model needs: a flat f64 array type,
//! a reverse-mode tape recording primitive operations, a named parameter
//! store, a finite-difference gradient checker, and a binary checkpoint
//! format. Everything is 64-bit and deterministic given a seed.

mod battery;
mod checkpoint;
mod gradcheck;
mod tape;

pub use battery::{primitive_battery, BatteryEntry};
pub use gradcheck::{grad_check, GradMap};
pub use tape::{lstm_cell, Grads, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// A shaped f64 array, row-major. `grad` is populated after a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffArray {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl DiffArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match value count {}",
            shape,
            values.len()
        );
        DiffArray {
            shape,
            values,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DiffArray::new(shape, vec![0.0; n])
    }

    pub fn scalar(x: f64) -> Self {
        DiffArray::new(vec![1], vec![x])
    }

    pub fn vector(values: Vec<f64>) -> Self {
        DiffArray::new(vec![values.len()], values)
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], fan_in = shape[0].
    pub fn uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = shape[0] as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        DiffArray::new(shape, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradient buffer; `None` until a backward pass has written it.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.values.len(), "grad shape mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Named parameters with deterministic (registration-order) iteration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    arrays: Vec<DiffArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, array: DiffArray) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.arrays.len());
        self.names.push(name.to_string());
        self.arrays.push(array);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &DiffArray {
        let idx = self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.arrays[*idx]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut DiffArray {
        let idx = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &mut self.arrays[idx]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DiffArray)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.arrays.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for a in &self.arrays {
            if let Some(g) = a.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// Scales all gradients so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for a in &mut self.arrays {
                if let Some(g) = a.grad.as_mut() {
                    for x in g.iter_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        norm
    }

    /// Plain gradient-descent update; skips parameters without gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        for a in &mut self.arrays {
            if let Some(g) = a.grad.as_ref() {
                for (v, gi) in a.values.iter_mut().zip(g.iter()) {
                    *v -= lr * gi;
                }
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for a in &mut self.arrays {
            a.clear_grad();
        }
    }
}
