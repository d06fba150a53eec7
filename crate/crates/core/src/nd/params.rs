//! Named parameter arrays with paired gradient and Adam moment buffers.

use std::collections::BTreeMap;

use rand::Rng;

use super::array::NumArray;
use super::tape::Gradients;
use crate::{Error, Result};

struct ParamEntry {
    name: String,
    value: NumArray,
    grad: NumArray,
    moment1: NumArray,
    moment2: NumArray,
}

/// Flat store of model parameters in stable insertion order.
///
/// Shapes of the value, gradient and moment buffers are identical per
/// entry, and names are unique. Snapshots of the weights are plain value
/// vectors, safe to share across threads for inference.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; returns its slot index.
    pub fn add(&mut self, name: &str, value: NumArray) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let slot = self.entries.len();
        let shape = value.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: NumArray::zeros(&shape),
            moment1: NumArray::zeros(&shape),
            moment2: NumArray::zeros(&shape),
        });
        self.by_name.insert(name.to_string(), slot);
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].name
    }

    pub fn value(&self, slot: usize) -> &NumArray {
        &self.entries[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut NumArray {
        &mut self.entries[slot].value
    }

    pub fn grad(&self, slot: usize) -> &NumArray {
        &self.entries[slot].grad
    }

    /// Slots in name order (the serialization order).
    pub fn slots_by_name(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_name.values().copied()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
    }

    /// Adds a backward pass's gradients into the store buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (slot, g) in grads.by_slot().iter().enumerate() {
            let Some(g) = g else { continue };
            let dst = self.entries[slot].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += s;
            }
        }
    }

    /// Euclidean norm of the concatenated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Bias-corrected Adam update for step `t >= 1`; gradients are zeroed
    /// afterwards.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, t: u64) -> Result<()> {
        if t < 1 {
            return Err(Error::Contract("adam step index must be >= 1".into()));
        }
        let corr1 = 1.0 - beta1.powi(t as i32);
        let corr2 = 1.0 - beta2.powi(t as i32);
        for e in &mut self.entries {
            let grads = e.grad.data_mut();
            let m = e.moment1.data_mut();
            let v = e.moment2.data_mut();
            let w = e.value.data_mut();
            for i in 0..grads.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                grads[i] = 0.0;
            }
        }
        Ok(())
    }

    /// Copies of all weight arrays, slot-indexed.
    pub fn snapshot(&self) -> Vec<NumArray> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Restores weights from a [`ParamStore::snapshot`].
    pub fn restore(&mut self, snapshot: &[NumArray]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::Contract(format!(
                "snapshot has {} arrays, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (e, s) in self.entries.iter_mut().zip(snapshot) {
            if e.value.shape() != s.shape() {
                return Err(Error::Contract(format!(
                    "snapshot shape mismatch for {:?}",
                    e.name
                )));
            }
            e.value = s.clone();
        }
        Ok(())
    }

    /// Resets optimizer moments (used when starting a fresh run from
    /// loaded weights).
    pub fn reset_moments(&mut self) {
        for e in &mut self.entries {
            e.moment1.fill(0.0);
            e.moment2.fill(0.0);
        }
    }
}

/// Uniform init in +/- sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> NumArray {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    NumArray::matrix(rows, cols, data).expect("length matches dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unique_names_enforced() {
        let mut store = ParamStore::new();
        store.add("w", NumArray::vector(vec![0.0])).unwrap();
        assert!(store.add("w", NumArray::vector(vec![1.0])).is_err());
    }

    #[test]
    fn adam_rejects_step_zero() {
        let mut store = ParamStore::new();
        store.add("w", NumArray::vector(vec![0.0])).unwrap();
        assert!(store.adam_step(0.1, 0.9, 0.999, 1e-8, 0).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", NumArray::vector(vec![1.5, -2.0])).unwrap();
        store.adam_step(0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        assert_eq!(store.value(0).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_matches_hand_computation() {
        // g = 1 at t = 1: bias correction gives m_hat = v_hat = 1, so the
        // update is -lr / (1 + eps).
        let mut store = ParamStore::new();
        let slot = store.add("w", NumArray::vector(vec![0.0])).unwrap();
        store.entries[slot].grad.data_mut()[0] = 1.0;
        store.adam_step(0.1, 0.9, 0.999, 1e-8, 1).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.value(slot).data()[0] - expected).abs() < 1e-15);
        // gradients are zeroed after the step
        assert_eq!(store.grad(slot).data(), &[0.0]);
    }

    #[test]
    fn adam_constant_gradient_is_monotone() {
        let mut store = ParamStore::new();
        let slot = store.add("w", NumArray::vector(vec![0.0])).unwrap();
        let mut prev = 0.0;
        for t in 1..=100 {
            store.entries[slot].grad.data_mut()[0] = 2.5;
            store.adam_step(0.01, 0.9, 0.999, 1e-8, t).unwrap();
            let cur = store.value(slot).data()[0];
            assert!(cur < prev, "step {t}: {cur} not below {prev}");
            prev = cur;
        }
    }
}
