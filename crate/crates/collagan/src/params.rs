//! Named parameter storage, initialization, and first/second-moment
//! adaptive optimization.
//!
//! Networks own a [`ParamSet`]; each training step binds the parameters
//! into a fresh graph as `requires_grad` leaves, reads gradients back after
//! the backward sweep, and applies an optimizer step to the stored tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::snapshot::{Snapshot, SnapshotError};
use crate::tensor::{Graph, Tensor, Value};

/// Index of a parameter within its [`ParamSet`]; stable across bind calls.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter into `g` as a leaf, in declaration order.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| g.leaf(t.clone(), requires_grad))
            .collect();
        BoundParams { ids }
    }

    /// Gradients for each parameter after a backward sweep; zeros where a
    /// parameter did not participate in the loss.
    pub fn collect_grads(&self, g: &Graph, bound: &BoundParams) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&bound.ids)
            .map(|((_, t), &v)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    pub fn write_to(&self, snap: &mut Snapshot, prefix: &str) {
        for (name, tensor) in &self.entries {
            snap.insert(format!("{prefix}/{name}"), tensor.clone());
        }
    }

    /// Restore parameter tensors from a snapshot; shapes must match the
    /// current architecture.
    pub fn read_from(&mut self, snap: &Snapshot, prefix: &str) -> Result<(), SnapshotError> {
        for (name, tensor) in &mut self.entries {
            let stored = snap.get(&format!("{prefix}/{name}"))?;
            *tensor = stored.clone();
        }
        Ok(())
    }
}

/// Graph handles of one bound parameter set, in declaration order.
pub struct BoundParams {
    ids: Vec<Value>,
}

impl BoundParams {
    /// View over externally created leaves, in parameter declaration order.
    pub fn from_values(ids: Vec<Value>) -> Self {
        BoundParams { ids }
    }

    pub fn value(&self, id: ParamId) -> Value {
        self.ids[id.0]
    }

    pub fn values(&self) -> &[Value] {
        &self.ids
    }
}

/// He-style normal init scaled by fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = params.entries[idx].1.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    pub fn write_to(&self, snap: &mut Snapshot, prefix: &str) {
        for (idx, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            snap.insert(
                format!("{prefix}/m{idx}"),
                Tensor::new(vec![m.len()], m.clone()).expect("moment shape"),
            );
            snap.insert(
                format!("{prefix}/v{idx}"),
                Tensor::new(vec![v.len()], v.clone()).expect("moment shape"),
            );
        }
        snap.insert(format!("{prefix}/t"), Tensor::scalar(self.t as f64));
    }

    pub fn read_from(&mut self, snap: &Snapshot, prefix: &str) -> Result<(), SnapshotError> {
        for idx in 0..self.m.len() {
            self.m[idx] = snap.get(&format!("{prefix}/m{idx}"))?.data().to_vec();
            self.v[idx] = snap.get(&format!("{prefix}/v{idx}"))?.data().to_vec();
        }
        self.t = snap.get(&format!("{prefix}/t"))?.item() as u64;
        Ok(())
    }
}

/// Optimizer choice for a training run. Plain SGD exists as a diagnostic
/// mode with no moment state.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64, params: &ParamSet) -> Self {
        Optimizer::Adam(Adam::new(lr, params))
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) {
        match self {
            Optimizer::Adam(adam) => adam.step(params, grads),
            Optimizer::Sgd { lr } => {
                for (idx, grad) in grads.iter().enumerate() {
                    let data = params.entries[idx].1.data_mut();
                    for (p, g) in data.iter_mut().zip(grad) {
                        *p -= *lr * g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_collect_grads_round_trip() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap());
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let loss = g.sum(bound.value(id));
        g.backward(loss).unwrap();
        let grads = params.collect_grads(&g, &bound);
        assert_eq!(grads[0], vec![1.0, 1.0]);
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut params = ParamSet::new();
        let id = params.add("x", Tensor::scalar(5.0));
        let mut opt = Adam::new(0.1, &params);
        for _ in 0..200 {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let loss = g.mean_sq(bound.value(id));
            g.backward(loss).unwrap();
            let grads = params.collect_grads(&g, &bound);
            opt.step(&mut params, &grads);
        }
        assert!(params.tensor(id).item().abs() < 0.1);
    }

    #[test]
    fn adam_state_snapshot_round_trip() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::scalar(1.0));
        let mut opt = Adam::new(0.01, &params);
        opt.step(&mut params, &[vec![0.5]]);
        let mut snap = Snapshot::new();
        opt.write_to(&mut snap, "opt");
        let mut restored = Adam::new(0.01, &params);
        restored.read_from(&snap, "opt").unwrap();
        assert_eq!(restored.t, opt.t);
        assert_eq!(restored.m, opt.m);
        assert_eq!(restored.v, opt.v);
    }

    #[test]
    fn he_normal_scales_with_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = he_normal(&[64, 64], 64, &mut rng);
        let std = {
            let d = t.data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64).sqrt()
        };
        let expected = (2.0f64 / 64.0).sqrt();
        assert!((std - expected).abs() / expected < 0.1, "std {std} vs {expected}");
    }
}
