//! Trainable parameters and the Adam optimizer.
//!
//! Parameters live outside the per-step [`crate::tensor::Tape`]; each step
//! binds them as leaf nodes, reads back gradients, and applies one Adam
//! update. Parameter order is creation order and names are unique, which is
//! what makes checkpoints self-describing.

use crate::tensor::{Gradients, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

#[derive(Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param {name}: shape/value mismatch"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Adam with bias correction. Moment buffers are preserved across
/// checkpoint save/load so a resumed run continues the same trajectory.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// first/second moments per parameter, same layout as the store.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One update over every parameter. A parameter that never joined the
    /// graph this step is treated as having an exactly-zero gradient, so a
    /// disabled loss term and a zero-weighted one drive identical updates.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..store.len() {
            let pid = ParamId(i);
            let zero;
            let g: &[f64] = match tape.binding(pid) {
                Some(node) => grads.of(node),
                None => {
                    zero = vec![0.0; store.get(pid).value.len()];
                    &zero
                }
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.get_mut(pid);
            for j in 0..p.value.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p.value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let pid = store.add("x", &[1], vec![5.0]);
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = tape.bind(&store, pid);
            let sq = tape.mul(x, x);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            opt.step(&mut store, &tape, &grads);
        }
        assert!(store.get(pid).value[0].abs() < 1e-2);
    }

    #[test]
    fn unbound_param_decays_moments_only() {
        let mut store = ParamStore::new();
        let used = store.add("used", &[1], vec![1.0]);
        let unused = store.add("unused", &[1], vec![7.0]);
        let mut opt = Adam::new(&store, 0.1);
        opt.m[1][0] = 0.5; // pretend it had momentum from earlier steps
        let mut tape = Tape::new();
        let x = tape.bind(&store, used);
        let sq = tape.mul(x, x);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        opt.step(&mut store, &tape, &grads);
        // momentum decays toward zero but still moves the unused param,
        // exactly as if its gradient were zero this step
        assert!((opt.m[1][0] - 0.45).abs() < 1e-12);
        assert!(store.get(unused).value[0] != 7.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", &[1], vec![0.0]);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            store.add("w", &[1], vec![0.0]);
        }));
        assert!(r.is_err());
    }
}
