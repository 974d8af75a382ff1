use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Serializable moment state for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub param: usize,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. Parameters that receive no gradient in a step
/// are left untouched, moments included.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    slots: Vec<AdamSlot>,
}

impl Adam {
    pub fn new(params: &[ParamId], store: &ParamStore, config: AdamConfig) -> Self {
        let slots = params
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                AdamSlot {
                    param: id.0,
                    step: 0,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self { config, slots }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.iter().map(|s| ParamId(s.param))
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for slot in &mut self.slots {
            let id = ParamId(slot.param);
            let Some(g) = grads.param(id) else { continue };
            slot.step += 1;
            let bc1 = 1.0 - beta1.powi(slot.step as i32);
            let bc2 = 1.0 - beta2.powi(slot.step as i32);
            let value: &mut Tensor = store.value_mut(id);
            let p = value.data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> &[AdamSlot] {
        &self.slots
    }

    pub fn load_state(&mut self, slots: Vec<AdamSlot>) -> Result<(), String> {
        if slots.len() != self.slots.len() {
            return Err(format!("expected {} slots, got {}", self.slots.len(), slots.len()));
        }
        for (mine, theirs) in self.slots.iter().zip(&slots) {
            if mine.param != theirs.param || mine.m.len() != theirs.m.len() || mine.v.len() != theirs.v.len() {
                return Err(format!("slot for parameter {} does not match", mine.param));
            }
        }
        self.slots = slots;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", "x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&[id], &store, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..500 {
            let g = Graph::new();
            let x = g.param(&store, id);
            let loss = x.add_scalar(-1.0).sqr().sum_all();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &grads);
        }
        for v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-2, "{v}");
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("p", "x", Tensor::scalar(0.0));
        let mut opt = Adam::new(&[id], &store, AdamConfig { lr: 0.1, ..Default::default() });
        let g = Graph::new();
        let loss = g.param(&store, id).mul_scalar(5.0).sum_all();
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads);
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-9);
    }
}
