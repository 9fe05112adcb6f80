use serde::{Deserialize, Serialize};

use super::network::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimiser over the trainable parameters of one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    steps: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { kind, lr, momentum, weight_decay, steps: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        let n = net.values().len();
        if self.first.is_empty() {
            self.first = vec![None; n];
            self.second = vec![None; n];
        }
        self.steps += 1;
        let t = self.steps as i32;
        for id in 0..n {
            let Some(g) = grads.slot(id) else { continue };
            if !net.is_trainable(id) {
                continue;
            }
            let m = self.first[id].get_or_insert_with(|| vec![0.0; g.len()]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let w = net.value_mut(id);
                    for ((w, &g), v) in w.iter_mut().zip(g).zip(m.iter_mut()) {
                        *v = self.momentum * *v + g + self.weight_decay * *w;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = self.second[id].get_or_insert_with(|| vec![0.0; g.len()]);
                    let c1 = 1.0 - ADAM_BETA1.powi(t);
                    let c2 = 1.0 - ADAM_BETA2.powi(t);
                    let w = net.value_mut(id);
                    for (((w, &g), m), s) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
                        let g = g + self.weight_decay * *w;
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*s / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
