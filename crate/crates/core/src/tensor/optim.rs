//! Adam optimizer and global-norm gradient clipping.

use super::{Params, Tensor};
use std::collections::BTreeMap;

/// Adam with bias correction. One instance per trained model; state is
/// keyed by parameter name so checkpoint/restore cycles stay aligned.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Apply one descent step. `grads` must use the same names as `params`;
    /// missing names are treated as zero gradients.
    pub fn step(&mut self, params: &mut Params, grads: &[(String, Tensor)]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let zero;
            let g = match grads.iter().find(|(n, _)| n == name) {
                Some((_, g)) => g.data(),
                None => {
                    zero = vec![0.0; p.numel()];
                    &zero
                }
            };
            let (m, v) = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Euclidean norm over every gradient tensor jointly.
pub fn global_norm(grads: &[(String, Tensor)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [(String, Tensor)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
