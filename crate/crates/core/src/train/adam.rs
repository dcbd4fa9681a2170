use std::collections::BTreeMap;

use crate::autograd::Var;

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every `(name, var)` with its gradient.
    pub fn step(&mut self, params: &[(String, &Var)], grads: &[Vec<f32>]) {
        assert_eq!(params.len(), grads.len());
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for ((name, var), g) in params.iter().zip(grads) {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut w = var.to_vec();
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                w[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
            var.set(w);
        }
    }
}

/// Scales `grads` in place to global L2 norm at most `max`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max {
        if norm > max && norm.is_finite() {
            let s = (max / norm) as f32;
            for v in grads.iter_mut().flat_map(|g| g.iter_mut()) {
                *v *= s;
            }
        }
    }
    norm
}
