//! Central finite-difference gradient checks.
//!
//! Only forward evaluations are used, so the reference never shares code with
//! the backward passes it is checking.

use crate::tensor::Tensor;

/// Comparison of one input's analytic gradient against finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`, or the absolute
    /// difference norm when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na = self.analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = self.numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Checks `d f / d inputs[i]` for every input.
///
/// `f` receives the inputs as vars and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Vec<GradCheck>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let vars: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::new_var(t.to_vec(), t.shape()))
        .collect();
    let out = f(&vars);
    let grads = out.backward();
    vars.iter()
        .enumerate()
        .map(|(i, v)| {
            let analytic = grads
                .get(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; v.numel()]);
            let mut numeric = Vec::with_capacity(v.numel());
            for j in 0..v.numel() {
                let eval = |delta: f64| {
                    let probe: Vec<Tensor<f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            let mut d = t.to_vec();
                            if k == i {
                                d[j] += delta;
                            }
                            Tensor::from_vec(d, t.shape())
                        })
                        .collect();
                    f(&probe).item()
                };
                numeric.push((eval(eps) - eval(-eps)) / (2.0 * eps));
            }
            GradCheck { analytic, numeric }
        })
        .collect()
}
