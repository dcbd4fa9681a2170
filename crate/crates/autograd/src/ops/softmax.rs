use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

struct Softmax {
    axis: usize,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> BackwardOp<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (outer, len, inner) = layout(output.shape(), self.axis);
        let y = output.data();
        let mut g = vec![T::zero(); y.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for l in 0..len {
                    let idx = base + l * inner;
                    dot += grad[idx] * y[idx];
                }
                for l in 0..len {
                    let idx = base + l * inner;
                    g[idx] = y[idx] * (grad[idx] - dot);
                }
            }
        }
        vec![Some(g)]
    }
}

impl<T: Element> Tensor<T> {
    /// Softmax along `axis`, shifted by the maximum for stability.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let (outer, len, inner) = layout(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(x[base + l * inner]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    total += e;
                }
                for l in 0..len {
                    out[base + l * inner] /= total;
                }
            }
        }
        Tensor::from_op(out, self.shape(), vec![self.clone()], Softmax { axis })
    }
}
