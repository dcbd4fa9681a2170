use crate::element::Element;
use crate::shape::{expand, sum_to};
use crate::tensor::{BackwardOp, Tensor};

struct SumTo {
    src_shape: Vec<usize>,
    kept_shape: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for SumTo {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(expand(grad, &self.kept_shape, &self.src_shape))]
    }
}

struct MaxAxis {
    argmax: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for MaxAxis {
    fn name(&self) -> &'static str {
        "max"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); inputs[0].numel()];
        for (&src, &gv) in self.argmax.iter().zip(grad) {
            g[src] += gv;
        }
        vec![Some(g)]
    }
}

fn kept_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut kept = shape.to_vec();
    for &a in axes {
        assert!(a < shape.len(), "axis {a} out of range for shape {shape:?}");
        kept[a] = 1;
    }
    kept
}

impl<T: Element> Tensor<T> {
    /// Sum over `axes`; reduced axes stay as size 1 when `keepdim`.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let kept = kept_shape(self.shape(), axes);
        let data = sum_to(self.data(), self.shape(), &kept);
        let summed = Tensor::from_op(
            data,
            &kept,
            vec![self.clone()],
            SumTo {
                src_shape: self.shape().to_vec(),
                kept_shape: kept.clone(),
            },
        );
        if keepdim {
            summed
        } else {
            let squeezed: Vec<usize> = self
                .shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect();
            summed.reshape(&squeezed)
        }
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_axes(axes, keepdim).scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Maximum along `axis` (kept as size 1); the gradient flows to the first maximizer.
    pub fn max_axis_keepdim(&self, axis: usize) -> Tensor<T> {
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        let d = self.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for l in 1..len {
                    let idx = base + l * inner;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
        let kept = kept_shape(shape, &[axis]);
        Tensor::from_op(out, &kept, vec![self.clone()], MaxAxis { argmax })
    }
}
