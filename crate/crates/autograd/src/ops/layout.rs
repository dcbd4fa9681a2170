use crate::element::Element;
use crate::shape::{contiguous_strides, expand, sum_to};
use crate::tensor::{BackwardOp, Tensor};

struct Reshape;

impl<T: Element> BackwardOp<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Permute {
    perm: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut inverse = vec![0; self.perm.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            inverse[p] = i;
        }
        vec![Some(permute_data(grad, output.shape(), &inverse))]
    }
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let src_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

struct Narrow {
    axis: usize,
    start: usize,
}

impl<T: Element> BackwardOp<T> for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let src = inputs[0].shape();
        let outer: usize = src[..self.axis].iter().product();
        let inner: usize = src[self.axis + 1..].iter().product();
        let len = output.shape()[self.axis];
        let full = src[self.axis];
        let mut g = vec![T::zero(); inputs[0].numel()];
        for o in 0..outer {
            let dst = (o * full + self.start) * inner;
            let s = o * len * inner;
            g[dst..dst + len * inner].copy_from_slice(&grad[s..s + len * inner]);
        }
        vec![Some(g)]
    }
}

struct Concat {
    axis: usize,
}

impl<T: Element> BackwardOp<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let out = output.shape();
        let outer: usize = out[..self.axis].iter().product();
        let inner: usize = out[self.axis + 1..].iter().product();
        let total = out[self.axis];
        let mut start = 0;
        inputs
            .iter()
            .map(|t| {
                let len = t.shape()[self.axis];
                let g = t.requires_grad().then(|| {
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let s = (o * total + start) * inner;
                        g.extend_from_slice(&grad[s..s + len * inner]);
                    }
                    g
                });
                start += len;
                g
            })
            .collect()
    }
}

struct Expand {
    src_shape: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for Expand {
    fn name(&self) -> &'static str {
        "broadcast_as"
    }

    fn backward(&self, _inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        vec![Some(sum_to(grad, output.shape(), &self.src_shape))]
    }
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op_shared(self.shared_data(), shape, vec![self.clone()], Reshape)
    }

    /// Inserts a size-1 axis at `axis`.
    pub fn unsqueeze(&self, axis: usize) -> Tensor<T> {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Tensor<T> {
        assert_eq!(perm.len(), self.rank(), "permutation rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Tensor::from_op(
            data,
            &out_shape,
            vec![self.clone()],
            Permute {
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn t(&self) -> Tensor<T> {
        let r = self.rank();
        assert!(r >= 2);
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(
            start + len <= shape[axis],
            "narrow {start}+{len} exceeds axis {axis} of {shape:?}"
        );
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let d = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&d[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Tensor::from_op(data, &out_shape, vec![self.clone()], Narrow { axis, start })
    }

    /// Splits into equally sized chunks along `axis`.
    pub fn chunk(&self, chunks: usize, axis: usize) -> Vec<Tensor<T>> {
        let len = self.dim(axis);
        assert!(len % chunks == 0, "axis {axis} of size {len} not divisible by {chunks}");
        let step = len / chunks;
        (0..chunks).map(|i| self.narrow(axis, i * step, step)).collect()
    }

    pub fn concat(tensors: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!tensors.is_empty(), "concat of no tensors");
        let first = tensors[0].shape();
        for t in tensors {
            assert_eq!(t.rank(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in t.shape().iter().zip(first).enumerate() {
                assert!(
                    i == axis || a == b,
                    "concat shapes {:?} and {:?} differ off axis {axis}",
                    t.shape(),
                    first
                );
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = first.to_vec();
        out_shape[axis] = total;
        Tensor::from_op(data, &out_shape, tensors.to_vec(), Concat { axis })
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(tensors: &[Tensor<T>], axis: usize) -> Tensor<T> {
        let expanded: Vec<Tensor<T>> = tensors.iter().map(|t| t.unsqueeze(axis)).collect();
        Tensor::concat(&expanded, axis)
    }

    pub fn broadcast_as(&self, shape: &[usize]) -> Tensor<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let data = expand(self.data(), self.shape(), shape);
        Tensor::from_op(
            data,
            shape,
            vec![self.clone()],
            Expand {
                src_shape: self.shape().to_vec(),
            },
        )
    }
}
