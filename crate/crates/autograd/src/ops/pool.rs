use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

struct AvgPool {
    k: usize,
}

impl<T: Element> BackwardOp<T> for AvgPool {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (_, _, h, w) = inputs[0].dims4();
        let (n, c, oh, ow) = output.dims4();
        let k = self.k;
        let norm = T::from_f64(1.0 / (k * k) as f64);
        let mut g = vec![T::zero(); inputs[0].numel()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = grad[(p * oh + oy) * ow + ox] * norm;
                    for dy in 0..k {
                        let row = (p * h + oy * k + dy) * w + ox * k;
                        for v in &mut g[row..row + k] {
                            *v += gv;
                        }
                    }
                }
            }
        }
        vec![Some(g)]
    }
}

struct Upsample {
    factor: usize,
}

impl<T: Element> BackwardOp<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (n, c, h, w) = inputs[0].dims4();
        let (_, _, oh, ow) = output.dims4();
        let f = self.factor;
        let mut g = vec![T::zero(); inputs[0].numel()];
        for p in 0..n * c {
            for y in 0..h {
                let dst = &mut g[(p * h + y) * w..(p * h + y + 1) * w];
                for dy in 0..f {
                    let row = &grad[(p * oh + y * f + dy) * ow..(p * oh + y * f + dy + 1) * ow];
                    for (d, chunk) in dst.iter_mut().zip(row.chunks_exact(f)) {
                        for &v in chunk {
                            *d += v;
                        }
                    }
                }
            }
        }
        let _ = ow;
        vec![Some(g)]
    }
}

struct MaxPool {
    /// Flat input index of the winner of every output element.
    argmax: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for MaxPool {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let mut g = vec![T::zero(); inputs[0].numel()];
        for (&i, &gv) in self.argmax.iter().zip(grad) {
            g[i] += gv;
        }
        vec![Some(g)]
    }
}

impl<T: Element> Tensor<T> {
    /// Non-overlapping `k x k` max pooling; the gradient goes to the first
    /// maximal element of each window.
    pub fn max_pool2d(&self, k: usize) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        assert!(k >= 1 && h >= k && w >= k, "max_pool2d window {k} on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let d = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (p * h + oy * k) * w + ox * k;
                    for dy in 0..k {
                        let row = (p * h + oy * k + dy) * w + ox * k;
                        for i in row..row + k {
                            if d[i] > d[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        Tensor::from_op(out, &[n, c, oh, ow], vec![self.clone()], MaxPool { argmax })
    }

    /// Non-overlapping `k x k` average pooling; trailing rows/columns that do
    /// not fill a window are dropped.
    pub fn avg_pool2d(&self, k: usize) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        assert!(k >= 1 && h >= k && w >= k, "avg_pool2d window {k} on {h}x{w}");
        let (oh, ow) = (h / k, w / k);
        let norm = T::from_f64(1.0 / (k * k) as f64);
        let d = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        let row = (p * h + oy * k + dy) * w + ox * k;
                        for &v in &d[row..row + k] {
                            acc += v;
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
        Tensor::from_op(out, &[n, c, oh, ow], vec![self.clone()], AvgPool { k })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(&self, factor: usize) -> Tensor<T> {
        let (n, c, h, w) = self.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let d = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                let src = &d[(p * h + y) * w..(p * h + y + 1) * w];
                let first = (p * oh + y * factor) * ow;
                for (chunk, &v) in out[first..first + ow].chunks_exact_mut(factor).zip(src) {
                    chunk.fill(v);
                }
                for dy in 1..factor {
                    out.copy_within(first..first + ow, first + dy * ow);
                }
            }
        }
        Tensor::from_op(out, &[n, c, oh, ow], vec![self.clone()], Upsample { factor })
    }
}
