use crate::element::Element;
use crate::tensor::{BackwardOp, Tensor};

/// Row-major `[m, k]` view, optionally read transposed.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transposed: bool,
}

impl<T> Mat<'_, T> {
    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = a . b + beta * out`.
fn gemm_into<T: Element>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the views above describe in-bounds matrices and `out` is a separate buffer.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_raw<T: Element>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    a_t: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    b_t: bool,
    beta: T,
    out: &mut [T],
) {
    gemm_into(
        Mat {
            data: a,
            rows: a_rows,
            cols: a_cols,
            transposed: a_t,
        },
        Mat {
            data: b,
            rows: b_rows,
            cols: b_cols,
            transposed: b_t,
        },
        beta,
        out,
    );
}

struct MatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

impl<T: Element> BackwardOp<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![T::zero(); a.numel()];
            for bi in 0..self.batch {
                let boff = if self.b_shared { 0 } else { bi * k * n };
                matmul_raw(
                    &grad[bi * m * n..(bi + 1) * m * n],
                    m,
                    n,
                    false,
                    &b.data()[boff..boff + k * n],
                    k,
                    n,
                    true,
                    T::zero(),
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                );
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![T::zero(); b.numel()];
            for bi in 0..self.batch {
                let boff = if self.b_shared { 0 } else { bi * k * n };
                let beta = if self.b_shared && bi > 0 { T::one() } else { T::zero() };
                matmul_raw(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    m,
                    k,
                    true,
                    &grad[bi * m * n..(bi + 1) * m * n],
                    m,
                    n,
                    false,
                    beta,
                    &mut gb[boff..boff + k * n],
                );
            }
            gb
        });
        vec![ga, gb]
    }
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product over the last two axes.
    ///
    /// `other` either has the same leading axes as `self` or is a plain matrix
    /// shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul inner dims {sa:?} x {sb:?}");
        let lead = &sa[..sa.len() - 2];
        let b_shared = sb.len() == 2 && !lead.is_empty();
        if !b_shared {
            assert_eq!(lead, &sb[..sb.len() - 2], "matmul batch dims {sa:?} x {sb:?}");
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let boff = if b_shared { 0 } else { bi * k * n };
            matmul_raw(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                m,
                k,
                false,
                &other.data()[boff..boff + k * n],
                k,
                n,
                false,
                T::zero(),
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Tensor::from_op(
            out,
            &shape,
            vec![self.clone(), other.clone()],
            MatMul {
                batch,
                m,
                k,
                n,
                b_shared,
            },
        )
    }
}
