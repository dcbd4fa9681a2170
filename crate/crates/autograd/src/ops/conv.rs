use crate::element::Element;
use crate::ops::matmul::matmul_raw;
use crate::tensor::{BackwardOp, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[c_in, h, w]` into `[c_in*kh*kw, out_h*out_w]` with zero padding.
fn im2col<T: Element>(g: &Geometry, x: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (i, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im<T: Element>(g: &Geometry, cols: &[T], dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, v) in line[ix0..ix0 + hi - lo].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (i, v) in s.iter().enumerate() {
                            line[ix0 + i * g.stride] += *v;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2d {
    geom: Geometry,
    batch: usize,
    c_out: usize,
}

impl<T: Element> BackwardOp<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let g = &self.geom;
        let (x, w) = (&inputs[0], &inputs[1]);
        let bias = inputs.get(2);
        let (rows, ncols) = (g.col_rows(), g.col_cols());
        let in_size = g.c_in * g.h * g.w;
        let out_size = self.c_out * ncols;

        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gw = w.requires_grad().then(|| vec![T::zero(); w.numel()]);
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * ncols }];
        for b in 0..self.batch {
            let gout = &grad[b * out_size..(b + 1) * out_size];
            let xb = &x.data()[b * in_size..(b + 1) * in_size];
            if let Some(gw) = gw.as_mut() {
                let col_data: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(g, xb, &mut cols);
                    &cols
                };
                let beta = if b == 0 { T::zero() } else { T::one() };
                // dW[c_out, rows] += dY[c_out, ncols] . cols^T
                matmul_raw(gout, self.c_out, ncols, false, col_data, rows, ncols, true, beta, gw);
            }
            if let Some(gx) = gx.as_mut() {
                let gxb = &mut gx[b * in_size..(b + 1) * in_size];
                if g.is_pointwise() {
                    matmul_raw(w.data(), self.c_out, rows, true, gout, self.c_out, ncols, false, T::zero(), gxb);
                } else {
                    matmul_raw(w.data(), self.c_out, rows, true, gout, self.c_out, ncols, false, T::zero(), &mut cols);
                    col2im(g, &cols, gxb);
                }
            }
        }
        let gb = bias.filter(|b| b.requires_grad()).map(|_| {
            let mut gb = vec![T::zero(); self.c_out];
            for b in 0..self.batch {
                for (co, acc) in gb.iter_mut().enumerate() {
                    let s = b * out_size + co * ncols;
                    *acc += grad[s..s + ncols].iter().copied().sum::<T>();
                }
            }
            gb
        });
        let mut out = vec![gx, gw];
        if bias.is_some() {
            out.push(gb);
        }
        out
    }
}

impl<T: Element> Tensor<T> {
    /// 2D cross-correlation of `[n, c_in, h, w]` with `[c_out, c_in, kh, kw]` weights.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
        let (n, c_in, h, w) = self.dims4();
        let (c_out, wc_in, kh, kw) = weight.dims4();
        assert_eq!(c_in, wc_in, "conv2d input has {c_in} channels, weight expects {wc_in}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[c_out], "conv2d bias shape");
        }
        let geom = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_size = c_in * h * w;
        let out_size = c_out * ncols;
        let mut out = vec![T::zero(); n * out_size];
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * ncols }];
        for b in 0..n {
            let xb = &self.data()[b * in_size..(b + 1) * in_size];
            let col_data: &[T] = if geom.is_pointwise() {
                xb
            } else {
                im2col(&geom, xb, &mut cols);
                &cols
            };
            let ob = &mut out[b * out_size..(b + 1) * out_size];
            matmul_raw(weight.data(), c_out, rows, false, col_data, rows, ncols, false, T::zero(), ob);
            if let Some(bias) = bias {
                for (co, &bv) in bias.data().iter().enumerate() {
                    for v in &mut ob[co * ncols..(co + 1) * ncols] {
                        *v += bv;
                    }
                }
            }
        }
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Tensor::from_op(
            out,
            &[n, c_out, geom.out_h, geom.out_w],
            inputs,
            Conv2d {
                geom,
                batch: n,
                c_out,
            },
        )
    }
}
