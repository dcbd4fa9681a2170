use crate::element::Element;
use crate::shape::{broadcast_shape, broadcast_strides, for_each_pair, sum_to};
use crate::tensor::{BackwardOp, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

struct BinaryOp {
    kind: Binary,
    out_shape: Vec<usize>,
}

impl<T: Element> BackwardOp<T> for BinaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        let out = &self.out_shape;
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        match self.kind {
            Binary::Add => vec![
                need_a.then(|| sum_to(grad, out, a.shape())),
                need_b.then(|| sum_to(grad, out, b.shape())),
            ],
            Binary::Sub => vec![
                need_a.then(|| sum_to(grad, out, a.shape())),
                need_b.then(|| {
                    let neg: Vec<T> = grad.iter().map(|&g| -g).collect();
                    sum_to(&neg, out, b.shape())
                }),
            ],
            Binary::Mul | Binary::Div => {
                let sa = broadcast_strides(a.shape(), out);
                let sb = broadcast_strides(b.shape(), out);
                let (ad, bd) = (a.data(), b.data());
                let mut ga = need_a.then(|| vec![T::zero(); grad.len()]);
                let mut gb = need_b.then(|| vec![T::zero(); grad.len()]);
                for_each_pair(out, &sa, &sb, |i, ia, ib| {
                    let (x, y, g) = (ad[ia], bd[ib], grad[i]);
                    if self.kind == Binary::Mul {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g * y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = g * x;
                        }
                    } else {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] = g / y;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[i] = -g * x / (y * y);
                        }
                    }
                });
                vec![
                    ga.map(|g| sum_to(&g, out, a.shape())),
                    gb.map(|g| sum_to(&g, out, b.shape())),
                ]
            }
        }
    }
}

fn binary<T: Element>(kind: Binary, a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let out = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!(
            "{}: shapes {:?} and {:?} do not broadcast",
            kind.name(),
            a.shape(),
            b.shape()
        )
    });
    let data = if a.shape() == b.shape() {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| kind.apply(x, y))
            .collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out);
        let sb = broadcast_strides(b.shape(), &out);
        let n: usize = out.iter().product();
        let mut data = vec![T::zero(); n];
        let (ad, bd) = (a.data(), b.data());
        for_each_pair(&out, &sa, &sb, |i, ia, ib| data[i] = kind.apply(ad[ia], bd[ib]));
        data
    };
    Tensor::from_op(
        data,
        &out,
        vec![a.clone(), b.clone()],
        BinaryOp {
            kind,
            out_shape: out.clone(),
        },
    )
}

/// Pointwise functions of a single tensor.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Abs,
    Sqr,
    Recip,
    Softplus,
    Affine(f64, f64),
    Clamp(f64, f64),
}

impl Unary {
    #[inline]
    fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
            Unary::Relu => x.max(T::zero()),
            Unary::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::from_f64(s)
                }
            }
            Unary::Abs => x.abs(),
            Unary::Sqr => x * x,
            Unary::Recip => x.recip(),
            Unary::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            Unary::Affine(m, a) => x * T::from_f64(m) + T::from_f64(a),
            Unary::Clamp(lo, hi) => x.max(T::from_f64(lo)).min(T::from_f64(hi)),
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        let one = T::one();
        let zero = T::zero();
        match self {
            Unary::Neg => -one,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sqrt => T::from_f64(0.5) / y,
            Unary::Tanh => one - y * y,
            Unary::Sigmoid => y * (one - y),
            Unary::Relu => {
                if x > zero {
                    one
                } else {
                    zero
                }
            }
            Unary::LeakyRelu(s) => {
                if x > zero {
                    one
                } else {
                    T::from_f64(s)
                }
            }
            Unary::Abs => {
                if x > zero {
                    one
                } else if x < zero {
                    -one
                } else {
                    zero
                }
            }
            Unary::Sqr => x + x,
            Unary::Recip => -(y * y),
            Unary::Softplus => Unary::Sigmoid.apply(x),
            Unary::Affine(m, _) => T::from_f64(m),
            Unary::Clamp(lo, hi) => {
                if x >= T::from_f64(lo) && x <= T::from_f64(hi) {
                    one
                } else {
                    zero
                }
            }
        }
    }
}

struct UnaryOp(Unary);

impl<T: Element> BackwardOp<T> for UnaryOp {
    fn name(&self) -> &'static str {
        "unary"
    }

    fn backward(&self, inputs: &[Tensor<T>], output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let x = inputs[0].data();
        let y = output.data();
        let g = grad
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&g, (&x, &y))| g * self.0.derivative(x, y))
            .collect();
        vec![Some(g)]
    }
}

pub(crate) fn unary<T: Element>(kind: Unary, x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| kind.apply(v)).collect();
    Tensor::from_op(data, x.shape(), vec![x.clone()], UnaryOp(kind))
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(Binary::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(Binary::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(Binary::Div, self, other)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(Unary::Neg, self)
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(Unary::Exp, self)
    }

    pub fn log(&self) -> Tensor<T> {
        unary(Unary::Log, self)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(Unary::Sqrt, self)
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(Unary::Tanh, self)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(Unary::Sigmoid, self)
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(Unary::Relu, self)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        unary(Unary::LeakyRelu(slope), self)
    }

    pub fn abs(&self) -> Tensor<T> {
        unary(Unary::Abs, self)
    }

    pub fn sqr(&self) -> Tensor<T> {
        unary(Unary::Sqr, self)
    }

    pub fn recip(&self) -> Tensor<T> {
        unary(Unary::Recip, self)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        unary(Unary::Softplus, self)
    }

    /// `x * mul + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor<T> {
        unary(Unary::Affine(mul, add), self)
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(&self, value: f64) -> Tensor<T> {
        self.affine(1.0, value)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        unary(Unary::Clamp(lo, hi), self)
    }
}

macro_rules! impl_operator {
    ($trait:ident, $method:ident) => {
        impl<T: Element> std::ops::$trait<&Tensor<T>> for &Tensor<T> {
            type Output = Tensor<T>;
            fn $method(self, rhs: &Tensor<T>) -> Tensor<T> {
                Tensor::$method(self, rhs)
            }
        }
    };
}

impl_operator!(Add, add);
impl_operator!(Sub, sub);
impl_operator!(Mul, mul);
impl_operator!(Div, div);
