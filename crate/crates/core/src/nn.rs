//! Parameterized layers and the residual blocks the networks are built from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfgen_autograd::{BackwardOp, Element, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Something that owns named trainable parameters.
pub trait Module<T: Element> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>);

    fn named_params(&self) -> Vec<(String, &Var<T>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, v)| v.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// FNV-1a, used to derive stable per-parameter seeds from names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Deterministic parameter initializer.
///
/// Each parameter draws from its own stream keyed by `(seed, name)`, so adding
/// a layer never shifts the initial values of the others.
#[derive(Debug, Clone)]
pub struct Init {
    seed: u64,
    prefix: String,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&self, name: &str) -> Init {
        Init {
            seed: self.seed,
            prefix: join(&self.prefix, name),
        }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let key = join(&self.prefix, name);
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(key.as_bytes()))
    }

    pub fn uniform<T: Element>(&self, name: &str, shape: &[usize], bound: f64) -> Var<T> {
        let mut rng = self.rng(name);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Var::new(data, shape)
    }

    pub fn constant<T: Element>(&self, shape: &[usize], value: f64) -> Var<T> {
        let n: usize = shape.iter().product();
        Var::new(vec![T::from_f64(value); n], shape)
    }
}

#[derive(Debug)]
pub struct Conv2d<T: Element = f32> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    stride: usize,
    pad: usize,
}

impl<T: Element> Conv2d<T> {
    /// Square kernel with "same" padding, uniform fan-in initialization.
    pub fn new(init: &Init, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: init.uniform("weight", &[c_out, c_in, kernel, kernel], bound),
            bias: init.uniform("bias", &[c_out], bound),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn zeroed(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Conv2d {
            weight: Var::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Var::zeros(&[c_out]),
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&self.weight.tensor(), Some(&self.bias.tensor()), self.stride, self.pad)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
}

/// Per-sample, per-channel normalization over space with a learned affine.
#[derive(Debug)]
pub struct InstanceNorm<T: Element = f32> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
}

impl<T: Element> InstanceNorm<T> {
    const EPS: f64 = 1e-5;

    pub fn new(init: &Init, channels: usize) -> Self {
        InstanceNorm {
            gamma: init.constant(&[1, channels, 1, 1], 1.0),
            beta: init.constant(&[1, channels, 1, 1], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        instance_norm(x, &self.gamma.tensor(), &self.beta.tensor(), Self::EPS)
    }
}

/// `gamma * (x - mean) / sqrt(var + eps) + beta` per sample and channel, with
/// `gamma`, `beta` of shape `[1, c, 1, 1]`.
pub fn instance_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.shape(), &[1, c, 1, 1], "instance norm scale shape");
    assert_eq!(beta.shape(), &[1, c, 1, 1], "instance norm shift shape");
    let plane = h * w;
    let inv_plane = T::from_f64(1.0 / plane as f64);
    let eps = T::from_f64(eps);
    let mut normalized = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); n * c];
    let mut out = vec![T::zero(); x.numel()];
    for p in 0..n * c {
        let ch = p % c;
        let xs = &x.data()[p * plane..(p + 1) * plane];
        let mean = xs.iter().copied().sum::<T>() * inv_plane;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_plane;
        let is = (var + eps).sqrt().recip();
        inv_std[p] = is;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..plane {
            let xh = (xs[i] - mean) * is;
            normalized[p * plane + i] = xh;
            out[p * plane + i] = xh * g + b;
        }
    }
    Tensor::from_op(
        out,
        x.shape(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        InstanceNormOp {
            normalized,
            inv_std,
            channels: c,
        },
    )
}

struct InstanceNormOp<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
}

impl<T: Element> BackwardOp<T> for InstanceNormOp<T> {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(&self, inputs: &[Tensor<T>], _output: &Tensor<T>, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let (x, gamma, beta) = (&inputs[0], &inputs[1], &inputs[2]);
        let c = self.channels;
        let plane = x.numel() / self.inv_std.len();
        let inv_plane = T::from_f64(1.0 / plane as f64);
        let mut gx = x.requires_grad().then(|| vec![T::zero(); x.numel()]);
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for (p, &is) in self.inv_std.iter().enumerate() {
            let ch = p % c;
            let g = &grad[p * plane..(p + 1) * plane];
            let xh = &self.normalized[p * plane..(p + 1) * plane];
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for (&gv, &xv) in g.iter().zip(xh) {
                sum_g += gv;
                sum_gx += gv * xv;
            }
            gg[ch] += sum_gx;
            gb[ch] += sum_g;
            if let Some(gx) = gx.as_mut() {
                let scale = gamma.data()[ch] * is;
                let (mg, mgx) = (sum_g * inv_plane, sum_gx * inv_plane);
                for i in 0..plane {
                    gx[p * plane + i] = scale * (g[i] - mg - xh[i] * mgx);
                }
            }
        }
        vec![
            gx,
            gamma.requires_grad().then_some(gg),
            beta.requires_grad().then_some(gb),
        ]
    }
}

impl<T: Element> Module<T> for InstanceNorm<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }
}

/// Down-sampling residual block (BigGAN discriminator style, Leaky-ReLU,
/// no normalization). Halves the resolution with a stride-2 convolution.
#[derive(Debug)]
pub struct ResBlockDown<T: Element = f32> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    shortcut: Conv2d<T>,
    preactivate: bool,
}

impl<T: Element> ResBlockDown<T> {
    /// `preactivate = false` for blocks that read raw images.
    pub fn new(init: &Init, c_in: usize, c_out: usize, preactivate: bool) -> Self {
        ResBlockDown {
            conv1: Conv2d::new(&init.sub("conv1"), c_in, c_out, 3, 1),
            conv2: Conv2d::new(&init.sub("conv2"), c_out, c_out, 3, 2),
            shortcut: Conv2d::new(&init.sub("shortcut"), c_in, c_out, 1, 1),
            preactivate,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = if self.preactivate {
            x.leaky_relu(LEAKY_SLOPE)
        } else {
            x.clone()
        };
        let h = self.conv1.forward(&h).leaky_relu(LEAKY_SLOPE);
        let h = self.conv2.forward(&h);
        h.add(&self.shortcut.forward(&x.avg_pool2d(2)))
    }
}

impl<T: Element> Module<T> for ResBlockDown<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.shortcut.collect_params(&join(prefix, "shortcut"), out);
    }
}

/// Up-sampling residual block: instance norm, Leaky-ReLU, nearest x2 then
/// convolution.
#[derive(Debug)]
pub struct ResBlockUp<T: Element = f32> {
    norm1: InstanceNorm<T>,
    conv1: Conv2d<T>,
    norm2: InstanceNorm<T>,
    conv2: Conv2d<T>,
    shortcut: Conv2d<T>,
}

impl<T: Element> ResBlockUp<T> {
    pub fn new(init: &Init, c_in: usize, c_out: usize) -> Self {
        ResBlockUp {
            norm1: InstanceNorm::new(&init.sub("norm1"), c_in),
            conv1: Conv2d::new(&init.sub("conv1"), c_in, c_out, 3, 1),
            norm2: InstanceNorm::new(&init.sub("norm2"), c_out),
            conv2: Conv2d::new(&init.sub("conv2"), c_out, c_out, 3, 1),
            shortcut: Conv2d::new(&init.sub("shortcut"), c_in, c_out, 1, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.norm1.forward(x).leaky_relu(LEAKY_SLOPE).upsample_nearest2d(2);
        let h = self.conv1.forward(&h);
        let h = self.conv2.forward(&self.norm2.forward(&h).leaky_relu(LEAKY_SLOPE));
        // a 1x1 convolution commutes with nearest up-sampling
        h.add(&self.shortcut.forward(x).upsample_nearest2d(2))
    }
}

impl<T: Element> Module<T> for ResBlockUp<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
        self.shortcut.collect_params(&join(prefix, "shortcut"), out);
    }
}

/// Resolution-preserving residual block with identity shortcut.
#[derive(Debug)]
pub struct ResBlock<T: Element = f32> {
    norm1: InstanceNorm<T>,
    conv1: Conv2d<T>,
    norm2: InstanceNorm<T>,
    conv2: Conv2d<T>,
}

impl<T: Element> ResBlock<T> {
    pub fn new(init: &Init, channels: usize) -> Self {
        ResBlock {
            norm1: InstanceNorm::new(&init.sub("norm1"), channels),
            conv1: Conv2d::new(&init.sub("conv1"), channels, channels, 3, 1),
            norm2: InstanceNorm::new(&init.sub("norm2"), channels),
            conv2: Conv2d::new(&init.sub("conv2"), channels, channels, 3, 1),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward(&self.norm1.forward(x).leaky_relu(LEAKY_SLOPE));
        let h = self.conv2.forward(&self.norm2.forward(&h).leaky_relu(LEAKY_SLOPE));
        x.add(&h)
    }
}

impl<T: Element> Module<T> for ResBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.norm1.collect_params(&join(prefix, "norm1"), out);
        self.conv1.collect_params(&join(prefix, "conv1"), out);
        self.norm2.collect_params(&join(prefix, "norm2"), out);
        self.conv2.collect_params(&join(prefix, "conv2"), out);
    }
}
