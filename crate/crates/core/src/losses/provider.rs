use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfgen_autograd::{Element, Tensor};
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{contract, io_err, Error, Result};

/// Layer names in forward order, VGG-19 convention.
pub const LAYERS: [&str; 12] = [
    "relu1_1", "relu1_2", "relu2_1", "relu2_2", "relu3_1", "relu3_2", "relu3_3", "relu3_4", "relu4_1", "relu4_2",
    "relu4_3", "relu4_4",
];

/// Layers compared by the perceptual loss and distance.
pub const PERCEPTUAL_LAYERS: [&str; 4] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1"];

/// Layers whose Gram matrices the style loss compares.
pub const STYLE_LAYERS: [&str; 3] = ["relu2_2", "relu3_4", "relu4_4"];

/// Index into `LAYERS` after which a 2x2 max pool follows.
const POOL_AFTER: [usize; 3] = [1, 3, 7];

/// Indices of the convolutions inside torchvision's `vgg19().features`.
const TORCHVISION_CONV_INDICES: [usize; 12] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25];

pub const RANDOM_CORRECTNESS_LAYER: &str = "relu1_2";

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Frozen feature extractor with a VGG-19 layout up to `relu4_4`.
///
/// Either carries pretrained weights, or seeded random weights at reduced
/// widths. Parameters are plain tensors, never trained; gradients still reach
/// the input image.
#[derive(Debug, Clone)]
pub struct FeatureProvider<T: Element = f32> {
    convs: Vec<(Tensor<T>, Tensor<T>)>,
    imagenet_input: bool,
    id: String,
}

impl<T: Element> FeatureProvider<T> {
    /// Random stack with `widths` channels in the four blocks. He-uniform
    /// weights, zero biases, edge-replicating padding.
    pub fn random(seed: u64, widths: [usize; 4]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(LAYERS.len());
        let mut c_in = 3;
        for name in LAYERS {
            let block = name.as_bytes()[4] - b'1';
            let c_out = widths[block as usize];
            let fan_in = (c_in * 9) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let w = (0..c_out * c_in * 9).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
            convs.push((Tensor::from_vec(w, &[c_out, c_in, 3, 3]), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        FeatureProvider {
            convs,
            imagenet_input: false,
            id: format!("random-stack:seed={seed}:widths={}x{}x{}x{}", widths[0], widths[1], widths[2], widths[3]),
        }
    }

    /// Pretrained VGG-19 weights from a safetensors file with torchvision
    /// names (`features.{i}.weight`, `features.{i}.bias`).
    pub fn load_vgg19(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let file = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("{}: not a safetensors file: {e}", path.display())))?;
        let read = |name: &str| -> Result<(Vec<T>, Vec<usize>)> {
            let view = file
                .tensor(name)
                .map_err(|e| Error::Config(format!("{}: missing `{name}`: {e}", path.display())))?;
            let data = match view.dtype() {
                Dtype::F32 => view
                    .data()
                    .chunks_exact(4)
                    .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                    .collect(),
                other => {
                    return Err(Error::Config(format!("{}: `{name}` has dtype {other:?}, expected F32", path.display())))
                }
            };
            Ok((data, view.shape().to_vec()))
        };
        let mut convs = Vec::with_capacity(LAYERS.len());
        let mut c_in = 3;
        for idx in TORCHVISION_CONV_INDICES {
            let (w, ws) = read(&format!("features.{idx}.weight"))?;
            let (b, bs) = read(&format!("features.{idx}.bias"))?;
            if ws.len() != 4 || ws[1] != c_in || ws[2] != 3 || ws[3] != 3 || bs != [ws[0]] {
                return Err(Error::Config(format!(
                    "{}: features.{idx} has weight {ws:?} and bias {bs:?}, expected [_, {c_in}, 3, 3]",
                    path.display()
                )));
            }
            c_in = ws[0];
            convs.push((Tensor::from_vec(w, &ws), Tensor::from_vec(b, &bs)));
        }
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        Ok(FeatureProvider {
            convs,
            imagenet_input: true,
            id: format!("vgg19:{hex}"),
        })
    }

    /// Identifies the embedder in metric reports.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channels(&self, layer: &str) -> Option<usize> {
        LAYERS.iter().position(|l| *l == layer).map(|i| self.convs[i].0.dim(0))
    }

    /// Down-sampling factor of `layer` relative to the input image.
    pub fn stride(layer: &str) -> Option<usize> {
        let i = LAYERS.iter().position(|l| *l == layer)?;
        Some(1 << POOL_AFTER.iter().filter(|&&p| p < i).count())
    }

    /// Default layer for scoring a flow whose resolution is the image's
    /// divided by `factor`. Pretrained weights use the first layer of the block
    /// at that stride (the deepest block beyond it). The random stack uses
    /// `relu1_2` at every level, average-pooled to the flow resolution: its
    /// deeper random layers barely separate matching from non-matching
    /// locations.
    pub fn correctness_layer(&self, factor: usize) -> &'static str {
        if !self.imagenet_input {
            return RANDOM_CORRECTNESS_LAYER;
        }
        match factor {
            0 | 1 => "relu1_1",
            2 => "relu2_1",
            4 => "relu3_1",
            _ => "relu4_1",
        }
    }

    /// Activations of the requested layers, in the order requested. `image`
    /// is `[n, 3, H, W]` in `[-1, 1]`.
    pub fn features(&self, image: &Tensor<T>, layers: &[&str]) -> Result<Vec<Tensor<T>>> {
        let idx: Vec<usize> = layers
            .iter()
            .map(|l| {
                LAYERS
                    .iter()
                    .position(|x| x == l)
                    .ok_or_else(|| contract("feature_provider", format!("unknown layer `{l}`")))
            })
            .collect::<Result<_>>()?;
        if image.rank() != 4 || image.dim(1) != 3 {
            return Err(contract("feature_provider", format!("expected an [n, 3, H, W] image, got {:?}", image.shape())));
        }
        let deepest = idx.iter().copied().max().unwrap_or(0);
        if image.dim(2) < 8 || image.dim(3) < 8 {
            return Err(contract("feature_provider", format!("image {:?} smaller than 8x8", image.shape())));
        }
        let mut h = self.prepare(image);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; layers.len()];
        for i in 0..=deepest {
            if i > 0 && POOL_AFTER.contains(&(i - 1)) {
                h = h.max_pool2d(2);
            }
            let (w, b) = &self.convs[i];
            h = if self.imagenet_input {
                h.conv2d(w, Some(b), 1, 1).relu()
            } else {
                replicate_pad(&h).conv2d(w, Some(b), 1, 0).relu()
            };
            for (slot, &want) in out.iter_mut().zip(&idx) {
                if want == i {
                    *slot = Some(h.clone());
                }
            }
        }
        Ok(out.into_iter().map(|t| t.expect("every requested layer is reached")).collect())
    }

    fn prepare(&self, image: &Tensor<T>) -> Tensor<T> {
        if !self.imagenet_input {
            return image.clone();
        }
        // [-1, 1] -> [0, 1] -> ImageNet standardization
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::from_f64(0.5 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN
            .iter()
            .zip(IMAGENET_STD)
            .map(|(m, s)| T::from_f64((0.5 - m) / s))
            .collect();
        image
            .mul(&Tensor::from_vec(scale, &[1, 3, 1, 1]))
            .add(&Tensor::from_vec(shift, &[1, 3, 1, 1]))
    }
}

/// One-pixel edge replication on both spatial axes. The random stack pads
/// this way so that uniform regions give the same features at the frame edge
/// as inside it.
fn replicate_pad<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = x.dims4();
    let x = Tensor::concat(&[x.narrow(3, 0, 1), x.clone(), x.narrow(3, w - 1, 1)], 3);
    Tensor::concat(&[x.narrow(2, 0, 1), x.clone(), x.narrow(2, h - 1, 1)], 2)
}
