use rfgen_autograd::{Element, Tensor, Var};

use crate::nn::{join, Conv2d, Init, Module, ResBlockDown, LEAKY_SLOPE};

/// Unconditional patch discriminator: four down-sampling residual blocks and
/// a 3x3 convolution to one logit per patch. No normalization, so every
/// logit depends only on its receptive field.
#[derive(Debug)]
pub struct Discriminator<T: Element = f32> {
    blocks: Vec<ResBlockDown<T>>,
    out: Conv2d<T>,
}

impl<T: Element> Discriminator<T> {
    pub fn new(init: &Init, widths: [usize; 4]) -> Self {
        let mut blocks = Vec::new();
        let mut prev = 3;
        for (i, &c) in widths.iter().enumerate() {
            blocks.push(ResBlockDown::new(&init.sub(&format!("block{i}")), prev, c, i > 0));
            prev = c;
        }
        Discriminator {
            blocks,
            out: Conv2d::new(&init.sub("out"), prev, 1, 3, 1),
        }
    }

    /// `[n, 1, H/16, W/16]` logits.
    pub fn forward(&self, image: &Tensor<T>) -> Tensor<T> {
        let mut h = image.clone();
        for b in &self.blocks {
            h = b.forward(&h);
        }
        self.out.forward(&h.leaky_relu(LEAKY_SLOPE))
    }
}

impl<T: Element> Module<T> for Discriminator<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
        self.out.collect_params(&join(prefix, "out"), out);
    }
}
