use rfgen_autograd::{Element, Tensor, Var};

use crate::nn::{join, Init, Module, ResBlockDown};

/// Source appearance extractor: three down-sampling residual blocks.
///
/// Produces features at H/2, H/4 and H/8. Only the last two feed the
/// residual-fusing levels; the H/2 map stays internal.
#[derive(Debug)]
pub struct AppearanceExtractor<T: Element = f32> {
    blocks: [ResBlockDown<T>; 3],
}

impl<T: Element> AppearanceExtractor<T> {
    pub fn new(init: &Init, widths: [usize; 3]) -> Self {
        AppearanceExtractor {
            blocks: [
                ResBlockDown::new(&init.sub("block0"), 3, widths[0], false),
                ResBlockDown::new(&init.sub("block1"), widths[0], widths[1], true),
                ResBlockDown::new(&init.sub("block2"), widths[1], widths[2], true),
            ],
        }
    }

    /// All three feature maps, finest first.
    pub fn forward(&self, image: &Tensor<T>) -> [Tensor<T>; 3] {
        let h2 = self.blocks[0].forward(image);
        let h4 = self.blocks[1].forward(&h2);
        let h8 = self.blocks[2].forward(&h4);
        [h2, h4, h8]
    }
}

impl<T: Element> Module<T> for AppearanceExtractor<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("block{i}")), out);
        }
    }
}
