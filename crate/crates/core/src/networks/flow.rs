use rfgen_autograd::{Element, Tensor, Var};

use crate::nn::{join, Conv2d, Init, Module, ResBlockDown, ResBlockUp, LEAKY_SLOPE};

/// Flow, occlusion and attention outputs of one source at one level.
#[derive(Debug, Clone)]
pub struct FlowLevel<T: Element = f32> {
    /// `[n, 2, h, w]`, pixels at this level's resolution.
    pub flow: Tensor<T>,
    /// `[n, 1, h, w]` in `(0, 1)`.
    pub occlusion: Tensor<T>,
    /// `[n, 1, h, w]` raw attention logits.
    pub logits: Tensor<T>,
}

impl<T: Element> FlowLevel<T> {
    /// Slice `start..start + len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> FlowLevel<T> {
        FlowLevel {
            flow: self.flow.narrow(0, start, len),
            occlusion: self.occlusion.narrow(0, start, len),
            logits: self.logits.narrow(0, start, len),
        }
    }
}

#[derive(Debug)]
struct Heads<T: Element> {
    flow: Conv2d<T>,
    occlusion: Conv2d<T>,
    attention: Conv2d<T>,
}

impl<T: Element> Heads<T> {
    fn new(init: &Init, c: usize) -> Self {
        Heads {
            flow: Conv2d::new(&init.sub("flow"), c, 2, 3, 1),
            occlusion: Conv2d::new(&init.sub("occlusion"), c, 1, 3, 1),
            attention: Conv2d::new(&init.sub("attention"), c, 1, 3, 1),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> FlowLevel<T> {
        let h = x.leaky_relu(LEAKY_SLOPE);
        FlowLevel {
            flow: self.flow.forward(&h),
            occlusion: self.occlusion.forward(&h).sigmoid(),
            logits: self.attention.forward(&h),
        }
    }
}

impl<T: Element> Module<T> for Heads<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.flow.collect_params(&join(prefix, "flow"), out);
        self.occlusion.collect_params(&join(prefix, "occlusion"), out);
        self.attention.collect_params(&join(prefix, "attention"), out);
    }
}

/// U-shaped flow-confidence extractor.
///
/// Input is the channel concatenation of source image, source pose and
/// target pose. Five down-sampling blocks reach H/32, three up-sampling
/// blocks with additive skips come back to H/4, and heads at H/8 and H/4
/// emit flow, occlusion and attention (in that order).
#[derive(Debug)]
pub struct FlowExtractor<T: Element = f32> {
    down: Vec<ResBlockDown<T>>,
    up: Vec<ResBlockUp<T>>,
    heads: Vec<Heads<T>>,
    pose_channels: usize,
}

impl<T: Element> FlowExtractor<T> {
    pub fn new(init: &Init, pose_channels: usize, widths: [usize; 5]) -> Self {
        let c_in = 3 + 2 * pose_channels;
        let mut down = Vec::new();
        let mut prev = c_in;
        for (i, &c) in widths.iter().enumerate() {
            down.push(ResBlockDown::new(&init.sub(&format!("down{i}")), prev, c, i > 0));
            prev = c;
        }
        let up = (0..3)
            .map(|i| ResBlockUp::new(&init.sub(&format!("up{i}")), widths[4 - i], widths[3 - i]))
            .collect();
        let heads = (0..2)
            .map(|i| Heads::new(&init.sub(&format!("head{i}")), widths[2 - i]))
            .collect();
        FlowExtractor {
            down,
            up,
            heads,
            pose_channels,
        }
    }

    pub fn input_channels(&self) -> usize {
        3 + 2 * self.pose_channels
    }

    /// Outputs at H/8 then H/4. `trace` receives every intermediate shape.
    pub fn forward(
        &self,
        image: &Tensor<T>,
        source_pose: &Tensor<T>,
        target_pose: &Tensor<T>,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Vec<FlowLevel<T>> {
        let mut record = |name: String, t: &Tensor<T>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name, t.shape().to_vec()));
            }
        };
        let x = Tensor::concat(&[image.clone(), source_pose.clone(), target_pose.clone()], 1);
        record("flow.input".into(), &x);
        let mut skips = Vec::new();
        let mut h = x;
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(&h);
            record(format!("flow.down{i}"), &h);
            skips.push(h.clone());
        }
        let mut levels = Vec::new();
        for (i, block) in self.up.iter().enumerate() {
            h = block.forward(&h).add(&skips[3 - i]);
            record(format!("flow.up{i}"), &h);
            if i >= 1 {
                let out = self.heads[i - 1].forward(&h);
                record(format!("flow.level{}.flow", i - 1), &out.flow);
                record(format!("flow.level{}.occlusion", i - 1), &out.occlusion);
                record(format!("flow.level{}.attention", i - 1), &out.logits);
                levels.push(out);
            }
        }
        levels
    }
}

impl<T: Element> Module<T> for FlowExtractor<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        for (i, b) in self.down.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("down{i}")), out);
        }
        for (i, b) in self.up.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("up{i}")), out);
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.collect_params(&join(prefix, &format!("head{i}")), out);
        }
    }
}
