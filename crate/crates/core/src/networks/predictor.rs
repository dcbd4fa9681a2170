use rfgen_autograd::{Element, Tensor, Var};

use crate::config::Ablation;
use crate::error::{contract, Result};
use crate::kernels::{compose_flow, matte, softmax_fuse, warp};
use crate::networks::FlowLevel;
use crate::nn::{join, Conv2d, Init, Module, ResBlock, ResBlockDown, ResBlockUp, LEAKY_SLOPE};

/// One source's inputs to a residual-fusing level.
#[derive(Debug, Clone, Copy)]
pub struct BranchLevel<'a, T: Element = f32> {
    pub feature: &'a Tensor<T>,
    pub outputs: &'a FlowLevel<T>,
}

/// Residual-fusing block: per-source residual flow correction, occlusion
/// matting, attention-weighted fusion, then the decode layers.
///
/// The residual predictor is a single 3x3 convolution over the channel
/// concatenation of target and warped source features, shared by every
/// branch. It starts at zero so the refined warp equals the initial one.
#[derive(Debug)]
pub struct RfBlock<T: Element = f32> {
    pub residual: Conv2d<T>,
    body: ResBlock<T>,
    up: ResBlockUp<T>,
}

impl<T: Element> RfBlock<T> {
    pub fn new(init: &Init, channels: usize, out_channels: usize) -> Self {
        RfBlock {
            residual: Conv2d::zeroed(2 * channels, 2, 3),
            body: ResBlock::new(&init.sub("body"), channels),
            up: ResBlockUp::new(&init.sub("up"), channels, out_channels),
        }
    }

    /// Fused target feature before decoding.
    pub fn fuse(&self, target: &Tensor<T>, branches: &[BranchLevel<'_, T>], ablation: Ablation) -> Result<Tensor<T>> {
        if branches.is_empty() {
            return Err(contract("rf_block", "no source branches"));
        }
        let mut blended = Vec::with_capacity(branches.len());
        let mut logits = Vec::with_capacity(branches.len());
        for b in branches {
            if b.feature.shape() != target.shape() {
                return Err(contract(
                    "rf_block",
                    format!("source feature {:?} does not match target feature {:?}", b.feature.shape(), target.shape()),
                ));
            }
            let warped = warp(b.feature, &b.outputs.flow)?;
            let refined = if ablation.uses_residual() {
                let r = self.residual.forward(&Tensor::concat(&[target.clone(), warped], 1));
                warp(b.feature, &compose_flow(&b.outputs.flow, &r)?)?
            } else {
                warped
            };
            let occlusion = if ablation.uses_occlusion() {
                b.outputs.occlusion.clone()
            } else {
                Tensor::zeros(b.outputs.occlusion.shape())
            };
            blended.push(matte(&refined, target, &occlusion)?);
            logits.push(if ablation.uses_attention() {
                b.outputs.logits.clone()
            } else {
                Tensor::zeros(b.outputs.logits.shape())
            });
        }
        softmax_fuse(&blended, &logits)
    }

    pub fn decode(&self, fused: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let body = self.body.forward(fused);
        let up = self.up.forward(&body);
        (body, up)
    }

    /// Next-level target feature.
    pub fn forward(&self, target: &Tensor<T>, branches: &[BranchLevel<'_, T>], ablation: Ablation) -> Result<Tensor<T>> {
        Ok(self.decode(&self.fuse(target, branches, ablation)?).1)
    }
}

impl<T: Element> Module<T> for RfBlock<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.residual.collect_params(&join(prefix, "residual"), out);
        self.body.collect_params(&join(prefix, "body"), out);
        self.up.collect_params(&join(prefix, "up"), out);
    }
}

/// Target image predictor: pose encoder to H/8, two residual-fusing levels
/// (H/8, H/4), two more decode stages and a tanh output.
#[derive(Debug)]
pub struct Predictor<T: Element = f32> {
    encoder: [ResBlockDown<T>; 3],
    pub rf: [RfBlock<T>; 2],
    tail_body: ResBlock<T>,
    tail_up: ResBlockUp<T>,
    out: Conv2d<T>,
}

impl<T: Element> Predictor<T> {
    pub fn new(init: &Init, pose_channels: usize, widths: [usize; 3]) -> Self {
        Predictor {
            encoder: [
                ResBlockDown::new(&init.sub("enc0"), pose_channels, widths[0], false),
                ResBlockDown::new(&init.sub("enc1"), widths[0], widths[1], true),
                ResBlockDown::new(&init.sub("enc2"), widths[1], widths[2], true),
            ],
            rf: [
                RfBlock::new(&init.sub("rf0"), widths[2], widths[1]),
                RfBlock::new(&init.sub("rf1"), widths[1], widths[0]),
            ],
            tail_body: ResBlock::new(&init.sub("tail_body"), widths[0]),
            tail_up: ResBlockUp::new(&init.sub("tail_up"), widths[0], widths[0]),
            out: Conv2d::new(&init.sub("out"), widths[0], 3, 3, 1),
        }
    }

    /// `branches[k][level]` for levels at H/8 then H/4.
    pub fn forward(
        &self,
        target_pose: &Tensor<T>,
        branches: &[[BranchLevel<'_, T>; 2]],
        ablation: Ablation,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Tensor<T>> {
        let mut record = |name: &str, t: &Tensor<T>| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name.to_string(), t.shape().to_vec()));
            }
        };
        let mut h = target_pose.clone();
        for (i, block) in self.encoder.iter().enumerate() {
            h = block.forward(&h);
            record(&format!("predictor.enc{i}"), &h);
        }
        for (level, rf) in self.rf.iter().enumerate() {
            let per_level: Vec<BranchLevel<'_, T>> = branches.iter().map(|b| b[level]).collect();
            let fused = rf.fuse(&h, &per_level, ablation)?;
            record(&format!("predictor.rf{level}.fused"), &fused);
            let (body, up) = rf.decode(&fused);
            record(&format!("predictor.rf{level}.body"), &body);
            record(&format!("predictor.rf{level}.up"), &up);
            h = up;
        }
        let h = self.tail_body.forward(&h);
        record("predictor.tail_body", &h);
        let h = self.tail_up.forward(&h);
        record("predictor.tail_up", &h);
        let img = self.out.forward(&h.leaky_relu(LEAKY_SLOPE)).tanh();
        record("predictor.out", &img);
        Ok(img)
    }
}

impl<T: Element> Module<T> for Predictor<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("enc{i}")), out);
        }
        for (i, b) in self.rf.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("rf{i}")), out);
        }
        self.tail_body.collect_params(&join(prefix, "tail_body"), out);
        self.tail_up.collect_params(&join(prefix, "tail_up"), out);
        self.out.collect_params(&join(prefix, "out"), out);
    }
}
