//! Generator (appearance extractor, flow-confidence extractor, target image
//! predictor) and the patch discriminator.
//!
//! Residual-fusing level 0 runs at H/8 and level 1 at H/4. The K sources go
//! through the two extractors as one batch of `K * n`; every layer treats
//! batch entries independently, so results do not depend on source order.

mod appearance;
mod discriminator;
mod flow;
mod predictor;

pub use appearance::AppearanceExtractor;
pub use discriminator::Discriminator;
pub use flow::{FlowExtractor, FlowLevel};
pub use predictor::{BranchLevel, Predictor, RfBlock};

use rfgen_autograd::{Element, Tensor, Var};

use crate::config::{Ablation, GeneratorConfig};
use crate::error::{contract, Result};
use crate::nn::{join, Init, Module};

/// One source image with its pose map, both batched `[n, _, H, W]`.
#[derive(Debug, Clone)]
pub struct SourceInput<T: Element = f32> {
    pub image: Tensor<T>,
    pub pose: Tensor<T>,
}

/// Everything the predictor consumes from one source.
#[derive(Debug, Clone)]
pub struct SourceBranch<T: Element = f32> {
    /// Appearance features at H/8 and H/4.
    pub features: [Tensor<T>; 2],
    /// Flow outputs at H/8 and H/4.
    pub levels: Vec<FlowLevel<T>>,
}

impl<T: Element> SourceBranch<T> {
    fn level(&self, i: usize) -> BranchLevel<'_, T> {
        BranchLevel {
            feature: &self.features[i],
            outputs: &self.levels[i],
        }
    }
}

#[derive(Debug)]
pub struct Generator<T: Element = f32> {
    config: GeneratorConfig,
    pub appearance: AppearanceExtractor<T>,
    pub flow: FlowExtractor<T>,
    pub predictor: Predictor<T>,
}

impl<T: Element> Generator<T> {
    pub const PARAM_GROUPS: [&'static str; 3] = ["appearance", "flow", "predictor"];

    pub fn new(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let init = Init::new(config.init_seed);
        let w = &config.widths;
        Ok(Generator {
            config: config.clone(),
            appearance: AppearanceExtractor::new(&init.sub("appearance"), w.appearance),
            flow: FlowExtractor::new(&init.sub("flow"), config.pose_channels, w.flow),
            predictor: Predictor::new(&init.sub("predictor"), config.pose_channels, w.predictor),
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Whether `name` belongs to a residual flow predictor.
    pub fn is_residual_param(name: &str) -> bool {
        name.starts_with("predictor.rf") && name.contains(".residual.")
    }

    fn check_map(&self, what: &str, t: &Tensor<T>, channels: usize, batch: Option<usize>) -> Result<usize> {
        let (h, w) = (self.config.image_height, self.config.image_width);
        let s = t.shape();
        let ok = s.len() == 4 && s[1] == channels && s[2] == h && s[3] == w && batch.map_or(true, |n| s[0] == n);
        if !ok {
            return Err(contract(
                "generator",
                format!("{what} has shape {s:?}, expected [{}, {channels}, {h}, {w}]", batch.map_or("n".into(), |n| n.to_string())),
            ));
        }
        Ok(s[0])
    }

    fn check_inputs(&self, sources: &[SourceInput<T>], target_pose: &Tensor<T>) -> Result<usize> {
        if sources.is_empty() {
            return Err(contract("generator", "at least one source is required"));
        }
        let cp = self.config.pose_channels;
        let n = self.check_map("target pose", target_pose, cp, None)?;
        for (k, s) in sources.iter().enumerate() {
            self.check_map(&format!("source {k} image"), &s.image, 3, Some(n))?;
            self.check_map(&format!("source {k} pose"), &s.pose, cp, Some(n))?;
        }
        Ok(n)
    }

    fn stacked(sources: &[SourceInput<T>], target_pose: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        if sources.len() == 1 {
            return (sources[0].image.clone(), sources[0].pose.clone(), target_pose.clone());
        }
        let images: Vec<_> = sources.iter().map(|s| s.image.clone()).collect();
        let poses: Vec<_> = sources.iter().map(|s| s.pose.clone()).collect();
        let targets = vec![target_pose.clone(); sources.len()];
        (
            Tensor::concat(&images, 0),
            Tensor::concat(&poses, 0),
            Tensor::concat(&targets, 0),
        )
    }

    /// Flow outputs per source, `[k][level]`, without the appearance path.
    pub fn flows(&self, sources: &[SourceInput<T>], target_pose: &Tensor<T>) -> Result<Vec<Vec<FlowLevel<T>>>> {
        let n = self.check_inputs(sources, target_pose)?;
        let (images, poses, targets) = Self::stacked(sources, target_pose);
        let levels = self.flow.forward(&images, &poses, &targets, None);
        Ok((0..sources.len())
            .map(|k| levels.iter().map(|l| l.narrow(k * n, n)).collect())
            .collect())
    }

    /// Appearance features and flow outputs for every source.
    pub fn branches(&self, sources: &[SourceInput<T>], target_pose: &Tensor<T>) -> Result<Vec<SourceBranch<T>>> {
        self.branches_traced(sources, target_pose, None)
    }

    fn branches_traced(
        &self,
        sources: &[SourceInput<T>],
        target_pose: &Tensor<T>,
        mut trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Vec<SourceBranch<T>>> {
        let n = self.check_inputs(sources, target_pose)?;
        let (images, poses, targets) = Self::stacked(sources, target_pose);
        let [h2, h4, h8] = self.appearance.forward(&images);
        if let Some(tr) = trace.as_deref_mut() {
            for (name, t) in [("appearance.block0", &h2), ("appearance.block1", &h4), ("appearance.block2", &h8)] {
                tr.push((name.to_string(), t.shape().to_vec()));
            }
        }
        let levels = self.flow.forward(&images, &poses, &targets, trace);
        Ok((0..sources.len())
            .map(|k| SourceBranch {
                features: [h8.narrow(0, k * n, n), h4.narrow(0, k * n, n)],
                levels: levels.iter().map(|l| l.narrow(k * n, n)).collect(),
            })
            .collect())
    }

    /// Predicted target image from precomputed branches.
    pub fn predict(&self, target_pose: &Tensor<T>, branches: &[SourceBranch<T>], ablation: Ablation) -> Result<Tensor<T>> {
        self.predict_traced(target_pose, branches, ablation, None)
    }

    fn predict_traced(
        &self,
        target_pose: &Tensor<T>,
        branches: &[SourceBranch<T>],
        ablation: Ablation,
        trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Tensor<T>> {
        if branches.is_empty() {
            return Err(contract("generator", "at least one source is required"));
        }
        let levels: Vec<[BranchLevel<'_, T>; 2]> = branches.iter().map(|b| [b.level(0), b.level(1)]).collect();
        self.predictor.forward(target_pose, &levels, ablation, trace)
    }

    /// The generated image and the branch outputs it was built from.
    pub fn forward(
        &self,
        sources: &[SourceInput<T>],
        target_pose: &Tensor<T>,
        ablation: Ablation,
    ) -> Result<(Tensor<T>, Vec<SourceBranch<T>>)> {
        let branches = self.branches(sources, target_pose)?;
        let image = self.predict(target_pose, &branches, ablation)?;
        Ok((image, branches))
    }

    /// Shapes of every named intermediate of one forward pass.
    pub fn layer_shapes(
        &self,
        sources: &[SourceInput<T>],
        target_pose: &Tensor<T>,
        ablation: Ablation,
    ) -> Result<Vec<(String, Vec<usize>)>> {
        let mut trace = Vec::new();
        let branches = self.branches_traced(sources, target_pose, Some(&mut trace))?;
        self.predict_traced(target_pose, &branches, ablation, Some(&mut trace))?;
        Ok(trace)
    }
}

impl<T: Element> Module<T> for Generator<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var<T>)>) {
        self.appearance.collect_params(&join(prefix, "appearance"), out);
        self.flow.collect_params(&join(prefix, "flow"), out);
        self.predictor.collect_params(&join(prefix, "predictor"), out);
    }
}

/// Discriminator built from the same configuration and seed.
pub fn discriminator<T: Element>(config: &GeneratorConfig) -> Discriminator<T> {
    Discriminator::new(&Init::new(config.init_seed).sub("discriminator"), config.widths.discriminator)
}
