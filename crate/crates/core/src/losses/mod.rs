//! Training objectives: flow warm-up losses, content losses and the
//! adversarial pair, plus their weighted combination.

mod provider;

pub use provider::{FeatureProvider, LAYERS, PERCEPTUAL_LAYERS, STYLE_LAYERS};

use rfgen_autograd::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Lambdas, LossConfig};
use crate::error::{contract, Result};
use crate::kernels::{gram, warp};

const COSINE_EPS: f64 = 1e-8;

/// Provider described by the loss configuration.
pub fn provider_from_config<T: Element>(config: &LossConfig) -> Result<FeatureProvider<T>> {
    match &config.provider_weights {
        Some(path) => FeatureProvider::load_vgg19(path),
        None => Ok(FeatureProvider::random(config.provider_seed, config.provider_widths)),
    }
}

/// Unit vectors along the channel axis, `[n, c, h, w]`.
fn channel_normalize<T: Element>(f: &Tensor<T>) -> Tensor<T> {
    let norm = f.sqr().sum_axes(&[1], true).add_scalar(1e-24).sqrt();
    f.div(&norm.add_scalar(COSINE_EPS))
}

/// Average-pools `features` down to `(h, w)` by an integer factor.
fn pool_to<T: Element>(op: &'static str, features: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (_, _, fh, fw) = features.dims4();
    if fh == h && fw == w {
        return Ok(features.clone());
    }
    if fh < h || fh % h != 0 || fw % w != 0 || fh / h != fw / w {
        return Err(contract(
            op,
            format!("features at {fh}x{fw} cannot be matched to a {h}x{w} flow"),
        ));
    }
    Ok(features.avg_pool2d(fh / h))
}

/// Sampling-correctness loss on precomputed features.
///
/// The source features are warped by `flow`; at every target location the
/// cosine similarity `sim` to the target feature is divided by `sim_max`, the
/// best cosine between that target feature and any source location. The
/// result is the mean of `exp(-sim / sim_max)`. Features finer than the flow
/// are average-pooled to its resolution.
pub fn sampling_correctness<T: Element>(
    source_features: &Tensor<T>,
    target_features: &Tensor<T>,
    flow: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "sampling_correctness";
    if source_features.rank() != 4 || source_features.shape() != target_features.shape() {
        return Err(contract(
            OP,
            format!("feature shapes differ: {:?} vs {:?}", source_features.shape(), target_features.shape()),
        ));
    }
    if flow.rank() != 4 || flow.dim(1) != 2 || flow.dim(0) != source_features.dim(0) {
        return Err(contract(OP, format!("flow must be [n, 2, h, w], got {:?}", flow.shape())));
    }
    let (n, _, h, w) = flow.dims4();
    let src = pool_to(OP, source_features, h, w)?;
    let tgt = pool_to(OP, target_features, h, w)?;
    let c = src.dim(1);
    let t_unit = channel_normalize(&tgt);
    let sim = channel_normalize(&warp(&src, flow)?).mul(&t_unit).sum_axes(&[1], false);
    let s_flat = channel_normalize(&src).reshape(&[n, c, h * w]);
    let t_flat = t_unit.reshape(&[n, c, h * w]);
    // [n, target, source] cosines, best source per target location
    let sim_max = t_flat.t().matmul(&s_flat).max_axis_keepdim(2).reshape(&[n, h, w]);
    Ok(sim.div(&sim_max.add_scalar(COSINE_EPS)).neg().exp().mean_all())
}

/// Affine regularization of a flow.
///
/// Over every `patch x patch` window (stride `patch`) the absolute sampling
/// coordinates `grid + flow` are least-squares fitted by an affine map of the
/// window's grid coordinates; the loss is the mean squared fit residual. The
/// grid itself is affine, so the residual is `(I - P) flow` with `P` the fixed
/// projection onto affine functions of the window coordinates.
pub fn flow_regularization<T: Element>(flow: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    const OP: &str = "flow_regularization";
    if patch < 3 {
        return Err(contract(OP, format!("patch {patch} is too small for an affine fit (needs >= 3)")));
    }
    if flow.rank() != 4 || flow.dim(1) != 2 {
        return Err(contract(OP, format!("flow must be [n, 2, h, w], got {:?}", flow.shape())));
    }
    let (n, _, h, w) = flow.dims4();
    if patch > h || patch > w {
        return Err(contract(OP, format!("patch {patch} larger than the {h}x{w} flow")));
    }
    let kernel = residual_projector::<T>(patch);
    let planes = flow.reshape(&[2 * n, 1, h, w]);
    Ok(planes.conv2d(&kernel, None, patch, 0).sqr().mean_all())
}

/// `(I - X (X^T X)^-1 X^T)` for the window design matrix `X = [x, y, 1]`,
/// laid out as `p*p` convolution filters of size `p x p`.
fn residual_projector<T: Element>(p: usize) -> Tensor<T> {
    let m = p * p;
    let coords: Vec<[f64; 3]> = (0..m).map(|i| [(i % p) as f64, (i / p) as f64, 1.0]).collect();
    let mut xtx = nalgebra::Matrix3::<f64>::zeros();
    for r in &coords {
        for a in 0..3 {
            for b in 0..3 {
                xtx[(a, b)] += r[a] * r[b];
            }
        }
    }
    let inv = xtx.try_inverse().expect("window coordinates are never collinear for p >= 2");
    let mut data = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let mut hat = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    hat += coords[i][a] * inv[(a, b)] * coords[j][b];
                }
            }
            data.push(T::from_f64(if i == j { 1.0 } else { 0.0 } - hat));
        }
    }
    Tensor::from_vec(data, &[m, 1, p, p])
}

/// L1, perceptual and style terms between a generated and a real image.
#[derive(Debug, Clone)]
pub struct ContentLosses<T: Element = f32> {
    pub l1: Tensor<T>,
    pub per: Tensor<T>,
    pub sty: Tensor<T>,
}

/// Per-element mean absolute differences: of the pixels, of each perceptual
/// layer (summed over layers), and of each style layer's Gram matrix (summed).
pub fn content_losses<T: Element>(
    provider: &FeatureProvider<T>,
    generated: &Tensor<T>,
    target: &Tensor<T>,
) -> Result<ContentLosses<T>> {
    if generated.shape() != target.shape() {
        return Err(contract(
            "content_losses",
            format!("image shapes differ: {:?} vs {:?}", generated.shape(), target.shape()),
        ));
    }
    let layers: Vec<&str> = PERCEPTUAL_LAYERS.iter().chain(STYLE_LAYERS.iter()).copied().collect();
    let fg = provider.features(generated, &layers)?;
    let ft = provider.features(&target.detach(), &layers)?;
    let np = PERCEPTUAL_LAYERS.len();
    let sum = |terms: Vec<Tensor<T>>| {
        terms
            .into_iter()
            .reduce(|a, b| a.add(&b))
            .expect("layer lists are non-empty")
    };
    let per = sum((0..np).map(|i| fg[i].sub(&ft[i]).abs().mean_all()).collect());
    let sty = sum(
        (np..layers.len())
            .map(|i| gram(&fg[i]).sub(&gram(&ft[i])).abs().mean_all())
            .collect(),
    );
    Ok(ContentLosses {
        l1: generated.sub(target).abs().mean_all(),
        per,
        sty,
    })
}

/// Negated discriminator objective:
/// `mean(-log sigmoid(real)) + mean(-log(1 - sigmoid(fake)))`.
pub fn discriminator_loss<T: Element>(real_logits: &Tensor<T>, fake_logits: &Tensor<T>) -> Result<Tensor<T>> {
    if real_logits.shape() != fake_logits.shape() {
        return Err(contract(
            "adversarial_losses",
            format!("logit shapes differ: {:?} vs {:?}", real_logits.shape(), fake_logits.shape()),
        ));
    }
    Ok(real_logits.neg().softplus().mean_all().add(&fake_logits.softplus().mean_all()))
}

/// Non-saturating generator objective `mean(-log sigmoid(fake))`.
pub fn generator_adversarial_loss<T: Element>(fake_logits: &Tensor<T>) -> Tensor<T> {
    fake_logits.neg().softplus().mean_all()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Flow warm-up.
    Warmup = 1,
    /// Full adversarial training.
    Full = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

/// Loss components of one generator step.
#[derive(Debug, Clone)]
pub struct LossTerms<T: Element = f32> {
    pub cor: Tensor<T>,
    pub reg: Tensor<T>,
    pub content: Option<ContentLosses<T>>,
    pub adv_g: Option<Tensor<T>>,
}

/// Scalar values of every loss term of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub cor: f64,
    pub reg: f64,
    pub l1: f64,
    pub per: f64,
    pub sty: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total: f64,
}

impl LossReport {
    /// `lambda_cor * cor + lambda_reg * reg`, plus the content terms and the
    /// unweighted adversarial term in stage 2.
    pub fn weighted_total(&self, lambdas: &Lambdas) -> f64 {
        let flow = lambdas.cor * self.cor + lambdas.reg * self.reg;
        if self.stage == 1 {
            flow
        } else {
            flow + lambdas.l1 * self.l1 + lambdas.per * self.per + lambdas.sty * self.sty + self.adv_g
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.cor, self.reg, self.l1, self.per, self.sty, self.adv_g, self.adv_d, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Weighted objective for `stage` and its report. The report's total is the
/// recombination of the reported components.
pub fn total_loss<T: Element>(stage: Stage, terms: &LossTerms<T>, lambdas: &Lambdas) -> Result<(Tensor<T>, LossReport)> {
    let mut total = terms.cor.scale(lambdas.cor).add(&terms.reg.scale(lambdas.reg));
    let mut report = LossReport {
        stage: stage.number(),
        cor: terms.cor.item().as_f64(),
        reg: terms.reg.item().as_f64(),
        l1: 0.0,
        per: 0.0,
        sty: 0.0,
        adv_g: 0.0,
        adv_d: 0.0,
        total: 0.0,
    };
    if stage == Stage::Full {
        let (Some(content), Some(adv_g)) = (&terms.content, &terms.adv_g) else {
            return Err(contract("total_loss", "stage 2 needs content and adversarial terms"));
        };
        total = total
            .add(&content.l1.scale(lambdas.l1))
            .add(&content.per.scale(lambdas.per))
            .add(&content.sty.scale(lambdas.sty))
            .add(adv_g);
        report.l1 = content.l1.item().as_f64();
        report.per = content.per.item().as_f64();
        report.sty = content.sty.item().as_f64();
        report.adv_g = adv_g.item().as_f64();
    }
    report.total = report.weighted_total(lambdas);
    Ok((total, report))
}
