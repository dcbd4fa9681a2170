//! Run configuration: network shape, loss weights, training schedule and the
//! data source, all loadable from one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub cor: f64,
    pub reg: f64,
    pub l1: f64,
    pub per: f64,
    pub sty: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            cor: 2.5,
            reg: 0.001,
            l1: 2.5,
            per: 0.25,
            sty: 250.0,
        }
    }
}

/// Channel widths of every stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Widths {
    /// Source appearance extractor outputs at H/2, H/4, H/8.
    pub appearance: [usize; 3],
    /// Flow confidence extractor encoder, H/2 through H/32.
    pub flow: [usize; 5],
    /// Target predictor pose encoder at H/2, H/4, H/8 (and decoder mirror).
    pub predictor: [usize; 3],
    /// Discriminator blocks, H/2 through H/16.
    pub discriminator: [usize; 4],
}

impl Default for Widths {
    fn default() -> Self {
        Widths {
            appearance: [64, 128, 256],
            flow: [32, 64, 128, 256, 512],
            predictor: [64, 128, 256],
            discriminator: [64, 128, 256, 512],
        }
    }
}

impl Widths {
    /// Reduced widths for single-machine CPU experiments.
    pub fn desk() -> Self {
        Widths {
            appearance: [16, 32, 64],
            flow: [16, 32, 64, 64, 64],
            predictor: [16, 32, 64],
            discriminator: [16, 32, 64, 64],
        }
    }
}

/// Out-of-range sampling rule of the warp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    #[default]
    Border,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of sources `K`.
    pub sources: usize,
    /// Number of residual-fusing levels.
    pub levels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub pose_channels: usize,
    pub widths: Widths,
    pub lambdas: Lambdas,
    pub padding: Padding,
    /// Seed of the parameter initializer.
    pub init_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            sources: 2,
            levels: 2,
            image_height: 256,
            image_width: 256,
            pose_channels: 18,
            widths: Widths::default(),
            lambdas: Lambdas::default(),
            padding: Padding::Border,
            init_seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Desk-scale configuration for 64x64 synthetic sprites.
    pub fn desk(sources: usize, pose_channels: usize) -> Self {
        GeneratorConfig {
            sources,
            image_height: 64,
            image_width: 64,
            pose_channels,
            widths: Widths::desk(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sources == 0 {
            return fail("sources must be at least 1".into());
        }
        if self.levels != 2 {
            return fail(format!("levels must be 2 (got {})", self.levels));
        }
        if self.image_height == 0 || self.image_height % 32 != 0 || self.image_width == 0 || self.image_width % 32 != 0 {
            return fail(format!(
                "image size {}x{} must be a positive multiple of 32",
                self.image_height, self.image_width
            ));
        }
        if self.pose_channels == 0 {
            return fail("pose_channels must be at least 1".into());
        }
        let w = &self.widths;
        if w.predictor[1] != w.appearance[1] || w.predictor[2] != w.appearance[2] {
            return fail(format!(
                "predictor widths {:?} must match appearance widths {:?} at H/4 and H/8",
                w.predictor, w.appearance
            ));
        }
        let all = w.appearance.iter().chain(&w.flow).chain(&w.predictor).chain(&w.discriminator);
        if all.clone().any(|&c| c == 0) {
            return fail("channel widths must be positive".into());
        }
        let l = &self.lambdas;
        for (name, v) in [("cor", l.cor), ("reg", l.reg), ("l1", l.l1), ("per", l.per), ("sty", l.sty)] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("lambda {name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// A checkpoint trained with `self` can serve `other`: everything except
    /// the source count must agree.
    pub fn check_compatible(&self, other: &GeneratorConfig) -> Result<()> {
        let mut a = self.clone();
        a.sources = other.sources;
        if &a == other {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "configuration mismatch: checkpoint {} vs requested {}",
                serde_json::to_string(self)?,
                serde_json::to_string(other)?
            )))
        }
    }

    /// Spatial size of residual-fusing level `i` (0 = coarsest, H/8).
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let div = 8 >> level;
        (self.image_height / div, self.image_width / div)
    }
}

/// Which parts of the fusion are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// No residual flow, no attention, no occlusion: plain averaging of warped features.
    Baseline,
    NoAttn,
    NoOcc,
    NoRes,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoAttn,
        Ablation::NoOcc,
        Ablation::NoRes,
        Ablation::Baseline,
    ];

    pub fn uses_attention(self) -> bool {
        !matches!(self, Ablation::NoAttn | Ablation::Baseline)
    }

    pub fn uses_occlusion(self) -> bool {
        !matches!(self, Ablation::NoOcc | Ablation::Baseline)
    }

    pub fn uses_residual(self) -> bool {
        !matches!(self, Ablation::NoRes | Ablation::Baseline)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::Baseline => "baseline",
            Ablation::NoAttn => "no-attn",
            Ablation::NoOcc => "no-occ",
            Ablation::NoRes => "no-res",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected full, no-attn, no-occ, no-res, baseline)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1_iterations: u64,
    pub stage2_iterations: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Save a checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
    /// Write a sample grid every this many iterations (0 = never).
    pub sample_every: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_iterations: 500,
            stage2_iterations: 2000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 5,
            seed: 0,
            ablation: Ablation::Full,
            checkpoint_every: 0,
            sample_every: 0,
            grad_clip: Some(10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Side of the square patches the affine regularizer fits.
    pub regularization_patch: usize,
    /// Seed of the frozen random feature provider.
    pub provider_seed: u64,
    /// Block widths of the random provider.
    pub provider_widths: [usize; 4],
    /// Pretrained VGG-19 weights (safetensors, torchvision names); replaces
    /// the random provider when set.
    pub provider_weights: Option<PathBuf>,
    /// Provider layer scoring each flow level (coarsest first); the
    /// provider's default when unset.
    pub correctness_layers: Option<Vec<String>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            regularization_patch: 4,
            provider_seed: 0x5eed,
            provider_widths: [16, 32, 64, 64],
            provider_weights: None,
            correctness_layers: None,
        }
    }
}

/// Where training and evaluation tuples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Procedural sprites generated on demand.
    Synth {
        identities: usize,
        views: usize,
        size: usize,
        seed: u64,
        #[serde(default)]
        test_identities: Option<usize>,
    },
    /// A prepared index file; images resolve relative to `root`.
    Index {
        path: PathBuf,
        root: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            identities: 200,
            views: 6,
            size: 64,
            seed: 0,
            test_identities: Some(32),
        }
    }
}

/// Everything a run needs, as read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataSource,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        if self.loss.regularization_patch < 3 {
            return Err(Error::Config("regularization_patch must be at least 3".into()));
        }
        if let Some(layers) = &self.loss.correctness_layers {
            if layers.len() != self.generator.levels {
                return Err(Error::Config(format!(
                    "correctness_layers lists {} layers for {} levels",
                    layers.len(),
                    self.generator.levels
                )));
            }
            for l in layers {
                if !crate::losses::LAYERS.contains(&l.as_str()) {
                    return Err(Error::Config(format!("unknown provider layer `{l}`")));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_defaults() {
        let l = Lambdas::default();
        assert_eq!((l.per, l.sty, l.l1, l.cor, l.reg), (0.25, 250.0, 2.5, 2.5, 0.001));
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_toml_str("[generator.lambdas]\ncor = 1.0\nbogus = 2.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn empty_document_gives_defaults_and_roundtrips() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn validation() {
        let mut g = GeneratorConfig::default();
        g.image_height = 100;
        assert!(g.validate().is_err());
        let mut g = GeneratorConfig::default();
        g.levels = 3;
        assert!(g.validate().is_err());
        let mut t = TrainConfig::default();
        t.learning_rate = 0.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn compatibility_ignores_source_count() {
        let a = GeneratorConfig::desk(2, 4);
        let mut b = a.clone();
        b.sources = 5;
        assert!(a.check_compatible(&b).is_ok());
        b.pose_channels = 3;
        assert!(a.check_compatible(&b).is_err());
    }

    #[test]
    fn ablation_flags() {
        assert!(Ablation::Full.uses_attention() && Ablation::Full.uses_occlusion() && Ablation::Full.uses_residual());
        let b = Ablation::Baseline;
        assert!(!b.uses_attention() && !b.uses_occlusion() && !b.uses_residual());
        assert_eq!("no-res".parse::<Ablation>().unwrap(), Ablation::NoRes);
        assert!("nores".parse::<Ablation>().is_err());
    }
}
