//! Two-stage training: flow warm-up, then adversarial end-to-end training.

pub mod adam;
pub mod checkpoint;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, TensorView};
use serde::Serialize;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::Checkpoint;

use crate::autograd::{no_grad, Gradients, Tensor, Var};
use crate::config::{Ablation, RunConfig};
use crate::data::{collate, load_tuple, Batch, Dataset, TupleSampler};
use crate::error::{io_err, Error, Result};
use crate::losses::{
    content_losses, discriminator_loss, flow_regularization, generator_adversarial_loss, provider_from_config,
    sampling_correctness, total_loss, FeatureProvider, LossReport, LossTerms, Stage,
};
use crate::networks::{discriminator, Discriminator, FlowLevel, Generator, SourceInput};
use crate::nn::Module;

const SMOOTHING: f64 = 0.9;

/// Position and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub stage: Stage,
    /// Iterations completed in the current stage.
    pub iteration: u64,
    pub stage1_complete: bool,
    pub generator_adam: Adam,
    pub discriminator_adam: Adam,
    /// Exponential running averages of the reported losses.
    pub smoothed: BTreeMap<String, f64>,
}

/// One line of the loss log.
#[derive(Debug, Clone, Serialize)]
pub struct LogLine {
    pub iteration: u64,
    #[serde(flatten)]
    pub report: LossReport,
    pub grad_norm: f64,
}

pub struct Trainer {
    config: RunConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    provider: FeatureProvider,
    data: Box<dyn Dataset>,
    samplers: [TupleSampler; 2],
    state: TrainState,
    run_dir: Option<PathBuf>,
    frozen_discriminator: bool,
}

fn fresh_adam(config: &RunConfig) -> Adam {
    Adam::new(config.train.learning_rate, config.train.beta1, config.train.beta2)
}

fn gradients_of(grads: &Gradients, params: &[(String, &Var)]) -> Vec<Vec<f32>> {
    params
        .iter()
        .map(|(_, v)| {
            let t = v.tensor();
            grads.get(&t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect()
}

impl Trainer {
    /// A fresh run at the start of stage 1.
    pub fn new(config: RunConfig, data: Box<dyn Dataset>, run_dir: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let g = &config.generator;
        if data.pose_channels() != g.pose_channels {
            return Err(Error::Config(format!(
                "dataset has {}-channel poses, generator expects {}",
                data.pose_channels(),
                g.pose_channels
            )));
        }
        if data.image_size() != (g.image_height, g.image_width) {
            return Err(Error::Config(format!(
                "dataset images are {:?}, generator expects ({}, {})",
                data.image_size(),
                g.image_height,
                g.image_width
            )));
        }
        let groups: Vec<Vec<usize>> = data.groups().into_iter().map(|(_, g)| g).collect();
        let seed = config.train.seed;
        let samplers = [
            TupleSampler::new(&groups, g.sources, seed)?,
            TupleSampler::new(&groups, g.sources, seed ^ 0x5354_4147_4532)?,
        ];
        if let Some(dir) = &run_dir {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        Ok(Trainer {
            generator: Generator::new(g)?,
            discriminator: discriminator(g),
            provider: provider_from_config(&config.loss)?,
            data,
            samplers,
            state: TrainState {
                stage: Stage::Warmup,
                iteration: 0,
                stage1_complete: false,
                generator_adam: fresh_adam(&config),
                discriminator_adam: fresh_adam(&config),
                smoothed: BTreeMap::new(),
            },
            config,
            run_dir,
            frozen_discriminator: false,
        })
    }

    /// Continues from a checkpoint. `config` may change schedules and cadence
    /// but must describe the same generator and seed.
    pub fn resume(config: RunConfig, ckpt: &Checkpoint, data: Box<dyn Dataset>, run_dir: Option<PathBuf>) -> Result<Self> {
        config.generator.check_compatible(&ckpt.config.generator)?;
        if config.train.seed != ckpt.config.train.seed {
            return Err(Error::Config(format!(
                "seed {} differs from the checkpoint's {}",
                config.train.seed, ckpt.config.train.seed
            )));
        }
        let mut t = Trainer::new(config, data, run_dir)?;
        ckpt.restore("generator", &t.generator.named_params())?;
        ckpt.restore("discriminator", &t.discriminator.named_params())?;
        let c = &t.config.train;
        t.state = TrainState {
            stage: if ckpt.stage == 2 { Stage::Full } else { Stage::Warmup },
            iteration: ckpt.iteration,
            stage1_complete: ckpt.stage1_complete,
            generator_adam: ckpt.adam("generator", c.learning_rate, c.beta1, c.beta2),
            discriminator_adam: ckpt.adam("discriminator", c.learning_rate, c.beta1, c.beta2),
            smoothed: ckpt.smoothed.clone(),
        };
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn provider(&self) -> &FeatureProvider {
        &self.provider
    }

    /// Keeps discriminator parameters fixed during stage 2.
    pub fn freeze_discriminator(&mut self, frozen: bool) {
        self.frozen_discriminator = frozen;
    }

    /// The batch of `iteration` in `stage`; depends only on the seed.
    pub fn batch(&self, stage: Stage, iteration: u64) -> Result<Batch> {
        let sampler = &self.samplers[stage.number() as usize - 1];
        let b = self.config.train.batch_size as u64;
        let tuples = (iteration * b..(iteration + 1) * b)
            .map(|i| load_tuple(self.data.as_ref(), &sampler.tuple(i)))
            .collect::<Result<Vec<_>>>()?;
        collate(&tuples)
    }

    /// Summed sampling-correctness and regularization terms over levels and sources.
    fn flow_terms(&self, batch: &Batch, flows: &[Vec<FlowLevel>]) -> Result<(Tensor, Tensor)> {
        let g = &self.config.generator;
        let factors: Vec<usize> = (0..g.levels).map(|l| g.image_height / g.level_size(l).0).collect();
        let layers: Vec<&str> = match &self.config.loss.correctness_layers {
            Some(names) => names.iter().map(String::as_str).collect(),
            None => factors.iter().map(|&f| self.provider.correctness_layer(f)).collect(),
        };
        let k = batch.sources.len();
        let n = batch.len();
        let feats = no_grad(|| {
            let mut images: Vec<Tensor> = batch.sources.iter().map(|s| s.image.clone()).collect();
            images.push(batch.target_image.clone());
            self.provider.features(&Tensor::concat(&images, 0), &layers)
        })?;
        let mut cor = Tensor::scalar(0.0);
        let mut reg = Tensor::scalar(0.0);
        for (j, levels) in flows.iter().enumerate() {
            for (l, level) in levels.iter().enumerate() {
                let f = &feats[l];
                let src = f.narrow(0, j * n, n);
                let tgt = f.narrow(0, k * n, n);
                cor = cor.add(&sampling_correctness(&src, &tgt, &level.flow)?);
                reg = reg.add(&flow_regularization(&level.flow, self.config.loss.regularization_patch)?);
            }
        }
        Ok((cor, reg))
    }

    fn dump_batch(&self, batch: &Batch) -> Result<PathBuf> {
        let dir = self.run_dir.clone().unwrap_or_else(std::env::temp_dir);
        let path = dir.join(format!("nan-stage{}-iter{:06}.safetensors", self.state.stage.number(), self.state.iteration));
        let mut named: Vec<(String, Tensor)> = vec![
            ("target_image".into(), batch.target_image.clone()),
            ("target_pose".into(), batch.target_pose.clone()),
        ];
        for (k, s) in batch.sources.iter().enumerate() {
            named.push((format!("source{k}_image"), s.image.clone()));
            named.push((format!("source{k}_pose"), s.pose.clone()));
        }
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = named
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views: Vec<(String, TensorView)> = bytes
            .iter()
            .map(|(k, s, b)| (k.clone(), TensorView::new(Dtype::F32, s.clone(), b).expect("consistent tensor")))
            .collect();
        let tuples: Vec<_> = batch.indices.iter().map(|t| (t.group, t.sources.clone(), t.target)).collect();
        let meta = HashMap::from([("tuples".to_string(), serde_json::to_string(&tuples)?)]);
        let out = safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(&path, out).map_err(io_err(&path))?;
        Ok(path)
    }

    fn non_finite(&self, batch: &Batch) -> Error {
        let dump = self.dump_batch(batch).unwrap_or_else(|e| PathBuf::from(format!("<dump failed: {e}>")));
        Error::NonFinite {
            stage: self.state.stage.number(),
            iteration: self.state.iteration,
            dump,
        }
    }

    fn apply(&mut self, total: &Tensor, batch: &Batch, which: Group) -> Result<f64> {
        let grads = total.backward();
        let params = match which {
            Group::Generator => trainable(&self.generator, self.state.stage, self.config.train.ablation),
            Group::Discriminator => self.discriminator.named_params(),
        };
        let mut g = gradients_of(&grads, &params);
        let norm = clip_global_norm(&mut g, self.config.train.grad_clip);
        if !norm.is_finite() {
            return Err(self.non_finite(batch));
        }
        let state = &mut self.state;
        let adam = match which {
            Group::Generator => &mut state.generator_adam,
            Group::Discriminator => &mut state.discriminator_adam,
        };
        adam.step(&params, &g);
        Ok(norm)
    }

    fn step_warmup(&mut self, batch: &Batch) -> Result<(LossReport, f64)> {
        let flows = self.generator.flows(&batch.sources, &batch.target_pose)?;
        let (cor, reg) = self.flow_terms(batch, &flows)?;
        let terms = LossTerms {
            cor,
            reg,
            content: None,
            adv_g: None,
        };
        let (total, report) = total_loss(Stage::Warmup, &terms, &self.config.generator.lambdas)?;
        if !report.all_finite() {
            return Err(self.non_finite(batch));
        }
        let norm = self.apply(&total, batch, Group::Generator)?;
        Ok((report, norm))
    }

    fn step_full(&mut self, batch: &Batch) -> Result<(LossReport, f64)> {
        let ablation = self.config.train.ablation;
        let (fake, branches) = self.generator.forward(&batch.sources, &batch.target_pose, ablation)?;
        let d_loss = discriminator_loss(
            &self.discriminator.forward(&batch.target_image),
            &self.discriminator.forward(&fake.detach()),
        )?;
        let adv_d = d_loss.item() as f64;
        if !adv_d.is_finite() {
            return Err(self.non_finite(batch));
        }
        if !self.frozen_discriminator {
            self.apply(&d_loss, batch, Group::Discriminator)?;
        }

        let flows: Vec<Vec<FlowLevel>> = branches.iter().map(|b| b.levels.clone()).collect();
        let (cor, reg) = self.flow_terms(batch, &flows)?;
        let terms = LossTerms {
            cor,
            reg,
            content: Some(content_losses(&self.provider, &fake, &batch.target_image)?),
            adv_g: Some(generator_adversarial_loss(&self.discriminator.forward(&fake))),
        };
        let (total, mut report) = total_loss(Stage::Full, &terms, &self.config.generator.lambdas)?;
        report.adv_d = adv_d;
        if !report.all_finite() {
            return Err(self.non_finite(batch));
        }
        let norm = self.apply(&total, batch, Group::Generator)?;
        Ok((report, norm))
    }

    /// Runs one iteration of the current stage.
    pub fn step(&mut self) -> Result<LossReport> {
        let stage = self.state.stage;
        let batch = self.batch(stage, self.state.iteration)?;
        let (report, norm) = match stage {
            Stage::Warmup => self.step_warmup(&batch)?,
            Stage::Full => self.step_full(&batch)?,
        };
        self.state.iteration += 1;
        for (k, v) in [("cor", report.cor), ("reg", report.reg), ("total", report.total)] {
            let s = self.state.smoothed.entry(format!("stage{}.{k}", stage.number())).or_insert(v);
            *s = SMOOTHING * *s + (1.0 - SMOOTHING) * v;
        }
        self.log(&LogLine {
            iteration: self.state.iteration,
            report: report.clone(),
            grad_norm: norm,
        })?;
        let every = self.config.train.checkpoint_every;
        if every > 0 && self.state.iteration % every == 0 {
            self.save_in_run(&format!("stage{}-{:06}", stage.number(), self.state.iteration))?;
        }
        let every = self.config.train.sample_every;
        if stage == Stage::Full && every > 0 && self.state.iteration % every == 0 {
            if let Some(dir) = &self.run_dir {
                let path = dir.join("samples").join(format!("iter{:06}.png", self.state.iteration));
                crate::eval::emit_grid(&self.generator, &batch, self.config.train.ablation, &path)?;
            }
        }
        Ok(report)
    }

    fn log(&self, line: &LogLine) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let path = dir.join("losses.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        let mut text = serde_json::to_string(line)?;
        text.push('\n');
        f.write_all(text.as_bytes()).map_err(io_err(&path))
    }

    /// Runs stage 1 to its configured length.
    pub fn train_stage1(&mut self) -> Result<Vec<LossReport>> {
        if self.state.stage != Stage::Warmup {
            return Err(Error::Config("stage 1 already finished".into()));
        }
        let mut reports = Vec::new();
        while self.state.iteration < self.config.train.stage1_iterations {
            reports.push(self.step()?);
        }
        self.state.stage1_complete = true;
        self.save_in_run("stage1-final")?;
        Ok(reports)
    }

    /// Switches to stage 2 with fresh optimizers. Refused before stage 1 has
    /// finished unless `allow_cold`.
    pub fn start_stage2(&mut self, allow_cold: bool) -> Result<()> {
        if self.state.stage == Stage::Full {
            return Ok(());
        }
        if !self.state.stage1_complete && !allow_cold {
            return Err(Error::Config("stage 2 needs a finished stage-1 warm-up (or an explicit cold start)".into()));
        }
        self.state.stage = Stage::Full;
        self.state.iteration = 0;
        self.state.generator_adam = fresh_adam(&self.config);
        self.state.discriminator_adam = fresh_adam(&self.config);
        Ok(())
    }

    /// Runs stage 2 to its configured length.
    pub fn train_stage2(&mut self) -> Result<Vec<LossReport>> {
        if self.state.stage != Stage::Full {
            return Err(Error::Config("call start_stage2 before train_stage2".into()));
        }
        let mut reports = Vec::new();
        while self.state.iteration < self.config.train.stage2_iterations {
            reports.push(self.step()?);
        }
        self.save_in_run("stage2-final")?;
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            self.config.clone(),
            self.state.stage.number(),
            self.state.iteration,
            self.state.stage1_complete,
        );
        c.smoothed = self.state.smoothed.clone();
        c.add_params("generator", &self.generator.named_params());
        c.add_params("discriminator", &self.discriminator.named_params());
        c.add_adam("generator", &self.state.generator_adam);
        c.add_adam("discriminator", &self.state.discriminator_adam);
        c
    }

    /// Writes a checkpoint and returns its id.
    pub fn save(&self, path: &Path) -> Result<String> {
        let mut c = self.checkpoint();
        c.write(path)?;
        Ok(c.id)
    }

    fn save_in_run(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            let ckpts = dir.join("checkpoints");
            self.save(&ckpts.join(format!("{name}.safetensors")))?;
            self.save(&ckpts.join("last.safetensors"))?;
        }
        Ok(())
    }
}

/// Generator parameters optimized in `stage`.
fn trainable<'a>(generator: &'a Generator, stage: Stage, ablation: Ablation) -> Vec<(String, &'a Var)> {
    generator
        .named_params()
        .into_iter()
        .filter(|(name, _)| match stage {
            Stage::Warmup => name.starts_with("flow."),
            Stage::Full => ablation.uses_residual() || !Generator::<f32>::is_residual_param(name),
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Group {
    Generator,
    Discriminator,
}

/// Deterministic forward pass without gradient tracking.
pub fn infer(generator: &Generator, sources: &[SourceInput], target_pose: &Tensor, ablation: Ablation) -> Result<Tensor> {
    no_grad(|| generator.forward(sources, target_pose, ablation).map(|(img, _)| img))
}
