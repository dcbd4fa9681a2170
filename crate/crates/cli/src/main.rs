use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rfgen::config::{Ablation, DataSource, RunConfig};
use rfgen::data::index::{build_index, load_image, write_index, Family};
use rfgen::data::{open, Dataset, IndexDataset, PoseAnnotation};
use rfgen::eval::{embed, evaluate, fid, held_out_batches, save_image, write_report, EmbeddingStats, HeldOut, MetricEntry};
use rfgen::losses::provider_from_config;
use rfgen::networks::SourceInput;
use rfgen::sweep::{self, SweepOptions};
use rfgen::train::{infer, Checkpoint, Trainer};
use rfgen::{Error, Result};

const DEVICE_VAR: &str = "RFGEN_DEVICE";

#[derive(Parser)]
#[command(name = "rfgen", version, about = "Multi-source pose-guided image generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset index (or a synthetic-data spec).
    Prepare {
        #[arg(long)]
        dataset: String,
        /// Dataset root; required for real datasets.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Synthetic identities.
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Synthetic views per identity.
        #[arg(long, default_value_t = 6)]
        views: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the generator (stage 1 warm-up, stage 2 adversarial, or both).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::Both)]
        stage: StageArg,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start stage 2 without a finished warm-up.
        #[arg(long)]
        allow_cold: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Generate one image from source images and a target pose.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `image:pose.json`, repeatable.
        #[arg(long = "sources", alias = "source", required = true, value_name = "IMG:POSE")]
        sources: Vec<String>,
        /// Pose JSON in the coordinates of the first source image.
        #[arg(long)]
        target_pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the checkpoint's variant.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on held-out tuples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index file (JSON lines) or synthetic spec (.toml); defaults to the
        /// held-out split of the checkpoint's data.
        #[arg(long)]
        index: Option<PathBuf>,
        /// Image root of `--index`; defaults to its directory.
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, default_value = "fid,lpips")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        tuples: usize,
        /// Sources per tuple; defaults to the checkpoint's K.
        #[arg(long)]
        sources: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score the real targets against themselves.
        #[arg(long)]
        real_vs_real: bool,
    },
    /// Train every variant under one schedule and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value = "full,no-attn,no-occ,no-res,baseline")]
        variants: String,
        #[arg(long, default_value_t = 64)]
        eval_tuples: usize,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    stage1_iterations: Option<u64>,
    #[arg(long)]
    stage2_iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ablation: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let t = &mut cfg.train;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.stage1_iterations {
            t.stage1_iterations = v;
        }
        if let Some(v) = self.stage2_iterations {
            t.stage2_iterations = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = &self.ablation {
            t.ablation = v.parse()?;
        }
        cfg.validate()
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match check_device().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Ok(d) if d != "cpu" => Err(Error::Config(format!("{DEVICE_VAR}={d}: only `cpu` is available"))),
        _ => Ok(()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Prepare {
            dataset,
            root,
            out,
            count,
            views,
            size,
            seed,
        } => prepare(&dataset, root.as_deref(), &out, count, views, size, seed),
        Command::Train {
            config,
            run_dir,
            stage,
            resume,
            allow_cold,
            overrides,
        } => train(&config, &run_dir, stage, resume.as_deref(), allow_cold, &overrides),
        Command::Infer {
            checkpoint,
            sources,
            target_pose,
            out,
            ablation,
        } => run_infer(&checkpoint, &sources, &target_pose, &out, ablation.as_deref()),
        Command::Eval {
            checkpoint,
            index,
            root,
            metrics,
            out,
            tuples,
            sources,
            seed,
            real_vs_real,
        } => run_eval(EvalArgs {
            checkpoint,
            index,
            root,
            metrics,
            out,
            tuples,
            sources,
            seed,
            real_vs_real,
        }),
        Command::Ablate {
            config,
            run_dir,
            variants,
            eval_tuples,
            eval_seed,
            overrides,
        } => ablate(&config, &run_dir, &variants, eval_tuples, eval_seed, &overrides),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn prepare(dataset: &str, root: Option<&Path>, out: &Path, count: usize, views: usize, size: usize, seed: u64) -> Result<()> {
    if dataset == "synth" {
        let spec = DataSource::Synth {
            identities: count,
            views,
            size,
            seed,
            test_identities: None,
        };
        rfgen::data::SynthSprites::new(seed, size, 0, count, views)?;
        let text = toml::to_string(&spec).map_err(|e| Error::Config(e.to_string()))?;
        write_file(out, &text)?;
        println!("wrote synthetic spec {} ({count} identities x {views} views, {size}px)", out.display());
        return Ok(());
    }
    let family: Family = dataset.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let root = root.ok_or_else(|| Error::Config(format!("--root is required for {dataset}")))?;
    let records = build_index(family, root)?;
    write_index(out, &records)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

/// Loads the config and applies flag overrides; data paths resolve against the
/// config file's directory.
fn effective_config(path: &Path, overrides: &Overrides) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn train(config: &Path, run_dir: &Path, stage: StageArg, resume: Option<&Path>, allow_cold: bool, overrides: &Overrides) -> Result<()> {
    let (cfg, base) = effective_config(config, overrides)?;
    let ckpt = resume.map(Checkpoint::read).transpose()?;
    if let Some(c) = &ckpt {
        cfg.generator.check_compatible(&c.config.generator)?;
        if stage == StageArg::One && c.stage == 2 {
            return Err(Error::Config("checkpoint is already in stage 2".into()));
        }
        if stage == StageArg::Two && c.stage == 1 && !c.stage1_complete && !allow_cold {
            return Err(Error::Config("stage 2 needs a finished stage-1 warm-up (or --allow-cold)".into()));
        }
    } else if stage == StageArg::Two && !allow_cold {
        return Err(Error::Config("stage 2 needs --resume with a finished stage-1 checkpoint (or --allow-cold)".into()));
    }
    write_file(&run_dir.join("config.toml"), &cfg.to_toml())?;

    let size = (cfg.generator.image_height, cfg.generator.image_width);
    let (data, _) = open(&cfg.data, &base, size)?;
    let mut t = match &ckpt {
        Some(c) => Trainer::resume(cfg, c, data, Some(run_dir.to_path_buf()))?,
        None => Trainer::new(cfg, data, Some(run_dir.to_path_buf()))?,
    };
    if stage != StageArg::Two && t.state().stage.number() == 1 {
        t.train_stage1()?;
        log::info!("stage 1 finished: {}", run_dir.join("checkpoints/stage1-final.safetensors").display());
    }
    if stage != StageArg::One {
        t.start_stage2(allow_cold)?;
        t.train_stage2()?;
        log::info!("stage 2 finished: {}", run_dir.join("checkpoints/stage2-final.safetensors").display());
    }
    for (k, v) in &t.state().smoothed {
        println!("{k} {v:.6}");
    }
    Ok(())
}

fn read_pose(path: &Path) -> Result<PoseAnnotation> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run_infer(checkpoint: &Path, sources: &[String], target_pose: &Path, out: &Path, ablation: Option<&str>) -> Result<()> {
    let ckpt = Checkpoint::read(checkpoint)?;
    let generator = ckpt.generator()?;
    let g = generator.config();
    let size = (g.image_height, g.image_width);
    let ablation: Ablation = match ablation {
        Some(a) => a.parse()?,
        None => ckpt.config.train.ablation,
    };
    let mut inputs = Vec::new();
    let mut frame = None;
    for spec in sources {
        let (img, pose) = spec
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("source `{spec}` is not IMG:POSE")))?;
        let (image, original) = load_image(Path::new(img), Some(size))?;
        frame.get_or_insert(original);
        let (pose, _) = read_pose(Path::new(pose))?.encode(original, size)?;
        inputs.push(SourceInput { image, pose });
    }
    let frame = frame.ok_or_else(|| Error::Config("at least one source is required".into()))?;
    let (target, _) = read_pose(target_pose)?.encode(frame, size)?;
    let image = infer(&generator, &inputs, &target, ablation)?;
    save_image(&image, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

struct EvalArgs {
    checkpoint: PathBuf,
    index: Option<PathBuf>,
    root: Option<PathBuf>,
    metrics: String,
    out: PathBuf,
    tuples: usize,
    sources: Option<usize>,
    seed: u64,
    real_vs_real: bool,
}

const METRICS: [&str; 4] = ["fid", "lpips", "mlpips", "l1"];

fn held_out_data(ckpt: &Checkpoint, index: Option<&Path>, root: Option<&Path>) -> Result<Box<dyn Dataset>> {
    let g = &ckpt.config.generator;
    let size = (g.image_height, g.image_width);
    match index {
        None => Ok(open(&ckpt.config.data, Path::new("."), size)?.1),
        Some(p) if p.extension().is_some_and(|e| e == "toml") => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            let spec: DataSource = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok(open(&spec, p.parent().unwrap_or(Path::new(".")), size)?.1)
        }
        Some(p) => {
            let root = root.or(p.parent()).unwrap_or(Path::new("."));
            Ok(Box::new(IndexDataset::open(p, root, size)?))
        }
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let metrics: Vec<&str> = args.metrics.split(',').map(str::trim).filter(|m| !m.is_empty()).collect();
    if metrics.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    for m in &metrics {
        if !METRICS.contains(m) {
            return Err(Error::Config(format!("unknown metric `{m}` (expected one of {})", METRICS.join(", "))));
        }
    }
    let ckpt = Checkpoint::read(&args.checkpoint)?;
    let generator = ckpt.generator()?;
    let provider = provider_from_config(&ckpt.config.loss)?;
    let data = held_out_data(&ckpt, args.index.as_deref(), args.root.as_deref())?;
    let k = args.sources.unwrap_or(ckpt.config.generator.sources);
    let batches = held_out_batches(data.as_ref(), k, args.tuples, ckpt.config.train.batch_size, args.seed)?;
    if metrics.contains(&"mlpips") && batches.iter().any(|b| b.target_mask.is_none()) {
        return Err(Error::Config(
            "mlpips requires foreground masks, and this dataset provides none for its targets".into(),
        ));
    }
    let n = batches.iter().map(|b| b.len()).sum::<usize>();

    let scores = if args.real_vs_real {
        let mut real = Vec::new();
        for b in &batches {
            real.extend(embed(&provider, &b.target_image)?);
        }
        HeldOut {
            l1: vec![0.0; n],
            perceptual: vec![0.0; n],
            masked_perceptual: Some(vec![0.0; n]),
            fake: real.clone(),
            real,
        }
    } else {
        evaluate(&generator, &batches, k, ckpt.config.train.ablation, &provider)?
    };
    let mut entries = Vec::new();
    for m in metrics {
        let value = match m {
            "fid" => fid(&EmbeddingStats::from_rows(&scores.real)?, &EmbeddingStats::from_rows(&scores.fake)?)?,
            "lpips" => scores.mean_perceptual(),
            "mlpips" => scores.mean_masked_perceptual().expect("masks checked above"),
            _ => scores.mean_l1(),
        };
        println!("{m} {value:.6}");
        entries.push(MetricEntry {
            metric: m.to_string(),
            value,
            n,
            embedder: provider.id().to_string(),
            checkpoint: ckpt.id.clone(),
        });
    }
    write_report(&args.out, &entries)
}

fn ablate(config: &Path, run_dir: &Path, variants: &str, eval_tuples: usize, eval_seed: u64, overrides: &Overrides) -> Result<()> {
    let variants = sweep::parse_variants(variants)?;
    let (cfg, base) = effective_config(config, overrides)?;
    write_file(&run_dir.join("config.toml"), &cfg.to_toml())?;
    let rows = sweep::run(
        &cfg,
        &base,
        run_dir,
        &SweepOptions {
            variants,
            eval_tuples,
            eval_seed,
        },
    )?;
    print!("{}", sweep::format_table(&rows));
    Ok(())
}
