use std::path::PathBuf;

use rfgen::autograd::{Tensor, Var};
use rfgen::config::{Ablation, GeneratorConfig, RunConfig};
use rfgen::data::{Dataset, Sample, SynthSprites};
use rfgen::networks::{Generator, SourceInput};
use rfgen::nn::Module;
use rfgen::train::*;
use rfgen::Error;

fn config(ablation: Ablation) -> RunConfig {
    let mut c = RunConfig::default();
    c.generator = GeneratorConfig {
        image_height: 32,
        image_width: 32,
        ..GeneratorConfig::desk(2, 4)
    };
    c.train.batch_size = 2;
    c.train.stage1_iterations = 3;
    c.train.stage2_iterations = 3;
    c.train.ablation = ablation;
    c.train.seed = 11;
    c
}

fn data() -> Box<dyn Dataset> {
    Box::new(SynthSprites::new(3, 32, 0, 12, 4).unwrap())
}

fn snapshot(params: &[(String, &Var)]) -> Vec<(String, Vec<f32>)> {
    params.iter().map(|(n, v)| (n.clone(), v.to_vec())).collect()
}

#[test]
fn adam_first_step_and_clipping() {
    let v = Var::new(vec![1.0f32, -2.0, 0.5], &[3]);
    let mut adam = Adam::new(0.1, 0.9, 0.999);
    adam.step(&[("w".into(), &v)], &[vec![0.5, -3.0, 0.0]]);
    let got = v.to_vec();
    assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 1.9).abs() < 1e-6 && got[2] == 0.5, "{got:?}");
    assert_eq!(adam.steps, 1);

    let mut g = vec![vec![3.0f32], vec![4.0]];
    assert_eq!(clip_global_norm(&mut g, Some(1.0)), 5.0);
    assert!((g[0][0] - 0.6).abs() < 1e-6 && (g[1][0] - 0.8).abs() < 1e-6);
    let mut g = vec![vec![0.3f32]];
    clip_global_norm(&mut g, Some(1.0));
    assert_eq!(g[0][0], 0.3);
    let mut g = vec![vec![30.0f32]];
    clip_global_norm(&mut g, None);
    assert_eq!(g[0][0], 30.0);
}

#[test]
fn zero_iterations_change_nothing() {
    let mut c = config(Ablation::Full);
    c.train.stage1_iterations = 0;
    let mut t = Trainer::new(c, data(), None).unwrap();
    let before = snapshot(&t.generator.named_params());
    assert!(t.train_stage1().unwrap().is_empty());
    assert_eq!(snapshot(&t.generator.named_params()), before);
}

#[test]
fn warmup_touches_only_the_flow_extractor() {
    let mut t = Trainer::new(config(Ablation::Full), data(), None).unwrap();
    let g0 = snapshot(&t.generator.named_params());
    let d0 = snapshot(&t.discriminator.named_params());
    for _ in 0..2 {
        let r = t.step().unwrap();
        assert_eq!(r.total, r.weighted_total(&t.config().generator.lambdas));
        assert_eq!(r.stage, 1);
        assert!(r.all_finite() && r.cor > 0.0);
    }
    assert_eq!(snapshot(&t.discriminator.named_params()), d0);
    let mut changed = 0;
    for ((name, before), (_, after)) in g0.iter().zip(snapshot(&t.generator.named_params())) {
        if name.starts_with("flow.") {
            changed += (*before != after) as usize;
        } else {
            assert_eq!(*before, after, "{name} moved during warm-up");
        }
    }
    assert!(changed > 0);
}

#[test]
fn stage2_requires_warmup_unless_cold() {
    let mut t = Trainer::new(config(Ablation::Full), data(), None).unwrap();
    assert!(t.start_stage2(false).is_err());
    assert!(t.train_stage2().is_err());
    t.start_stage2(true).unwrap();
    let r = t.step().unwrap();
    assert_eq!(r.stage, 2);
}

#[test]
fn stage2_reports_recombine_and_no_res_keeps_residuals_zero() {
    for ablation in [Ablation::NoRes, Ablation::Full] {
        let mut t = Trainer::new(config(ablation), data(), None).unwrap();
        t.train_stage1().unwrap();
        t.start_stage2(false).unwrap();
        let d0 = snapshot(&t.discriminator.named_params());
        for r in t.train_stage2().unwrap() {
            assert_eq!(r.total, r.weighted_total(&t.config().generator.lambdas));
            assert!(r.all_finite() && r.adv_d > 0.0 && r.l1 > 0.0);
        }
        assert_ne!(snapshot(&t.discriminator.named_params()), d0);
        let residual: Vec<_> = t
            .generator
            .named_params()
            .into_iter()
            .filter(|(n, _)| Generator::<f32>::is_residual_param(n))
            .collect();
        assert!(!residual.is_empty());
        let all_zero = residual.iter().all(|(_, v)| v.to_vec().iter().all(|&x| x == 0.0));
        assert_eq!(all_zero, ablation == Ablation::NoRes, "{ablation:?}");
    }
}

#[test]
fn neutral_discriminator_gives_log_two() {
    let mut t = Trainer::new(config(Ablation::Full), data(), None).unwrap();
    for (name, v) in t.discriminator.named_params() {
        if name.starts_with("out.") {
            v.set(vec![0.0; v.numel()]);
        }
    }
    t.freeze_discriminator(true);
    t.start_stage2(true).unwrap();
    for _ in 0..2 {
        let r = t.step().unwrap();
        assert_eq!(r.adv_g, 2f32.ln() as f64);
        assert_eq!(r.adv_d, 2.0 * 2f32.ln() as f64);
    }
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(Ablation::Full);
    c.train.stage1_iterations = 2;
    c.train.stage2_iterations = 14;

    let mut a = Trainer::new(c.clone(), data(), None).unwrap();
    a.train_stage1().unwrap();
    a.start_stage2(false).unwrap();
    let mut straight = Vec::new();
    for _ in 0..4 {
        straight.push(a.step().unwrap());
    }
    let path = dir.path().join("mid.safetensors");
    let id = a.save(&path).unwrap();
    for _ in 0..10 {
        straight.push(a.step().unwrap());
    }

    let ckpt = Checkpoint::read(&path).unwrap();
    assert_eq!(ckpt.id, id);
    assert_eq!((ckpt.stage, ckpt.iteration, ckpt.stage1_complete), (2, 4, true));
    let mut b = Trainer::resume(c.clone(), &ckpt, data(), None).unwrap();
    for (i, want) in straight[4..].iter().enumerate() {
        let got = b.step().unwrap();
        for (x, y) in [(got.total, want.total), (got.cor, want.cor), (got.adv_d, want.adv_d), (got.per, want.per)] {
            assert!((x - y).abs() <= 1e-6, "step {i}: {x} vs {y}");
        }
    }

    let mut again = Trainer::new(c.clone(), data(), None).unwrap();
    again.train_stage1().unwrap();
    again.start_stage2(false).unwrap();
    for want in &straight[..4] {
        assert_eq!(again.step().unwrap().total, want.total);
    }

    let mut other = c.clone();
    other.train.seed = 12;
    assert!(Trainer::resume(other, &ckpt, data(), None).is_err());
    let mut other = c;
    other.generator.pose_channels = 5;
    assert!(Trainer::resume(other, &ckpt, data(), None).is_err());
}

#[test]
fn run_directory_gets_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let mut c = config(Ablation::Full);
    c.train.checkpoint_every = 2;
    c.train.sample_every = 3;
    let mut t = Trainer::new(c, data(), Some(run.clone())).unwrap();
    t.train_stage1().unwrap();
    t.start_stage2(false).unwrap();
    t.train_stage2().unwrap();
    let log = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert_eq!(lines[0]["stage"], 1);
    assert_eq!(lines[5]["iteration"], 3);
    assert!(lines[5]["grad_norm"].as_f64().unwrap() > 0.0);
    for name in ["stage1-000002", "stage1-final", "stage2-000002", "stage2-final", "last"] {
        assert!(run.join(format!("checkpoints/{name}.safetensors")).is_file(), "{name}");
    }
    assert!(run.join("samples/iter000003.png").is_file());
    let last = Checkpoint::read(&run.join("checkpoints/last.safetensors")).unwrap();
    assert_eq!((last.stage, last.iteration), (2, 3));
}

struct Poisoned(SynthSprites);

impl Dataset for Poisoned {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn image_size(&self) -> (usize, usize) {
        self.0.image_size()
    }
    fn pose_channels(&self) -> usize {
        self.0.pose_channels()
    }
    fn groups(&self) -> Vec<(String, Vec<usize>)> {
        self.0.groups()
    }
    fn load(&self, index: usize) -> rfgen::Result<Sample> {
        let mut s = self.0.load(index)?;
        let mut d = s.image.to_vec();
        d[0] = f32::NAN;
        s.image = Tensor::from_vec(d, s.image.shape());
        Ok(s)
    }
}

#[test]
fn non_finite_loss_aborts_with_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = Box::new(Poisoned(SynthSprites::new(3, 32, 0, 12, 4).unwrap()));
    let mut t = Trainer::new(config(Ablation::Full), data, Some(dir.path().to_path_buf())).unwrap();
    match t.step() {
        Err(Error::NonFinite { stage, iteration, dump }) => {
            assert_eq!((stage, iteration), (1, 0));
            assert!(dump.is_file());
            assert!(dump.starts_with(dir.path()));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn inference_accepts_any_source_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config(Ablation::Full), data(), None).unwrap();
    t.train_stage1().unwrap();
    t.start_stage2(false).unwrap();
    t.step().unwrap();
    let path: PathBuf = dir.path().join("g.safetensors");
    t.save(&path).unwrap();
    let g = Checkpoint::read(&path).unwrap().generator().unwrap();
    let ds = SynthSprites::new(3, 32, 50, 1, 4).unwrap();
    let s: Vec<Sample> = (0..4).map(|i| ds.load(i).unwrap()).collect();
    let src = |i: usize| SourceInput {
        image: s[i].image.clone(),
        pose: s[i].pose.clone(),
    };
    let one = infer(&g, &[src(0)], &s[3].pose, Ablation::Full).unwrap();
    let dup = infer(&g, &[src(0), src(0)], &s[3].pose, Ablation::Full).unwrap();
    assert!(one.max_abs_diff(&dup) <= 1e-5);
    let three = infer(&g, &[src(0), src(1), src(2)], &s[3].pose, Ablation::Full).unwrap();
    assert_eq!(three.shape(), &[1, 3, 32, 32]);
    assert!(three.all_finite());
    let again = infer(&g, &[src(0), src(1), src(2)], &s[3].pose, Ablation::Full).unwrap();
    assert_eq!(three.data(), again.data());
    let wrong = Tensor::zeros(&[1, 5, 32, 32]);
    let err = infer(&g, &[src(0)], &wrong, Ablation::Full).unwrap_err();
    assert!(err.to_string().contains("pose"), "{err}");
    // weights round-trip exactly
    for ((n, a), (_, b)) in t.generator.named_params().iter().zip(g.named_params()) {
        assert_eq!(a.to_vec(), b.to_vec(), "{n}");
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(config(Ablation::Full), data(), None).unwrap();
    let mut c = t.checkpoint();
    let key = c.tensors.keys().find(|k| k.starts_with("generator.flow")).unwrap().clone();
    c.tensors.remove(&key);
    let path = dir.path().join("broken.safetensors");
    c.write(&path).unwrap();
    let err = Checkpoint::read(&path).unwrap().generator().unwrap_err().to_string();
    assert!(err.contains(&key), "{err}");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::read(&path).is_err());
}
