use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rfgen::config::{DataSource, GeneratorConfig, RunConfig};

fn rfgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfgen"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RFGEN_DEVICE")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.generator = GeneratorConfig {
        image_height: 32,
        image_width: 32,
        ..GeneratorConfig::desk(2, 4)
    };
    c.train.batch_size = 2;
    c.train.stage1_iterations = 3;
    c.train.stage2_iterations = 3;
    c.train.seed = 5;
    c.data = DataSource::Synth {
        identities: 12,
        views: 4,
        size: 32,
        seed: 2,
        test_identities: Some(3),
    };
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn loss_lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Trains the tiny config through both stages and returns the run directory.
fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, &tiny_config());
    let run = dir.join("both");
    let o = rfgen(&["train", "--config", s(&cfg), "--run-dir", s(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    run
}

#[test]
fn prepare_synth_writes_only_a_spec() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spec.toml");
    let args = ["prepare", "--dataset", "synth", "--count", "100", "--out", s(&out)];
    assert_eq!(code(&rfgen(&args)), 0);
    let first = fs::read(&out).unwrap();
    let spec: DataSource = toml::from_str(std::str::from_utf8(&first).unwrap()).unwrap();
    assert!(matches!(spec, DataSource::Synth { identities: 100, .. }));
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    assert_eq!(code(&rfgen(&args)), 0);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn prepare_real_dataset_reports_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("market");
    fs::create_dir_all(&root).unwrap();
    let out = dir.path().join("index.jsonl");
    let o = rfgen(&["prepare", "--dataset", "market", "--root", s(&root), "--out", s(&out)]);
    assert_ne!(code(&o), 0);
    assert!(!stderr(&o).is_empty());
    assert!(!out.exists());
    let o = rfgen(&["prepare", "--dataset", "imagenet", "--root", s(&root), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_configs_are_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = tiny_config().to_toml();
    text = text.replace("[generator.lambdas]\n", "[generator.lambdas]\nbogus = 1.0\n");
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, text).unwrap();
    let run = dir.path().join("run");
    let o = rfgen(&["train", "--config", s(&cfg), "--run-dir", s(&run)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus") && stderr(&o).contains("line"), "{}", stderr(&o));
    assert!(!run.exists());

    let cfg = write_config(dir.path(), &tiny_config());
    let o = rfgen(&["train", "--config", s(&cfg), "--run-dir", s(&run), "--stage", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("allow-cold"));
    assert!(!run.exists());

    let o = Command::new(env!("CARGO_BIN_EXE_rfgen"))
        .args(["train", "--config", s(&cfg), "--run-dir", s(&run)])
        .env("RFGEN_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert_eq!(code(&rfgen(&["train", "--stage", "3"])), 1);
    assert_eq!(code(&rfgen(&["--help"])), 0);
}

#[test]
fn split_stages_match_a_single_run() {
    let dir = tempfile::tempdir().unwrap();
    let both = trained(dir.path());
    let cfg = dir.path().join("run.toml");
    let echoed = RunConfig::load(&both.join("config.toml")).unwrap();
    assert_eq!(echoed, tiny_config());

    let one = dir.path().join("one");
    let two = dir.path().join("two");
    let o = rfgen(&["train", "--config", s(&cfg), "--run-dir", s(&one), "--stage", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let warm = one.join("checkpoints/stage1-final.safetensors");
    let o = rfgen(&["train", "--config", s(&cfg), "--run-dir", s(&two), "--stage", "2", "--resume", s(&warm)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let joined: Vec<_> = loss_lines(&one.join("losses.jsonl")).into_iter().chain(loss_lines(&two.join("losses.jsonl"))).collect();
    let single = loss_lines(&both.join("losses.jsonl"));
    assert_eq!(joined.len(), 6);
    assert_eq!(single.len(), 6);
    for (a, b) in joined.iter().zip(&single) {
        for key in ["cor", "reg", "l1", "per", "sty", "adv_g", "adv_d", "total"] {
            let (x, y) = (a[key].as_f64().unwrap(), b[key].as_f64().unwrap());
            assert!((x - y).abs() <= 1e-6, "{key}: {x} vs {y}");
        }
    }
}

fn write_png(path: &Path, seed: u8) {
    let img = image::RgbImage::from_fn(48, 48, |x, y| image::Rgb([(x * 5) as u8 ^ seed, (y * 5) as u8, seed]));
    img.save(path).unwrap();
}

fn write_pose(path: &Path, visible: bool, shift: f32) {
    let points: Vec<_> = (0..4).map(|j| (10.0 + 6.0 * j as f32 + shift, 20.0 + shift, visible)).collect();
    let json = serde_json::json!({ "kind": "keypoints", "points": points });
    fs::write(path, json.to_string()).unwrap();
}

#[test]
fn infer_takes_any_number_of_sources() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let ckpt = run.join("checkpoints/stage2-final.safetensors");
    let d = dir.path();
    let mut sources = Vec::new();
    for i in 0..3 {
        write_png(&d.join(format!("s{i}.png")), 40 * i as u8);
        write_pose(&d.join(format!("s{i}.json")), true, i as f32);
        sources.push(format!("{}:{}", s(&d.join(format!("s{i}.png"))), s(&d.join(format!("s{i}.json")))));
    }
    write_pose(&d.join("t.json"), true, 4.0);
    let target = d.join("t.json");
    for k in [2, 3] {
        let out = d.join(format!("out{k}.png"));
        let mut args = vec!["infer", "--checkpoint", s(&ckpt), "--target-pose", s(&target), "--out", s(&out)];
        for src in &sources[..k] {
            args.extend(["--sources", src.as_str()]);
        }
        let o = rfgen(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let img = image::open(&out).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let o = rfgen(&["infer", "--checkpoint", s(&ckpt), "--target-pose", s(&target), "--out", s(&d.join("x.png"))]);
    assert_eq!(code(&o), 1);

    let wrong = d.join("wrong.json");
    fs::write(&wrong, r#"{"kind":"keypoints","points":[[1.0,1.0,true]]}"#).unwrap();
    let o = rfgen(&["infer", "--checkpoint", s(&ckpt), "--sources", &sources[0], "--target-pose", s(&wrong), "--out", s(&d.join("x.png"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("pose"), "{}", stderr(&o));
}

#[test]
fn eval_reports_are_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path());
    let ckpt = run.join("checkpoints/stage2-final.safetensors");
    let d = dir.path();
    let spec = d.join("spec.toml");
    let cfg = tiny_config();
    fs::write(&spec, toml::to_string(&cfg.data).unwrap()).unwrap();

    let base = ["eval", "--checkpoint", s(&ckpt), "--index", s(&spec), "--tuples", "6"];
    let self_report = d.join("self.json");
    let o = rfgen(&[&base[..], &["--metrics", "fid,lpips", "--real-vs-real", "--out", s(&self_report)]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&self_report).unwrap()).unwrap();
    assert!(report[0]["value"].as_f64().unwrap() < 1e-3);

    let (r1, r2) = (d.join("r1.json"), d.join("r2.json"));
    for r in [&r1, &r2] {
        let o = rfgen(&[&base[..], &["--metrics", "fid,lpips,mlpips,l1", "--out", s(r)]].concat());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());

    let o = rfgen(&[&base[..], &["--metrics", "fid,ssim", "--out", s(&r1)]].concat());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("ssim"));

    // an index with no visible joints and no mask files has no foreground masks
    let mut lines = String::new();
    for i in 0..3 {
        write_png(&d.join(format!("m{i}.png")), 30 * i as u8);
        let rec = serde_json::json!({
            "id": format!("m{i}"),
            "identity": "a",
            "path": format!("m{i}.png"),
            "pose": { "kind": "keypoints", "points": vec![(0.0, 0.0, false); 4] },
        });
        lines += &format!("{rec}\n");
    }
    let index = d.join("index.jsonl");
    fs::write(&index, lines).unwrap();
    let o = rfgen(&["eval", "--checkpoint", s(&ckpt), "--index", s(&index), "--metrics", "mlpips", "--out", s(&r1)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("mask"), "{}", stderr(&o));
}

#[test]
fn ablate_tables_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let mut tables = Vec::new();
    for run in ["a", "b"] {
        let run = dir.path().join(run);
        let o = rfgen(&["ablate", "--config", s(&cfg), "--run-dir", s(&run), "--variants", "full", "--eval-tuples", "4"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let table = fs::read_to_string(run.join("ablation.txt")).unwrap();
        assert_eq!(table.lines().count(), 2);
        assert!(table.lines().nth(1).unwrap().starts_with("full"));
        tables.push(table);
    }
    assert_eq!(tables[0], tables[1]);
    let o = rfgen(&["ablate", "--config", s(&cfg), "--run-dir", s(&dir.path().join("c")), "--variants", "full,no-fusion"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("c").exists());
}
