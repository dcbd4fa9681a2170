use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use super::adam::Adam;
use crate::autograd::Var;
use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::networks::{discriminator, Discriminator, Generator};
use crate::nn::Module;

const FORMAT: &str = "rfgen-checkpoint-1";

/// Parameters, optimizer moments and run position in one safetensors file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: u8,
    pub iteration: u64,
    pub stage1_complete: bool,
    pub smoothed: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub adam_steps: BTreeMap<String, u64>,
    /// Hex SHA-256 prefix of the file contents (empty until written or read).
    pub id: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(config: RunConfig, stage: u8, iteration: u64, stage1_complete: bool) -> Self {
        Checkpoint {
            config,
            stage,
            iteration,
            stage1_complete,
            smoothed: BTreeMap::new(),
            tensors: BTreeMap::new(),
            adam_steps: BTreeMap::new(),
            id: String::new(),
        }
    }

    pub fn add_params(&mut self, prefix: &str, params: &[(String, &Var)]) {
        for (name, var) in params {
            self.tensors.insert(format!("{prefix}.{name}"), (var.shape(), var.to_vec()));
        }
    }

    pub fn add_adam(&mut self, key: &str, adam: &Adam) {
        self.adam_steps.insert(key.to_string(), adam.steps);
        for (name, (m, v)) in &adam.moments {
            self.tensors.insert(format!("adam.{key}.m.{name}"), (vec![m.len()], m.clone()));
            self.tensors.insert(format!("adam.{key}.v.{name}"), (vec![v.len()], v.clone()));
        }
    }

    /// Copies stored values into `params`; every parameter must be present with its shape.
    pub fn restore(&self, prefix: &str, params: &[(String, &Var)]) -> Result<()> {
        for (name, var) in params {
            let key = format!("{prefix}.{name}");
            let (shape, data) = self.tensors.get(&key).ok_or_else(|| bad(format!("missing tensor {key}")))?;
            if *shape != var.shape() {
                return Err(bad(format!("{key}: stored shape {shape:?}, model expects {:?}", var.shape())));
            }
            var.set(data.clone());
        }
        Ok(())
    }

    pub fn adam(&self, key: &str, lr: f64, beta1: f64, beta2: f64) -> Adam {
        let mut adam = Adam::new(lr, beta1, beta2);
        adam.steps = self.adam_steps.get(key).copied().unwrap_or(0);
        let prefix = format!("adam.{key}.m.");
        for (k, (_, m)) in self.tensors.range(prefix.clone()..) {
            let Some(name) = k.strip_prefix(&prefix) else { break };
            let v = &self.tensors[&format!("adam.{key}.v.{name}")].1;
            adam.moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        adam
    }

    pub fn generator(&self) -> Result<Generator> {
        let g = Generator::new(&self.config.generator)?;
        self.restore("generator", &g.named_params())?;
        Ok(g)
    }

    pub fn discriminator(&self) -> Result<Discriminator> {
        let d = discriminator(&self.config.generator);
        self.restore("discriminator", &d.named_params())?;
        Ok(d)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, (s, d))| (k.clone(), s.clone(), d.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = bytes
            .iter()
            .map(|(k, s, b)| Ok((k.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| bad(e.to_string()))?)))
            .collect::<Result<Vec<_>>>()?;
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("config".to_string(), self.config.to_toml());
        meta.insert("stage".to_string(), self.stage.to_string());
        meta.insert("iteration".to_string(), self.iteration.to_string());
        meta.insert("seed".to_string(), self.config.train.seed.to_string());
        meta.insert("stage1_complete".to_string(), self.stage1_complete.to_string());
        meta.insert("smoothed".to_string(), serde_json::to_string(&self.smoothed)?);
        meta.insert("adam_steps".to_string(), serde_json::to_string(&self.adam_steps)?);
        safetensors::serialize(views, &Some(meta)).map_err(|e| bad(e.to_string()))
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))?;
        self.id = digest(&bytes);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let get = |k: &str| meta.get(k).ok_or_else(|| bad(format!("{}: metadata lacks `{k}`", path.display())));
        if get("format")? != FORMAT {
            return Err(bad(format!("{}: unsupported format {}", path.display(), get("format")?)));
        }
        let config = RunConfig::from_toml_str(get("config")?)?;
        let parse = |k: &str| get(k)?.parse::<u64>().map_err(|e| bad(format!("{k}: {e}")));
        let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: expected F32, found {:?}", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.insert(name, (view.shape().to_vec(), data));
        }
        Ok(Checkpoint {
            config,
            stage: parse("stage")? as u8,
            iteration: parse("iteration")?,
            stage1_complete: get("stage1_complete")? == "true",
            smoothed: serde_json::from_str(get("smoothed")?)?,
            adam_steps: serde_json::from_str(get("adam_steps")?)?,
            tensors,
            id: digest(&bytes),
        })
    }
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
