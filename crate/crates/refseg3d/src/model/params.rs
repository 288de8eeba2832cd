//! Named parameter storage, initialization and checkpointing.
//!
//! Parameters live in a sorted map keyed `module.layer.name`. Weight
//! matrices are Xavier-uniform, biases start at zero. Each parameter's
//! initializer is seeded from (global seed, parameter name), so values do
//! not depend on registration order.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::Context;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

/// Every parameter the model owns, with its shape, in declaration order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));

    push("text.w_t".into(), vec![cfg.c_text, d]);
    for (branch, c_in) in [("mlp3d", cfg.c_3d), ("mlp2d", cfg.c_2d)] {
        push(format!("fuse.{branch}.w1"), vec![c_in, d]);
        push(format!("fuse.{branch}.b1"), vec![d]);
        push(format!("fuse.{branch}.w2"), vec![d, d]);
        push(format!("fuse.{branch}.b2"), vec![d]);
    }
    for w in ["w_q", "w_k", "w_v"] {
        push(format!("queries.spa.{w}"), vec![d, d]);
    }
    push("queries.mlp.w1".into(), vec![d, d]);
    push("queries.mlp.b1".into(), vec![d]);
    push("queries.mlp.w2".into(), vec![d, d]);
    push("queries.mlp.b2".into(), vec![d]);
    push("init.w_mask".into(), vec![d, d]);
    push("init.w_prob".into(), vec![d, 1]);
    for l in 0..cfg.layers {
        for block in ["prompt", "text", "self", "visual", "spa"] {
            for w in ["w_q", "w_k", "w_v"] {
                push(format!("layer{l}.{block}.{w}"), vec![d, d]);
            }
        }
        push(format!("layer{l}.head.w_mask"), vec![d, d]);
        push(format!("layer{l}.head.w_prob"), vec![d, 1]);
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    /// Fresh parameters for `cfg`: Xavier-uniform weights, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for (name, shape) in param_layout(cfg) {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            entries.insert(name, Param { shape, data });
        }
        Self { entries }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn set(&mut self, name: &str, data: Vec<f64>) -> anyhow::Result<()> {
        let param = self
            .entries
            .get_mut(name)
            .with_context(|| format!("unknown parameter {name}"))?;
        anyhow::ensure!(
            data.len() == param.data.len(),
            "parameter {name}: length {} != {}",
            data.len(),
            param.data.len()
        );
        param.data = data;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Flat copies keyed by name, as the gradient checker wants them.
    pub fn to_flat(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.data.clone()))
            .collect()
    }

    pub fn load_flat(&mut self, flat: &BTreeMap<String, Vec<f64>>) -> anyhow::Result<()> {
        for (name, data) in flat {
            self.set(name, data.clone())?;
        }
        Ok(())
    }

    /// Registers every parameter on `tape` as a leaf.
    pub fn leaves(&self, tape: &Tape, trainable: bool) -> ModelParams {
        let mut map = BTreeMap::new();
        for (name, param) in &self.entries {
            let t = tape
                .leaf(param.data.clone(), param.shape.clone(), trainable)
                .expect("stored parameter shapes are consistent");
            map.insert(name.clone(), t);
        }
        ModelParams {
            tape: tape.clone(),
            map,
        }
    }

    /// Plain gradient step: `p -= lr * g` for every provided gradient.
    pub fn apply_grads(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> anyhow::Result<()> {
        for (name, g) in grads {
            let param = self
                .entries
                .get_mut(name)
                .with_context(|| format!("gradient for unknown parameter {name}"))?;
            anyhow::ensure!(
                g.len() == param.data.len(),
                "gradient for {name}: length {} != {}",
                g.len(),
                param.data.len()
            );
            for (p, &gv) in param.data.iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }
}

// ── checkpointing ───────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    config: ModelConfig,
    params: BTreeMap<String, String>,
}

/// Writes `dir/index.json` plus one TNSR blob per parameter.
pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, store: &ParamStore) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
    let mut files = BTreeMap::new();
    for (i, (name, param)) in store.entries.iter().enumerate() {
        let file = format!("p{i:04}.tnsr");
        save_tensor(&dir.join(&file), &param.shape, &param.data)?;
        files.insert(name.clone(), file);
    }
    let index = CheckpointIndex {
        config: cfg.clone(),
        params: files,
    };
    std::fs::write(
        dir.join("index.json"),
        serde_json::to_string_pretty(&index)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> anyhow::Result<(ModelConfig, ParamStore)> {
    let raw = std::fs::read_to_string(dir.join("index.json"))
        .with_context(|| format!("read {}/index.json", dir.display()))?;
    let index: CheckpointIndex = serde_json::from_str(&raw)?;
    let mut entries = BTreeMap::new();
    for (name, file) in &index.params {
        let (shape, data) = load_tensor(&dir.join(file))?;
        entries.insert(name.clone(), Param { shape, data });
    }
    let store = ParamStore { entries };
    // A checkpoint must carry exactly the parameters its config implies.
    for (name, shape) in param_layout(&index.config) {
        let param = store
            .get(&name)
            .with_context(|| format!("checkpoint missing parameter {name}"))?;
        anyhow::ensure!(
            param.shape == shape,
            "checkpoint parameter {name}: shape {:?} != expected {:?}",
            param.shape,
            shape
        );
    }
    Ok((index.config, store))
}

/// Tape leaves for every parameter, ready for a forward pass.
pub struct ModelParams {
    tape: Tape,
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn attention(&self, prefix: &str) -> crate::attention::AttentionParams<'_> {
        crate::attention::AttentionParams {
            w_q: self.get(&format!("{prefix}.w_q")),
            w_k: self.get(&format!("{prefix}.w_k")),
            w_v: self.get(&format!("{prefix}.w_v")),
        }
    }

    /// Collects gradients (zeros where a parameter did not participate).
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        self.map
            .iter()
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}
