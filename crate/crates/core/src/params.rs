//! Named parameter storage, checkpointing, and the Adam optimizer.
//!
//! Parameters live as plain named f32 buffers; each training step binds
//! them to a fresh tape as leaves, runs backward, and applies Adam by
//! name. Checkpoints are a directory of T32 tensors plus an index JSON;
//! identical training runs produce bit-identical checkpoints.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::t32::{read_t32, write_t32, T32Error};
use crate::tensor::{Gradients, Result as TResult, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    T32(#[from] T32Error),
    #[error("{path}: {detail}")]
    Format { path: String, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone)]
struct ParamEntry {
    name: String,
    data: Vec<f32>,
    shape: Vec<usize>,
}

/// Ordered, named parameter buffers.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

/// Leaf tensors bound to one tape, keyed by parameter name.
pub struct LeafSet {
    pub tensors: HashMap<String, Tensor>,
}

impl LeafSet {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    /// Collect per-parameter gradients (zeros where a parameter was
    /// unreachable from the loss).
    pub fn grad_map(&self, grads: &Gradients) -> HashMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .map(|(name, t)| {
                let g = grads
                    .get(t)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, data: Vec<f32>, shape: &[usize]) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            data,
            shape: shape.to_vec(),
        });
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn data(&self, name: &str) -> &[f32] {
        let e = &self.entries[self.index[name]];
        &e.data
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        &self.entries[self.index[name]].shape
    }

    pub fn n_params(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Bind every parameter to `tape` as a trainable leaf.
    pub fn leaves(&self, tape: &Tape) -> TResult<LeafSet> {
        let mut tensors = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            tensors.insert(e.name.clone(), tape.leaf(e.data.clone(), &e.shape)?);
        }
        Ok(LeafSet { tensors })
    }

    /// Read-only constant tensors (frozen use).
    pub fn constants(&self) -> HashMap<String, Tensor> {
        self.entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    Tensor::from_vec(e.data.clone(), &e.shape).expect("stored shapes are valid"),
                )
            })
            .collect()
    }

    /// FNV-1a over all parameter bytes in insertion order; used to assert
    /// frozen components stay frozen.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for e in &self.entries {
            for v in &e.data {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn save(&self, dir: &Path, kind: &str, step: u64) -> Result<(), CheckpointError> {
        std::fs::create_dir_all(dir).map_err(|e| CheckpointError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut names = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("p{:03}.t32", i);
            write_t32(&dir.join(&file), &e.data, &e.shape)?;
            names.push(CheckpointParam {
                name: e.name.clone(),
                file,
                shape: e.shape.clone(),
            });
        }
        let idx = CheckpointIndex {
            kind: kind.to_string(),
            step,
            params: names,
        };
        let path = dir.join("params.json");
        std::fs::write(&path, serde_json::to_string_pretty(&idx).expect("serializable")).map_err(
            |e| CheckpointError::Io {
                path: path.display().to_string(),
                source: e,
            },
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(ParamStore, CheckpointIndex), CheckpointError> {
        let path = dir.join("params.json");
        let text = std::fs::read_to_string(&path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let idx: CheckpointIndex =
            serde_json::from_str(&text).map_err(|e| CheckpointError::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut store = ParamStore::new();
        for p in &idx.params {
            let (data, shape) = read_t32(&dir.join(&p.file))?;
            if shape != p.shape {
                return Err(CheckpointError::Format {
                    path: dir.join(&p.file).display().to_string(),
                    detail: format!("shape {:?} does not match index {:?}", shape, p.shape),
                });
            }
            store.insert(&p.name, data, &shape);
        }
        Ok((store, idx))
    }

    fn data_mut(&mut self, name: &str) -> &mut Vec<f32> {
        let i = self.index[name];
        &mut self.entries[i].data
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub kind: String,
    pub step: u64,
    pub params: Vec<CheckpointParam>,
}

/// Adam with the usual bias correction. Gradient buffers are supplied per
/// step; the store is updated in place, in insertion order.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: HashMap<String, Vec<f32>>,
    v: HashMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<String, Vec<f32>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = store.names().map(|s| s.to_string()).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let data = store.data_mut(&name);
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
