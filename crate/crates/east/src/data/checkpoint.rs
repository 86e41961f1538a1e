//! Checkpoint persistence over the named-tensor container.
//!
//! Besides model parameters the file carries, as reserved tensors: the
//! config text (`__config__`, one byte per f32), training progress
//! (`meta.*`, bit-packed u32 pairs) and optimizer moments (`adam.*`). The
//! container layout itself stays exactly: magic, version, then named
//! tensor records.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_named_tensors, write_named_tensors, Adam, NamedTensor, ParamStore};

const CONFIG_TENSOR: &str = "__config__";
const META_TENSOR: &str = "meta.progress";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainProgress {
    pub stage: u32,
    pub epoch: u32,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub config_text: String,
    pub adam: Vec<NamedTensor>,
    pub progress: TrainProgress,
}

/// Mismatch report from [`Checkpoint::apply_to`]; the caller decides
/// whether a config difference is a warning or an error.
#[derive(Debug, Clone, Default)]
pub struct LoadNotes {
    pub config_differs: bool,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore<f32>,
    config_text: &str,
    adam: Option<&Adam>,
    progress: TrainProgress,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.num_entries() + 2);
    tensors.push(NamedTensor {
        name: CONFIG_TENSOR.to_string(),
        shape: vec![config_text.len()],
        data: config_text.bytes().map(|b| b as f32).collect(),
    });
    tensors.push(NamedTensor {
        name: META_TENSOR.to_string(),
        shape: vec![2],
        data: vec![
            f32::from_bits(progress.stage),
            f32::from_bits(progress.epoch),
        ],
    });
    for (name, p) in store.iter() {
        tensors.push(NamedTensor {
            name: name.clone(),
            shape: p.shape.clone(),
            data: p.data.iter().copied().collect(),
        });
    }
    if let Some(adam) = adam {
        for (name, shape, data) in adam.export() {
            tensors.push(NamedTensor { name, shape, data });
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_named_tensors(&mut w, &tensors).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let tensors = read_named_tensors(&mut r, path)?;
    let mut params = Vec::new();
    let mut adam = Vec::new();
    let mut config_text = None;
    let mut progress = TrainProgress { stage: 0, epoch: 0 };
    for t in tensors {
        if t.name == CONFIG_TENSOR {
            let bytes: Vec<u8> = t.data.iter().map(|&v| v as u8).collect();
            config_text = Some(String::from_utf8(bytes).map_err(|_| {
                Error::format(path, "embedded config is not valid utf-8")
            })?);
        } else if t.name == META_TENSOR {
            progress = TrainProgress {
                stage: t.data[0].to_bits(),
                epoch: t.data[1].to_bits(),
            };
        } else if t.name.starts_with("adam.") {
            adam.push(t);
        } else {
            params.push(t);
        }
    }
    Ok(Checkpoint {
        params,
        config_text: config_text
            .ok_or_else(|| Error::format(path, "checkpoint has no embedded config"))?,
        adam,
        progress,
    })
}

impl Checkpoint {
    /// Copy parameters into a registered store. Every checkpoint tensor
    /// must exist in the store with the same shape, and vice versa — a
    /// name mismatch is its own error, distinct from format errors.
    pub fn apply_to(&self, store: &mut ParamStore<f32>, current_config: &str) -> Result<LoadNotes> {
        let mut missing: Vec<String> = Vec::new();
        let mut seen: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
        for t in &self.params {
            seen.insert(t.name.as_str());
            if !store.contains(&t.name) {
                missing.push(t.name.clone());
            }
        }
        let unmatched: Vec<String> = store
            .names()
            .into_iter()
            .filter(|n| !seen.contains(n.as_str()))
            .collect();
        if !missing.is_empty() || !unmatched.is_empty() {
            return Err(Error::Data(format!(
                "tensor-name mismatch: checkpoint-only [{}], model-only [{}]",
                missing.join(", "),
                unmatched.join(", ")
            )));
        }
        for t in &self.params {
            let expected = &store.get(&t.name)?.shape;
            if *expected != t.shape {
                return Err(Error::Data(format!(
                    "{}: checkpoint shape {:?} vs model shape {:?}",
                    t.name, t.shape, expected
                )));
            }
            store.set_data(&t.name, t.data.clone())?;
        }
        Ok(LoadNotes {
            config_differs: self.config_text != current_config,
        })
    }
}
