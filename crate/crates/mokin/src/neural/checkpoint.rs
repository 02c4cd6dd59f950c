//! Named-tensor checkpoints serialized as versioned JSON.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A flat, ordered map of named tensors. Models serialize by visiting
/// their parameters into one of these; loading restores by name and
/// rejects any shape or coverage mismatch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensors {
    pub version: u32,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Default for NamedTensors {
    fn default() -> Self {
        NamedTensors { version: CHECKPOINT_VERSION, tensors: BTreeMap::new() }
    }
}

impl NamedTensors {
    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        if self.tensors.insert(name.to_string(), tensor.clone()).is_some() {
            return Err(Error::CheckpointMismatch(format!("duplicate tensor name {name:?}")));
        }
        Ok(())
    }

    /// Copies the stored tensor into `dst`, enforcing an exact shape match.
    pub fn take_into(&self, name: &str, dst: &mut Tensor) -> Result<()> {
        let src = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor {name:?}")))?;
        if src.shape != dst.shape {
            return Err(Error::CheckpointMismatch(format!(
                "tensor {name:?}: stored shape {:?}, expected {:?}",
                src.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&src.data);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NamedTensors> {
        let file = std::fs::File::open(path)?;
        let loaded: NamedTensors = serde_json::from_reader(BufReader::new(file))?;
        if loaded.version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                found: loaded.version,
                supported: CHECKPOINT_VERSION,
            });
        }
        Ok(loaded)
    }
}
