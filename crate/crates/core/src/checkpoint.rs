//! Detector checkpoints: `checkpoint.bin` holds every parameter as
//! consecutive encoded arrays, `checkpoint.json` the architecture and an
//! index into the binary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::{decode_array, encode_array};
use crate::error::{Error, Result};
use crate::liquid::{DecaySharingMode, DtPolicy};
use crate::pyramid::{Detector, PyramidConfig};
use crate::real::Real;

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
const FORMAT: &str = "lptb-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    /// Byte offset of the encoded array inside the binary file.
    pub offset: usize,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay: Option<DecayEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayEntry {
    pub sharing: DecaySharingMode,
    pub epsilon: f64,
    pub dt_policy: DtPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub model: PyramidConfig,
    pub params: Vec<ParamEntry>,
}

/// Values are stored as 32-bit floats regardless of `F`.
pub fn save_checkpoint<F: Real>(model: &Detector<F>, dir: &Path) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir)?;
    let decays: Vec<_> = model.blocks.iter().flatten().map(|b| &b.decay).collect();
    let mut bin = Vec::new();
    let mut params = Vec::with_capacity(model.store.len());
    for id in model.store.ids() {
        let p = model.store.get(id);
        let decay = decays.iter().find(|d| d.rho == id).map(|d| DecayEntry {
            sharing: d.sharing,
            epsilon: d.epsilon,
            dt_policy: d.dt_policy,
        });
        params.push(ParamEntry {
            name: p.name.clone(),
            offset: bin.len(),
            shape: p.value.shape().to_vec(),
            decay,
        });
        encode_array(&p.value, &mut bin);
    }
    let meta = CheckpointMeta {
        format: FORMAT.to_string(),
        model: model.cfg.clone(),
        params,
    };
    fs::write(dir.join(CHECKPOINT_BIN), &bin)?;
    fs::write(dir.join(CHECKPOINT_JSON), serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<Detector<F>> {
    let json_path = dir.join(CHECKPOINT_JSON);
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(&json_path)?).map_err(|e| Error::Corrupt {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.format != FORMAT {
        return Err(Error::Corrupt {
            path: json_path,
            reason: format!("unsupported format '{}'", meta.format),
        });
    }
    let bin_path = dir.join(CHECKPOINT_BIN);
    let bytes = fs::read(&bin_path)?;
    let mut values = Vec::with_capacity(meta.params.len());
    let mut cursor = 0;
    for entry in &meta.params {
        if entry.offset != cursor {
            return Err(Error::Mismatch(format!(
                "parameter '{}' indexed at byte {}, found at {cursor}",
                entry.name, entry.offset
            )));
        }
        let (value, used) = decode_array::<F>(&bytes[cursor..], &bin_path)?;
        if value.shape() != entry.shape.as_slice() {
            return Err(Error::Mismatch(format!(
                "parameter '{}': binary shape {:?}, index says {:?}",
                entry.name,
                value.shape(),
                entry.shape
            )));
        }
        cursor += used;
        values.push((entry.name.clone(), value));
    }
    if cursor != bytes.len() {
        return Err(Error::Corrupt {
            path: bin_path,
            reason: format!("{} trailing bytes", bytes.len() - cursor),
        });
    }
    let mut model = Detector::new(meta.model.clone(), 0)?;
    model.load_values(values)?;
    for (entry, d) in meta.params.iter().filter_map(|e| e.decay.map(|d| (e, d))) {
        let block = model
            .blocks
            .iter()
            .flatten()
            .find(|b| model.store.get(b.decay.rho).name == entry.name)
            .ok_or_else(|| Error::Mismatch(format!("'{}' is not a decay parameter", entry.name)))?;
        if block.decay.sharing != d.sharing || block.decay.epsilon != d.epsilon || block.decay.dt_policy != d.dt_policy {
            return Err(Error::Mismatch(format!("decay settings of '{}' disagree with the model", entry.name)));
        }
    }
    Ok(model)
}
