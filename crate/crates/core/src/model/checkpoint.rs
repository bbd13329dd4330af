//! Checkpoint container: a JSON header (dtype, model config, array manifest)
//! followed by raw little-endian parameter data. Save/load round-trips are
//! bit-exact; the layout is documented in the repository README.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::scalar::Float;

const MAGIC: &[u8; 4] = b"CFT1";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in scalars into the data region.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    arrays: Vec<ArrayEntry>,
}

/// Serialize the full model state.
pub fn save_checkpoint<F: Float>(state: &ModelState<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let named = state.named_slices();
    let mut arrays = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, shape, slice) in &named {
        arrays.push(ArrayEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            len: slice.len(),
        });
        offset += slice.len();
    }
    let header = Header {
        dtype: F::DTYPE.to_string(),
        config: state.config.clone(),
        arrays,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(MAGIC).map_err(|e| Error::io(path, e))?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    file.write_all(&header_json).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::with_capacity(offset * 8);
    if F::DTYPE == "f32" {
        for (_, _, slice) in &named {
            for &v in *slice {
                data.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
    } else {
        for (_, _, slice) in &named {
            for &v in *slice {
                data.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
    }
    file.write_all(&data).map_err(|e| Error::io(path, e))
}

/// Load a checkpoint saved with the same scalar type.
pub fn load_checkpoint<F: Float>(path: impl AsRef<Path>) -> Result<ModelState<F>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != F::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint dtype {} does not match requested {}",
            header.dtype,
            F::DTYPE
        )));
    }
    let data = &bytes[8 + header_len..];
    let width = if header.dtype == "f32" { 4 } else { 8 };
    let mut state = ModelState::<F>::init(header.config.clone(), 0)?;
    // Overwrite the fresh init with the stored values, matched by name.
    let mut filled = 0usize;
    {
        let entries: std::collections::BTreeMap<&str, &ArrayEntry> =
            header.arrays.iter().map(|a| (a.name.as_str(), a)).collect();
        let names: Vec<String> = state.named_slices().iter().map(|(n, _, _)| n.clone()).collect();
        for name in names {
            let entry = entries.get(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint missing array {name}"))
            })?;
            let start = entry.offset * width;
            let end = start + entry.len * width;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("array {name} out of bounds")));
            }
            let raw = &data[start..end];
            let target = locate_mut(&mut state, &name)?;
            if target.len() != entry.len {
                return Err(Error::Checkpoint(format!(
                    "array {name}: stored len {} vs model len {}",
                    entry.len,
                    target.len()
                )));
            }
            if width == 4 {
                for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(4)) {
                    *dst = F::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            } else {
                for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
                    *dst = F::from_f64(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            filled += 1;
        }
    }
    if filled != header.arrays.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} arrays, model uses {filled}",
            header.arrays.len()
        )));
    }
    Ok(state)
}

fn locate_mut<'a, F: Float>(state: &'a mut ModelState<F>, name: &str) -> Result<&'a mut [F]> {
    let missing = || Error::Checkpoint(format!("unknown array name {name}"));
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["backbone", "patch_weight"] => Ok(state.backbone.patch_weight.as_slice_mut().unwrap()),
        ["backbone", "patch_bias"] => Ok(state.backbone.patch_bias.as_slice_mut().unwrap()),
        ["backbone", "pos_embed"] => Ok(state.backbone.pos_embed.as_slice_mut().unwrap()),
        ["backbone", "layers", idx, field] => {
            let i: usize = idx.parse().map_err(|_| missing())?;
            let layer = state.backbone.layers.get_mut(i).ok_or_else(missing)?;
            let arr = match *field {
                "ln1_gamma" => layer.ln1_gamma.as_slice_mut(),
                "ln1_beta" => layer.ln1_beta.as_slice_mut(),
                "wq" => layer.wq.as_slice_mut(),
                "bq" => layer.bq.as_slice_mut(),
                "wk" => layer.wk.as_slice_mut(),
                "bk" => layer.bk.as_slice_mut(),
                "wv" => layer.wv.as_slice_mut(),
                "bv" => layer.bv.as_slice_mut(),
                "wo" => layer.wo.as_slice_mut(),
                "bo" => layer.bo.as_slice_mut(),
                "ln2_gamma" => layer.ln2_gamma.as_slice_mut(),
                "ln2_beta" => layer.ln2_beta.as_slice_mut(),
                "w1" => layer.w1.as_slice_mut(),
                "b1" => layer.b1.as_slice_mut(),
                "w2" => layer.w2.as_slice_mut(),
                "b2" => layer.b2.as_slice_mut(),
                _ => return Err(missing()),
            };
            Ok(arr.unwrap())
        }
        ["heads", idx, field] => {
            let i: usize = idx.parse().map_err(|_| missing())?;
            let head = state.heads.get_mut(i).ok_or_else(missing)?;
            match (head, *field) {
                (crate::model::HeadParams::Classification { weight }, "weight") => {
                    Ok(weight.as_slice_mut().unwrap())
                }
                (crate::model::HeadParams::Detection { weight, .. }, "weight") => {
                    Ok(weight.as_slice_mut().unwrap())
                }
                (crate::model::HeadParams::Detection { bias, .. }, "bias") => {
                    Ok(bias.as_slice_mut().unwrap())
                }
                _ => Err(missing()),
            }
        }
        _ => Err(missing()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::HeadSpec;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_t: 4,
            input_h: 8,
            input_w: 8,
            input_c: 2,
            tubelet: (2, 4, 4),
            hidden_dim: 6,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 10,
            stochastic_depth_rate: 0.1,
            roi_grid: (2, 2),
            heads: vec![
                HeadSpec {
                    task: TaskKind::Detection,
                    num_classes: 4,
                },
                HeadSpec {
                    task: TaskKind::Classification,
                    num_classes: 7,
                },
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact_f32() {
        let state = ModelState::<f32>::init(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn round_trip_is_bit_exact_f64() {
        let state = ModelState::<f64>::init(cfg(), 43).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(state, loaded);
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let state = ModelState::<f32>::init(cfg(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
