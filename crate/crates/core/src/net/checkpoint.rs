//! Checkpoints: a JSON manifest next to a little-endian f32 weight blob.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::layers::Conv2d;
use crate::net::model::{architecture_hash, layer_shapes, NetParams, LAYER_NAMES};
use crate::raster::write_atomic;
use crate::real::Real;

pub const CHECKPOINT_FORMAT: &str = "burstsr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    /// Offset in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub architecture_hash: String,
    pub channels: usize,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub blob: String,
    pub sections: Vec<Section>,
}

/// Blob path belonging to a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint<R: Real>(
    path: &Path,
    params: &NetParams<R>,
    seed: u64,
    epoch: usize,
    val_loss: f64,
) -> Result<()> {
    let mut bytes = Vec::with_capacity(4 * params.param_count());
    let mut sections = Vec::new();
    let mut offset = 0;
    for (name, layer) in LAYER_NAMES.iter().zip(&params.layers) {
        for (suffix, data) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            sections.push(Section {
                name: format!("{name}.{suffix}"),
                offset,
                len: data.len(),
            });
            offset += data.len();
            for v in data.iter() {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let blob = blob_path(path);
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        architecture_hash: architecture_hash(params.channels),
        channels: params.channels,
        seed,
        epoch,
        val_loss,
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sections,
    };
    write_atomic(&blob, &bytes)?;
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &json)
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(NetParams<R>, CheckpointManifest)> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(
            path,
            format!("unknown format {:?}", manifest.format),
        ));
    }
    if manifest.channels == 0 || manifest.architecture_hash != architecture_hash(manifest.channels)
    {
        return Err(Error::format(
            path,
            "architecture hash does not match this build",
        ));
    }
    let blob = path.with_file_name(&manifest.blob);
    let bytes = std::fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(&blob, "blob length is not a multiple of 4"));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let section = |name: String, len: usize| -> Result<Vec<R>> {
        let s = manifest
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::format(path, format!("missing section {name}")))?;
        if s.len != len || s.offset + s.len > values.len() {
            return Err(Error::format(
                path,
                format!("section {name} has the wrong size"),
            ));
        }
        Ok(values[s.offset..s.offset + s.len]
            .iter()
            .map(|&v| R::of(v as f64))
            .collect())
    };
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for (name, (cin, cout, stride)) in LAYER_NAMES.iter().zip(layer_shapes(manifest.channels)) {
        let weight = section(format!("{name}.weight"), cout * cin * 9)?;
        let bias = section(format!("{name}.bias"), cout)?;
        layers.push(Conv2d {
            cin,
            cout,
            stride,
            weight,
            bias,
        });
    }
    let params = NetParams {
        channels: manifest.channels,
        layers,
    };
    if !params.all_finite() {
        return Err(Error::format(&blob, "non-finite weights"));
    }
    Ok((params, manifest))
}
