//! Single-file parameter checkpoints: a JSON manifest followed by raw
//! little-endian f32 tensors in manifest order.
//!
//! Layout: `MAPRLCK1`, manifest byte length as u64 LE, manifest JSON, tensor data.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::pipeline::EncoderPipeline;
use super::EncoderConfig;
use crate::autodiff::{Group, ParamStore, Stage};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"MAPRLCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub group: Group,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<Stage>,
    pub config: EncoderConfig,
    pub tensors: Vec<TensorSpec>,
}

impl Manifest {
    /// Scalar count obtained by walking the tensor shapes.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum()
    }
}

/// Serialises every parameter whose group passes `filter`.
pub fn write_checkpoint<T: Scalar>(
    store: &ParamStore<T>,
    stages: &[Stage],
    config: &EncoderConfig,
    filter: impl Fn(&Group) -> bool,
) -> Result<Vec<u8>> {
    let chosen: Vec<_> = store.entries().iter().filter(|e| filter(&e.group)).collect();
    let manifest = Manifest {
        stages: stages.to_vec(),
        config: config.clone(),
        tensors: chosen
            .iter()
            .map(|e| TensorSpec { name: e.name.clone(), group: e.group.clone(), shape: [e.value.nrows(), e.value.ncols()] })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * manifest.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in chosen {
        for x in e.value.iter() {
            out.extend_from_slice(&x.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

/// Encoder-stage parameters of a pipeline.
pub fn encoder_checkpoint<T: Scalar>(p: &EncoderPipeline<T>) -> Result<Vec<u8>> {
    write_checkpoint(&p.store, &p.stages, &p.config, Group::is_encoder)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(Manifest, Vec<Array2<f32>>)> {
    let bad = |m: &str| Error::format("checkpoint", 0, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    let mut data = &bytes[16 + len..];
    if data.len() != 4 * manifest.scalar_count() {
        return Err(bad("tensor data does not match the manifest"));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for spec in &manifest.tensors {
        let n = spec.shape[0] * spec.shape[1];
        let values: Vec<f32> =
            data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        data = &data[4 * n..];
        tensors.push(Array2::from_shape_vec((spec.shape[0], spec.shape[1]), values).expect("shape from manifest"));
    }
    Ok((manifest, tensors))
}

/// Copies checkpoint tensors into same-named parameters of `store`.
pub fn restore_checkpoint<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let (manifest, tensors) = read_checkpoint(bytes)?;
    let ids: Vec<_> = store.ids().collect();
    for (spec, tensor) in manifest.tensors.iter().zip(tensors) {
        let id = ids
            .iter()
            .copied()
            .find(|&id| store.entry(id).name == spec.name && store.entry(id).group == spec.group)
            .ok_or_else(|| Error::usage(format!("checkpoint tensor `{}` has no counterpart", spec.name)))?;
        if store.value(id).dim() != tensor.dim() {
            return Err(Error::usage(format!("checkpoint tensor `{}` has the wrong shape", spec.name)));
        }
        *store.value_mut(id) = tensor.mapv(<T as Scalar>::from_f32);
    }
    Ok(())
}
