//! Checkpoint persistence: a JSON manifest (parameter names, shapes, byte
//! offsets, architecture hash, training metadata) followed by a flat
//! little-endian f32 payload. Loads verify the payload hash and refuse
//! architecture mismatches; nothing is kept on failure.

use crate::error::{Error, Result};
use crate::model::{hex_string, Cnn};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"CAACKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub regime: String,
    pub seed: u64,
    pub epochs: usize,
    pub clean_test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub arch_hash: String,
    pub num_classes: usize,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
    pub metadata: TrainMeta,
}

pub fn save_checkpoint(model: &Cnn, meta: &TrainMeta, path: &Path) -> Result<()> {
    let mut payload = Vec::new();
    let mut params = Vec::new();
    for (name, tensor) in model.named_params() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        arch_hash: model.arch_hash(),
        num_classes: model.num_classes,
        params,
        payload_sha256: hex_string(&Sha256::digest(&payload)),
        metadata: meta.clone(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Cnn, Manifest)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])?;
    let payload = &bytes[16 + mlen..];

    let expected: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>() * 4)
        .sum();
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, manifest implies {}",
            payload.len(),
            expected
        )));
    }
    if hex_string(&Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(Error::Checkpoint("payload hash mismatch".into()));
    }

    let mut model = blank_cnn(manifest.num_classes);
    {
        let mut named = model.named_params_mut();
        if named.len() != manifest.params.len() {
            return Err(Error::Checkpoint("parameter count mismatch".into()));
        }
        for (entry, (name, tensor)) in manifest.params.iter().zip(named.iter_mut()) {
            if entry.name != *name || entry.shape != tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?} for {}",
                    entry.name,
                    entry.shape,
                    tensor.shape(),
                    name
                )));
            }
            let count = tensor.numel();
            let start = entry.offset;
            if start + count * 4 > payload.len() {
                return Err(Error::Checkpoint(format!("offset overflow for {}", name)));
            }
            let data: Vec<f32> = payload[start..start + count * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("non-finite values in {}", name)));
            }
            **tensor = Tensor::from_vec(&entry.shape, data)?;
        }
    }
    if model.arch_hash() != manifest.arch_hash {
        return Err(Error::Checkpoint(format!(
            "architecture hash mismatch: checkpoint {}, expected {}",
            manifest.arch_hash,
            model.arch_hash()
        )));
    }
    Ok((model, manifest))
}

fn blank_cnn(num_classes: usize) -> Cnn {
    // Shapes only; every value is overwritten from the payload.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    use rand::SeedableRng;
    Cnn::init(num_classes, &mut rng)
}
