//! Checkpoint persistence: raw f32 parameter blob + JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{arch, ModelHandle, TrainingMode};
use crate::error::{Error, Result};
use crate::rng::RngSeed;
use crate::scalar::Scalar;

/// Sidecar metadata stored next to the parameter blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch_id: String,
    pub params_id: String,
    pub num_classes: usize,
    pub taps: Vec<String>,
    pub training_mode: TrainingMode,
    pub clean_accuracy: f64,
    pub seed: u64,
    pub dataset_id: String,
    pub input_shape: [usize; 3],
    pub param_count: usize,
    pub blob_sha256: String,
}

fn blob_bytes(params: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    bytes
}

/// SHA-256 hex of the f32 parameter blob; the checkpoint identity.
pub fn params_hash<F: Scalar>(handle: &ModelHandle<F>) -> Result<String> {
    let net = handle
        .network()
        .ok_or_else(|| Error::Capability("ensembles have no single blob".into()))?;
    let params: Vec<f32> = net
        .export_params()
        .iter()
        .map(|v| v.to_f64_lossy() as f32)
        .collect();
    let digest = Sha256::digest(blob_bytes(&params));
    Ok(hex_string(&digest))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Persists a trained model as `{params_id}.bin` + `{params_id}.json`.
pub fn save<F: Scalar>(
    handle: &ModelHandle<F>,
    seed: RngSeed,
    dataset_id: &str,
    dir: &Path,
) -> Result<PathBuf> {
    let net = handle
        .network()
        .ok_or_else(|| Error::Capability("only single models are checkpointed".into()))?;
    fs::create_dir_all(dir)?;
    let params: Vec<f32> = net
        .export_params()
        .iter()
        .map(|v| v.to_f64_lossy() as f32)
        .collect();
    let bytes = blob_bytes(&params);
    let hash = hex_string(&Sha256::digest(&bytes));

    let meta = CheckpointMeta {
        arch_id: handle.arch_id().to_string(),
        params_id: handle.params_id().to_string(),
        num_classes: handle.num_classes(),
        taps: handle.taps().to_vec(),
        training_mode: handle.training_mode(),
        clean_accuracy: handle.clean_accuracy().unwrap_or(f64::NAN),
        seed: seed.0,
        dataset_id: dataset_id.to_string(),
        input_shape: [
            handle.input_shape().0,
            handle.input_shape().1,
            handle.input_shape().2,
        ],
        param_count: params.len(),
        blob_sha256: hash,
    };

    let bin_path = dir.join(format!("{}.bin", handle.params_id()));
    fs::write(&bin_path, &bytes)?;
    fs::write(
        dir.join(format!("{}.json", handle.params_id())),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(bin_path)
}

/// Reads the sidecar alone.
pub fn read_meta(dir: &Path, params_id: &str) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta =
        serde_json::from_slice(&fs::read(dir.join(format!("{params_id}.json")))?)?;
    Ok(meta)
}

/// Loads a checkpoint into a handle at any scalar precision.
pub fn load<F: Scalar>(dir: &Path, params_id: &str) -> Result<ModelHandle<F>> {
    let meta = read_meta(dir, params_id)?;
    let bytes = fs::read(dir.join(format!("{params_id}.bin")))?;
    if bytes.len() != meta.param_count * 4 {
        return Err(Error::Contract(format!(
            "parameter blob is {} bytes, sidecar says {} params",
            bytes.len(),
            meta.param_count
        )));
    }
    let hash = hex_string(&Sha256::digest(&bytes));
    if hash != meta.blob_sha256 {
        return Err(Error::Contract(format!(
            "checkpoint {params_id} blob hash mismatch"
        )));
    }
    let params: Vec<F> = bytes
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            F::from_f64_lossy(v as f64)
        })
        .collect();

    let mut net = arch::build_network::<F>(
        &meta.arch_id,
        (
            meta.input_shape[0],
            meta.input_shape[1],
            meta.input_shape[2],
        ),
        meta.num_classes,
        RngSeed(0),
    )?;
    net.import_params(&params)?;
    let mut handle =
        ModelHandle::from_network(&meta.arch_id, &meta.params_id, meta.training_mode, net);
    handle.set_checkpoint_hash(hash);
    if meta.clean_accuracy.is_finite() {
        handle.set_clean_accuracy(meta.clean_accuracy);
    }
    Ok(handle)
}

/// True if both sidecar and blob exist.
pub fn exists(dir: &Path, params_id: &str) -> bool {
    dir.join(format!("{params_id}.bin")).exists() && dir.join(format!("{params_id}.json")).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trips_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let net = arch::build_network::<f32>("plainnet", (3, 32, 32), 10, RngSeed(4)).unwrap();
        let mut handle =
            ModelHandle::from_network("plainnet", "plainnet-normal-s4", TrainingMode::Normal, net);
        handle.set_clean_accuracy(0.91);
        save(&handle, RngSeed(4), "testdata", dir.path()).unwrap();

        let loaded: ModelHandle<f32> = load(dir.path(), "plainnet-normal-s4").unwrap();
        assert_eq!(
            loaded.network().unwrap().export_params(),
            handle.network().unwrap().export_params()
        );
        assert_eq!(loaded.taps(), handle.taps());
        assert_eq!(loaded.clean_accuracy(), Some(0.91));
        assert_eq!(
            loaded.checkpoint_hash().unwrap(),
            params_hash(&handle).unwrap()
        );
    }
}
