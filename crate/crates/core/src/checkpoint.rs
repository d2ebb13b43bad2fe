//! Checkpoints: a JSON manifest plus a sidecar of little-endian f64 parameters
//! (all weight matrices, then all biases, in layer order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NfqError, Result};
use crate::net::{LayerSpec, Network, OptimizerKind, OptimizerState};
use crate::qfunc::{ActionSet, Encoding, Normalizer, QFunction};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub kind: OptimizerKind,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub episode: usize,
    pub encoding: Encoding,
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub optimizer: OptimizerInfo,
    pub normalizer: Normalizer,
    pub action_set: ActionSet,
    pub action_bound: f64,
    pub param_count: usize,
    pub weights_file: String,
    pub weights_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_params(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

pub fn save(dir: &Path, qf: &QFunction, optimizer: &OptimizerState, episode: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| NfqError::io(dir, e))?;
    let bytes = encode_params(qf.net.params());
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        episode,
        encoding: qf.encoding,
        input_dim: qf.net.input_dim(),
        layers: qf.net.layers().to_vec(),
        optimizer: OptimizerInfo { kind: optimizer.kind(), step: optimizer.step_count() },
        normalizer: qf.normalizer.clone(),
        action_set: qf.action_set.clone(),
        action_bound: qf.action_bound,
        param_count: qf.net.param_count(),
        weights_file: WEIGHTS.into(),
        weights_sha256: hex(&Sha256::digest(&bytes)),
    };
    let wpath = dir.join(WEIGHTS);
    fs::write(&wpath, &bytes).map_err(|e| NfqError::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| NfqError::io(&mpath, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| NfqError::io(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| NfqError::Parse { path: mpath, line: e.line(), message: e.to_string() })
}

pub fn load(dir: &Path) -> Result<(QFunction, Manifest)> {
    let manifest = load_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NfqError::input(format!("unsupported checkpoint format {}", manifest.format_version)));
    }
    let wpath = dir.join(&manifest.weights_file);
    let bytes = fs::read(&wpath).map_err(|e| NfqError::io(&wpath, e))?;
    if bytes.len() != manifest.param_count * 8 {
        return Err(NfqError::shape(format!(
            "{} holds {} bytes, manifest declares {} parameters",
            wpath.display(),
            bytes.len(),
            manifest.param_count
        )));
    }
    if hex(&Sha256::digest(&bytes)) != manifest.weights_sha256 {
        return Err(NfqError::input(format!("{} does not match the manifest digest", wpath.display())));
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let net = Network::from_params(manifest.input_dim, &manifest.layers, params)?;
    let qf = QFunction::from_parts(
        manifest.encoding,
        net,
        manifest.normalizer.clone(),
        manifest.action_set.clone(),
        manifest.action_bound,
    )?;
    Ok((qf, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, WeightInit};

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut qf = QFunction::new(
            Encoding::ActionInInput,
            5,
            &[LayerSpec::new(7, Activation::Relu)],
            Activation::Sigmoid,
            ActionSet::symmetric(10.0).unwrap(),
            10.0,
            WeightInit::Glorot,
            9,
        )
        .unwrap();
        qf.normalizer.mean[1] = 0.25;
        let opt = OptimizerState::adam(qf.net.param_count(), 1e-3);
        save(dir.path(), &qf, &opt, 3).unwrap();
        let (back, manifest) = load(dir.path()).unwrap();
        assert_eq!(back, qf);
        assert_eq!(manifest.episode, 3);
        let bytes = fs::read(dir.path().join(WEIGHTS)).unwrap();
        assert_eq!(&bytes[..8], &qf.net.weights(0)[0].to_le_bytes());

        let mut corrupt = bytes.clone();
        corrupt[0] ^= 1;
        fs::write(dir.path().join(WEIGHTS), corrupt).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
