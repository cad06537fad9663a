//! Checkpoint directory layout:
//!
//! * `manifest.json`: spec, seed, epoch, metric snapshot and the ordered
//!   parameter list (name and shape).
//! * `params.bin`: every parameter in manifest order, flattened row-major,
//!   as little-endian `f64`.
//! * `basis.bin`: the fixed spectral basis (spectral models only).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Variant, VitClassifier};
use crate::error::{Error, Result};
use crate::spectra::{read_basis, write_basis};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(
    model: &VitClassifier,
    dir: &Path,
    seed: u64,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        spec: model.spec().clone(),
        seed,
        epoch,
        metrics,
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("manifest.json"))?), &manifest)?;
    let mut blob = BufWriter::new(File::create(dir.join("params.bin"))?);
    for (_, t) in model.params() {
        for v in t.data() {
            blob.write_all(&v.to_le_bytes())?;
        }
    }
    blob.flush()?;
    if let Some(basis) = model.basis() {
        let mut out = BufWriter::new(File::create(dir.join("basis.bin"))?);
        write_basis(basis, &mut out)?;
        out.flush()?;
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(VitClassifier, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let mut model = match manifest.spec.variant {
        Variant::Spectral => {
            let basis = read_basis(BufReader::new(File::open(dir.join("basis.bin"))?))?;
            VitClassifier::spectral(manifest.spec.clone(), basis, manifest.seed)?
        }
        Variant::Spatial => VitClassifier::spatial(manifest.spec.clone(), manifest.seed)?,
    };
    let layout: Vec<ParamEntry> =
        model.params().iter().map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape().to_vec() }).collect();
    if layout != manifest.params {
        return Err(Error::invalid("checkpoint parameter layout does not match its spec"));
    }
    let mut blob = Vec::new();
    BufReader::new(File::open(dir.join("params.bin"))?).read_to_end(&mut blob)?;
    let expected: usize = layout.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 8 {
        return Err(Error::invalid(format!("parameter blob holds {} bytes, expected {}", blob.len(), expected * 8)));
    }
    let mut values = blob.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    for t in model.params_mut() {
        for (dst, src) in t.data_mut().iter_mut().zip(&mut values) {
            *dst = src;
        }
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{build_fourier, BasisKind};

    #[test]
    fn round_trip_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec { n_tokens: 6, height: 8, width: 8, ..ModelSpec::spectral(BasisKind::Fourier) };
        let mut model = VitClassifier::spectral(spec, build_fourier(8, 8, 6).unwrap(), 9).unwrap();
        for (i, t) in model.params_mut().into_iter().enumerate() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01 * i as f64);
        }
        let mut metrics = BTreeMap::new();
        metrics.insert("train_loss".to_string(), 0.25);
        save_checkpoint(&model, dir.path(), 9, 42, metrics).unwrap();
        let (back, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.epoch, 42);
        assert_eq!(manifest.metrics["train_loss"], 0.25);
        let img: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).cos()).collect();
        assert_eq!(back.forward(&img).unwrap().to_bits(), model.forward(&img).unwrap().to_bits());
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec { n_tokens: 4, patch_size: 4, height: 8, width: 8, ..ModelSpec::spatial() };
        let model = VitClassifier::spatial(spec, 1).unwrap();
        save_checkpoint(&model, dir.path(), 1, 0, BTreeMap::new()).unwrap();
        let path = dir.path().join("params.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
