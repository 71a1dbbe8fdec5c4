//! Parameter checkpoints: a JSON manifest of `(name, shape)` entries plus a
//! little-endian `f64` blob holding every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub tensors: Vec<ManifestEntry>,
}

pub const MANIFEST_FORMAT: &str = "pmp-checkpoint-v1";

pub fn encode(params: &[(String, &Tensor)]) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let tensors = params
        .iter()
        .map(|(name, t)| {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            }
        })
        .collect();
    (
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            dtype: "f64-le".to_string(),
            tensors,
        },
        blob,
    )
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if manifest.format != MANIFEST_FORMAT || manifest.dtype != "f64-le" {
        return Err(Error::invalid(format!(
            "unsupported checkpoint format {}/{}",
            manifest.format, manifest.dtype
        )));
    }
    let total: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if blob.len() != total * 8 {
        return Err(Error::invalid(format!(
            "checkpoint blob has {} bytes, manifest needs {}",
            blob.len(),
            total * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    manifest
        .tensors
        .iter()
        .map(|e| {
            let n = e.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            Tensor::new(e.shape.clone(), data).map(|t| (e.name.clone(), t))
        })
        .collect()
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn save(dir: &Path, stem: &str, params: &[(String, &Tensor)]) -> Result<()> {
    let (manifest, blob) = encode(params);
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?)
        .map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn load(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let raw = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&raw)?;
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    decode(&manifest, &blob)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn encode_decode_roundtrip(
            a in prop::collection::vec(-1e6f64..1e6, 6),
            b in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let ta = Tensor::matrix(2, 3, a).unwrap();
            let tb = Tensor::vector(b);
            let (m, blob) = encode(&[("a".into(), &ta), ("b".into(), &tb)]);
            let back = decode(&m, &blob).unwrap();
            prop_assert_eq!(&back[0].1, &ta);
            prop_assert_eq!(&back[1].1, &tb);
            prop_assert_eq!(&back[1].0, "b");
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        let (m, blob) = encode(&[("t".into(), &t)]);
        assert!(decode(&m, &blob[..12]).is_err());
    }
}
