//! Versioned binary checkpoints: a JSON header (kind + model config)
//! followed by named parameter records with little-endian 64-bit float
//! data. Round-trips are bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::Array;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UnifiedModel};

const MAGIC: &[u8; 8] = b"UADCKPT1";

#[derive(serde::Serialize, serde::Deserialize)]
struct Header {
    kind: String,
    model: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub config: ModelConfig,
    pub params: BTreeMap<String, Array>,
}

impl Checkpoint {
    /// Captures the parameters whose names start with any of the prefixes
    /// (all parameters when `prefixes` is empty).
    pub fn capture(model: &UnifiedModel, kind: &str, prefixes: &[&str]) -> Self {
        let params = model
            .params
            .iter()
            .filter(|p| prefixes.is_empty() || prefixes.iter().any(|pre| p.name.starts_with(pre)))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        Self {
            kind: kind.to_string(),
            config: model.config.clone(),
            params,
        }
    }

    /// Captures exactly the named parameters.
    pub fn capture_names(model: &UnifiedModel, kind: &str, names: &BTreeSet<String>) -> Result<Self> {
        let mut params = BTreeMap::new();
        for name in names {
            params.insert(name.clone(), model.params.get(name)?.value.clone());
        }
        Ok(Self {
            kind: kind.to_string(),
            config: model.config.clone(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            model: self.config.clone(),
        })?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(header.len() as u32).to_le_bytes())?;
        file.write_all(&header)?;
        file.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in &self.params {
            let name_bytes = name.as_bytes();
            file.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            file.write_all(name_bytes)?;
            file.write_all(&[value.shape().len() as u8])?;
            for &d in value.shape() {
                file.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in value.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic (not a checkpoint or unsupported version)",
                path.display()
            )));
        }
        let header_len = read_u32(&mut file)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)?;

        let n_params = read_u32(&mut file)? as usize;
        let mut params = BTreeMap::new();
        for _ in 0..n_params {
            let name_len = read_u16(&mut file)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
            let mut ndim = [0u8; 1];
            file.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                shape.push(read_u32(&mut file)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                file.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(name, Array::new(shape, data)?);
        }
        Ok(Self {
            kind: header.kind,
            config: header.model,
            params,
        })
    }

    /// Writes the captured values into a model. Every parameter must
    /// already exist with a matching shape (create adapters and fusion
    /// blocks before loading their checkpoints).
    pub fn apply(&self, model: &mut UnifiedModel) -> Result<()> {
        for (name, value) in &self.params {
            let dst = model.params.value_mut(name).map_err(|_| {
                Error::Checkpoint(format!(
                    "checkpoint parameter {name} does not exist in the model"
                ))
            })?;
            if dst.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                    value.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(value.data());
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

/// SHA-256 over names, shapes and raw values of the selected parameters.
/// Used by the freeze audit to prove frozen parameters never moved.
pub fn registry_hash<F: Fn(&str) -> bool>(model: &UnifiedModel, select: F) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in model.params.iter() {
        if !select(&p.name) {
            continue;
        }
        hasher.update(p.name.as_bytes());
        hasher.update([0u8]);
        for &d in p.value.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> UnifiedModel {
        UnifiedModel::new(
            ModelConfig {
                d_model: 8,
                n_heads: 2,
                d_ff: 8,
                encoder_layers: 1,
                decoder_layers: 1,
                vocab_size: 10,
                n_class_labels: 2,
                max_positions: 8,
                adapter_dim: 2,
                d_input: 3,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = Checkpoint::capture(&m, "base", &[]);
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn values_roundtrip_bit_exactly() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::capture(&m, "base", &[]).save(&path).unwrap();

        let mut m2 = model();
        // perturb, then restore from the checkpoint
        for v in m2.params.value_mut("head/ctc/weight").unwrap().data_mut() {
            *v += 1.0;
        }
        Checkpoint::load(&path).unwrap().apply(&mut m2).unwrap();
        for (a, b) in m
            .params
            .iter()
            .zip(m2.params.iter())
        {
            assert_eq!(a.name, b.name);
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{}", a.name);
        }
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = Checkpoint::load(Path::new("/nonexistent/x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)));
    }

    #[test]
    fn apply_rejects_unknown_and_mismatched() {
        let m = model();
        let mut ckpt = Checkpoint::capture(&m, "base", &[]);
        ckpt.params.insert(
            "ghost/param".into(),
            Array::zeros(vec![2, 2]),
        );
        let mut m2 = model();
        assert!(matches!(ckpt.apply(&mut m2), Err(Error::Checkpoint(_))));

        let mut ckpt2 = Checkpoint::capture(&m, "base", &[]);
        *ckpt2.params.get_mut("head/ctc/bias").unwrap() = Array::zeros(vec![1, 3]);
        assert!(matches!(ckpt2.apply(&mut m2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn capture_prefix_selects_namespace() {
        let mut m = model();
        m.add_adapter("asr", 9).unwrap();
        let ckpt = Checkpoint::capture(&m, "adapter", &["adapter/asr/"]);
        assert!(!ckpt.params.is_empty());
        assert!(ckpt.params.keys().all(|k| k.starts_with("adapter/asr/")));
    }

    #[test]
    fn registry_hash_detects_single_bit_change() {
        let mut m = model();
        let h1 = registry_hash(&m, |n| n.starts_with("backbone/"));
        m.params.value_mut("backbone/out_proj/bias").unwrap().data_mut()[0] += 1e-300;
        let h2 = registry_hash(&m, |n| n.starts_with("backbone/"));
        assert_ne!(h1, h2);
        // untouched selection is unchanged
        let h3 = registry_hash(&m, |n| n.starts_with("head/"));
        m.params.value_mut("backbone/out_proj/bias").unwrap().data_mut()[0] += 1.0;
        let h4 = registry_hash(&m, |n| n.starts_with("head/"));
        assert_eq!(h3, h4);
    }
}
