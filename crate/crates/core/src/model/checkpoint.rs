//! Binary checkpoint container.
//!
//! Layout: magic `MGCK`, `u32` version, `u64` header length, a JSON header
//! (model config, normalizer, tensor index, free-form metadata), then every
//! tensor as little-endian `f64` in header order, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::data::Normalizer;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    normalizer: Normalizer,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            normalizer: self.normalizer,
            tensors: self
                .model
                .params()
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        w.write_u64::<LittleEndian>(json.len() as u64)?;
        w.write_all(&json)?;
        for (_, t) in self.model.params().iter() {
            for v in t.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
        let mut params = ParamStore::default();
        for entry in header.tensors {
            let mut data = vec![0.0; entry.rows * entry.cols];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| bad(format!("truncated tensor {}", entry.name)))?;
            let t = Array2::from_shape_vec((entry.rows, entry.cols), data).expect("sized buffer");
            params.insert(entry.name, t);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let model = Model::from_parts(header.config, params).map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            model,
            normalizer: header.normalizer,
            metadata: header.metadata,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Init, Variant};

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        for variant in Variant::ALL {
            let mut cfg = ModelConfig::new(5, variant);
            cfg.hidden = 4;
            cfg.memory_dim = 3;
            let ck = Checkpoint {
                model: Model::new(cfg, Init::Random(9)).unwrap(),
                normalizer: Normalizer { mean: 51.25, std: 9.5 },
                metadata: serde_json::json!({"epoch": 3}),
            };
            ck.save(&path).unwrap();
            assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"hello world").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));

        let ck = Checkpoint {
            model: Model::new(ModelConfig::new(3, Variant::Adaptive), Init::Zero).unwrap(),
            normalizer: Normalizer { mean: 0.0, std: 1.0 },
            metadata: serde_json::Value::Null,
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Format { .. })));
    }
}
