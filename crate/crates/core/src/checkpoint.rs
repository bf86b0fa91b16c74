//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! - 8 bytes magic `DCGNCKPT`, `u32` format version;
//! - 32 bytes SHA-256 hash of the concept dictionary;
//! - `u64` length + UTF-8 JSON header (model config, dictionary, class
//!   names, patch grid, run metadata);
//! - `u32` tensor count, then per tensor: `u32` name length + UTF-8 name,
//!   `u32` rank, `rank × u64` dimensions, `f64` data.
//!
//! Tensors are the prototype bank (`bank.raw`), the co-occurrence prior
//! (`graph.prior`), the structural mask (`graph.mask`) and every parameter
//! in model order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{DataShape, DcgNet};
use crate::prototypes::PrototypeBank;
use crate::schema::ConceptDictionary;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DCGNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMeta {
    pub seed: u64,
    /// Epoch (1-based) whose parameters are stored; 0 = untrained.
    pub epoch: usize,
    pub val_diag_f1: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    schema: ConceptDictionary,
    class_names: Vec<String>,
    num_patches: usize,
    patch_dim: usize,
    meta: RunMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DcgNet,
    pub class_names: Vec<String>,
    pub meta: RunMeta,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let model = &self.model;
        let shape = model.data_shape();
        let header = Header {
            model: model.config().clone(),
            schema: model.dictionary().clone(),
            class_names: self.class_names.clone(),
            num_patches: shape.num_patches,
            patch_dim: shape.patch_dim,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&model.dictionary().schema_hash());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut tensors: Vec<(&str, &Tensor)> = vec![
            ("bank.raw", model.bank().raw()),
            ("graph.prior", model.graph.prior()),
            ("graph.mask", model.graph.mask()),
        ];
        tensors.extend(model.params().iter().map(|(_, p)| (p.name.as_str(), &p.tensor)));
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint. With `expected` set, a dictionary whose hash
    /// differs is refused.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ConceptDictionary>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.schema.schema_hash() != hash {
            return Err(Error::Checkpoint("stored schema hash does not match stored schema".into()));
        }
        if let Some(dict) = expected {
            if dict.schema_hash() != hash {
                return Err(Error::Schema("checkpoint was trained on a different concept schema".into()));
            }
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<usize>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut take = |name: &str| -> Result<Tensor> {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            Ok(tensors.remove(i).1)
        };
        let bank = PrototypeBank::from_raw(take("bank.raw")?)?;
        let prior = take("graph.prior")?;
        let mask = take("graph.mask")?;
        let shape = DataShape {
            num_classes: header.class_names.len(),
            num_patches: header.num_patches,
            patch_dim: header.patch_dim,
        };
        let mut model = DcgNet::with_bank(header.model, header.schema, shape, bank, prior, 0)?;
        if &mask != model.graph.mask() {
            return Err(Error::Checkpoint("stored structural mask does not match schema".into()));
        }
        let names: Vec<String> = model.params().iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let t = take(&name)?;
            let id = model.params().id(&name).expect("known name");
            let param = model.params_mut().get_mut(id);
            if param.tensor.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    param.tensor.shape()
                )));
            }
            param.tensor.data_mut().copy_from_slice(t.data());
        }
        if let Some((extra, _)) = tensors.first() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model,
            class_names: header.class_names,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected: Option<&ConceptDictionary>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
