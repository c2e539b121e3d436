//! Binary checkpoint format (version 1). All integers little-endian.
//!
//! ```text
//! magic          8 bytes  "DMTDCKPT"
//! version        u32      1
//! header_len     u32
//! header         header_len bytes of UTF-8 TOML; must contain a [model] table
//! tensor_count   u32
//! tensor_count × {
//!     name_len   u16
//!     name       name_len bytes of UTF-8
//!     ndim       u8
//!     dims       ndim × u32
//!     data       prod(dims) × f32
//! }
//! checksum       u32      CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Model parameters come first, in [`super::parameter_names`] order.
//! Optimizer moments, when present, follow as `adamw.m.<name>` and
//! `adamw.v.<name>`.

use std::io::{Read, Write};
use std::path::Path;

use super::{parameter_names, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{AdamW, Tensor};

pub const MAGIC: &[u8; 8] = b"DMTDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, header: String) -> Self {
        let tensors = model
            .parameter_names()
            .iter()
            .cloned()
            .zip(model.parameters().iter().map(|p| {
                let mut t = p.clone();
                t.grad = None;
                t.requires_grad = false;
                t
            }))
            .collect();
        Checkpoint { header, tensors }
    }

    pub fn with_optimizer(mut self, model: &Model<f32>, opt: &AdamW<f32>) -> Self {
        for (which, moments) in [("m", &opt.first_moment), ("v", &opt.second_moment)] {
            for ((name, p), buf) in model.parameter_names().iter().zip(model.parameters()).zip(moments) {
                let t = Tensor::new(p.shape().to_vec(), buf.clone()).expect("moment shape matches");
                self.tensors.push((format!("adamw.{which}.{name}"), t));
            }
        }
        self
    }

    /// The `[model]` table of the header.
    pub fn model_config(&self) -> Result<ModelConfig> {
        #[derive(serde::Deserialize)]
        struct Only {
            model: ModelConfig,
        }
        let table: toml::Table = self
            .header
            .parse()
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let model = table
            .get("model")
            .cloned()
            .ok_or_else(|| Error::Format("checkpoint header has no [model] table".into()))?;
        let mut only = toml::Table::new();
        only.insert("model".into(), model);
        let parsed: Only = only
            .try_into()
            .map_err(|e| Error::Format(format!("checkpoint [model]: {e}")))?;
        Ok(parsed.model)
    }

    fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let config = self.model_config()?;
        let params = parameter_names(&config)
            .iter()
            .map(|n| {
                self.get(n)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_parameters(&config, params)
    }

    /// Restores optimizer moments into `opt`. Returns false when the
    /// checkpoint carries none.
    pub fn restore_optimizer(&self, model: &Model<f32>, opt: &mut AdamW<f32>) -> Result<bool> {
        let names = model.parameter_names();
        if self.get(&format!("adamw.m.{}", names[0])).is_none() {
            return Ok(false);
        }
        for (i, name) in names.iter().enumerate() {
            for (which, dst) in [("m", &mut opt.first_moment[i]), ("v", &mut opt.second_moment[i])] {
                let key = format!("adamw.{which}.{name}");
                let t = self
                    .get(&key)
                    .ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                if t.numel() != dst.len() {
                    return Err(Error::Format(format!("{key} has the wrong size")));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(true)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Checkpoint::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Header text holding just a `[model]` table.
pub fn model_header(config: &ModelConfig) -> Result<String> {
    #[derive(serde::Serialize)]
    struct Only<'a> {
        model: &'a ModelConfig,
    }
    toml::to_string(&Only { model: config }).map_err(|e| Error::Format(format!("checkpoint header: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_parameters() {
        let config = ModelConfig::tiny(16, 1, 1, 1);
        let m = Model::<f32>::init(&config).unwrap();
        let ck = Checkpoint::from_model(&m, model_header(&config).unwrap());
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.model_config().unwrap(), config);
        let m2 = back.model().unwrap();
        for (a, b) in m.parameters().iter().zip(m2.parameters()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let config = ModelConfig::tiny(16, 1, 1, 1);
        let m = Model::<f32>::init(&config).unwrap();
        let mut bytes = Checkpoint::from_model(&m, model_header(&config).unwrap()).encode().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(Checkpoint::decode(&bytes), Err(Error::Checksum { .. })));
        assert!(matches!(Checkpoint::decode(b"nonsense-bytes"), Err(Error::Format(_))));
    }

    #[test]
    fn header_without_model_table() {
        let ck = Checkpoint {
            header: "[train]\nsteps = 3\n".into(),
            tensors: vec![],
        };
        assert!(matches!(ck.model_config(), Err(Error::Format(_))));
    }
}
