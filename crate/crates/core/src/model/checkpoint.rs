//! `GCPN1` checkpoint container.
//!
//! Layout: magic `GCPN1`, a little-endian `u32` header length, a JSON header
//! `{config, step, meta, tensors: [name, ...]}`, then one `GCPB` tensor
//! record per listed name in header order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::net::GcpNet;
use crate::error::{Error, Result};
use crate::tensorio::{read_tensor, write_tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"GCPN1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<String>,
}

/// Host copy of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl HostTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(HostTensor {
            shape: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    /// Free-form run information (seeds, optimizer settings).
    pub meta: serde_json::Value,
    /// Model parameters by name, plus any extra state such as optimizer
    /// moments under their own prefixes.
    pub tensors: BTreeMap<String, HostTensor>,
}

impl Checkpoint {
    pub fn from_model(net: &GcpNet, step: u64, meta: serde_json::Value) -> Result<Self> {
        let tensors = net
            .params()
            .iter()
            .map(|(n, v)| Ok((n.clone(), HostTensor::from_tensor(v.as_tensor())?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            config: net.config().clone(),
            step,
            meta,
            tensors,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            let header = Header {
                config: self.config.clone(),
                step: self.step,
                meta: self.meta.clone(),
                tensors: self.tensors.keys().cloned().collect(),
            };
            let json = serde_json::to_vec(&header)?;
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_u32::<LittleEndian>(json.len() as u32)?;
            w.write_all(&json)?;
            for t in self.tensors.values() {
                write_tensor(&mut w, &t.shape, &t.data)?;
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| bad("file too short for a checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("expected magic GCPN1, found {:?}", String::from_utf8_lossy(&magic))));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
        header.config.validate()?;
        let mut tensors = BTreeMap::new();
        for name in header.tensors {
            let (shape, data) = read_tensor(&mut r, path)?;
            tensors.insert(name, HostTensor { shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            config: header.config,
            step: header.step,
            meta: header.meta,
            tensors,
        })
    }

    /// Rebuilds the network and loads every parameter. Fails if a model
    /// parameter is missing or has the wrong shape.
    pub fn to_model(&self, dtype: DType) -> Result<GcpNet> {
        let net = GcpNet::new(&self.config, dtype, 0)?;
        net.load_params(&self.tensors)?;
        Ok(net)
    }
}

impl GcpNet {
    /// Copies the named values into this network's parameters. Names that
    /// are not parameters are ignored.
    pub fn load_params(&self, tensors: &BTreeMap<String, HostTensor>) -> Result<()> {
        for (name, var) in self.params().iter() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.shape != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.shape,
                    var.dims()
                )));
            }
            self.params().assign(name, &t.to_tensor(self.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let net = GcpNet::new(&ModelConfig::tiny(), DType::F32, 7).unwrap();
        let ck = Checkpoint::from_model(&net, 12, serde_json::json!({"seed": 7})).unwrap();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let net2 = back.to_model(DType::F32).unwrap();
        for (n, v) in net.params().iter() {
            let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = net2.params().get(n).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "{n}");
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"GCPX1\0\0\0\0").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_parameter_is_an_error() {
        let net = GcpNet::new(&ModelConfig::tiny(), DType::F32, 1).unwrap();
        let mut ck = Checkpoint::from_model(&net, 0, serde_json::Value::Null).unwrap();
        ck.tensors.remove("intra.m0.weight");
        assert!(ck.to_model(DType::F32).is_err());
    }
}
