//! Versioned binary checkpoints.
//!
//! Layout: the 4-byte magic `LSCK`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor as
//! little-endian `f32`: parameters first, then the Adam first and second
//! moments in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::features::MemoryBank;
use crate::nn::{Adam, AdamConfig, Param, UNet};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: UNet,
    pub optimizer: Adam,
    pub bank: MemoryBank,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: usize,
    config: TrainConfig,
    tensors: Vec<TensorMeta>,
    adam_config: AdamConfig,
    adam_step: u64,
    bank: MemoryBank,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let params = self.model.params();
        let header = Header {
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            tensors: params
                .iter()
                .map(|p| TensorMeta {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                })
                .collect(),
            adam_config: self.optimizer.config,
            adam_step: self.optimizer.step,
            bank: self.bank.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
        let io = |e| corrupt(format!("write failed: {e}"));
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let tensors = params
            .iter()
            .map(|p| &p.value)
            .chain(&self.optimizer.m)
            .chain(&self.optimizer.v);
        for t in tensors {
            for &x in t {
                w.write_f32::<LittleEndian>(x).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| corrupt(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("header: {e}")))?;

        let mut read_tensor = |n: usize| -> Result<Vec<f32>> {
            let mut v = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut v).map_err(io)?;
            Ok(v)
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape.iter().product();
            params.push(Param {
                name: t.name.clone(),
                shape: t.shape.clone(),
                value: read_tensor(n)?,
            });
        }
        let sizes: Vec<usize> = params.iter().map(|p| p.value.len()).collect();
        let m = sizes.iter().map(|&n| read_tensor(n)).collect::<Result<Vec<_>>>()?;
        let v = sizes.iter().map(|&n| read_tensor(n)).collect::<Result<Vec<_>>>()?;
        let model = UNet::from_params(header.config.backbone.clone(), params)?;
        Ok(Self {
            config: header.config,
            model,
            optimizer: Adam {
                config: header.adam_config,
                step: header.adam_step,
                m,
                v,
            },
            bank: header.bank,
            epoch: header.epoch,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}
