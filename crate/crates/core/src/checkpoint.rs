//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "CSLCKPT1"
//! version    u32
//! header     u32 length + JSON {model, task, iteration, optimizer, adam_step}
//! records    u32 count, then per record:
//!              u32 name length, name bytes, u8 kind, u8 frozen,
//!              u32 rank, u64 dims…, f64 values (row-major)
//! trailer    32-byte SHA-256 of everything above
//! ```
//!
//! Record kinds: 0 parameter, 1 buffer, 2 first moment, 3 second moment.
//! Records are written in kind order, then name order, so encoding is
//! deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamConfig, AdamW, Moments};
use crate::params::Param;

pub const MAGIC: &[u8; 8] = b"CSLCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamW,
    pub task: EpisodeSpec,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    task: EpisodeSpec,
    iteration: u64,
    optimizer: AdamConfig,
    adam_step: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Param = 0,
    Buffer = 1,
    FirstMoment = 2,
    SecondMoment = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Kind::Param,
            1 => Kind::Buffer,
            2 => Kind::FirstMoment,
            3 => Kind::SecondMoment,
            other => return Err(Error::checkpoint("record kind", format!("unknown kind {other}"))),
        })
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        let header = Header {
            model: self.model.config.clone(),
            task: self.task,
            iteration: self.iteration,
            optimizer: self.optimizer.config,
            adam_step: self.optimizer.step,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.write_u32::<LittleEndian>(json.len() as u32).unwrap();
        out.extend_from_slice(&json);

        let mut records: Vec<(Kind, &str, bool, &[usize], Vec<f64>)> = Vec::new();
        for (name, p) in self.model.params.iter() {
            records.push((Kind::Param, name, p.frozen, p.value.shape(), p.value.iter().copied().collect()));
        }
        for (name, b) in self.model.buffers.iter() {
            records.push((Kind::Buffer, name, false, std::slice::from_ref(&0), b.clone()));
        }
        for (name, st) in &self.optimizer.moments {
            records.push((Kind::FirstMoment, name, false, st.m.shape(), st.m.iter().copied().collect()));
        }
        for (name, st) in &self.optimizer.moments {
            records.push((Kind::SecondMoment, name, false, st.v.shape(), st.v.iter().copied().collect()));
        }
        out.write_u32::<LittleEndian>(records.len() as u32).unwrap();
        for (kind, name, frozen, dims, values) in records {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.push(kind as u8);
            out.push(u8::from(frozen));
            if kind == Kind::Buffer {
                out.write_u32::<LittleEndian>(1).unwrap();
                out.write_u64::<LittleEndian>(values.len() as u64).unwrap();
            } else {
                out.write_u32::<LittleEndian>(dims.len() as u32).unwrap();
                for &d in dims {
                    out.write_u64::<LittleEndian>(d as u64).unwrap();
                }
            }
            for v in values {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::checkpoint("length", format!("file is only {} bytes", bytes.len())));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::checkpoint("checksum", "SHA-256 trailer does not match contents"));
        }
        if &body[..MAGIC.len()] != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let mut cur = Cursor::new(&body[MAGIC.len()..]);
        let truncated = |field: &str| {
            let field = field.to_string();
            move |_: std::io::Error| Error::checkpoint(field, "unexpected end of data")
        };
        let version = cur.read_u32::<LittleEndian>().map_err(truncated("format_version"))?;
        if version != FORMAT_VERSION {
            return Err(Error::checkpoint(
                "format_version",
                format!("expected {FORMAT_VERSION}, found {version}"),
            ));
        }
        let hlen = cur.read_u32::<LittleEndian>().map_err(truncated("header"))? as usize;
        let mut hbytes = vec![0; hlen];
        cur.read_exact(&mut hbytes).map_err(truncated("header"))?;
        let header: Header =
            serde_json::from_slice(&hbytes).map_err(|e| Error::checkpoint("header", e.to_string()))?;

        let mut model = Model::new(header.model.clone(), 0)
            .map_err(|e| Error::checkpoint("header.model", e.to_string()))?;
        let mut moments_m: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut moments_v: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut seen_params = 0;
        let mut seen_buffers = 0;

        let count = cur.read_u32::<LittleEndian>().map_err(truncated("record count"))?;
        for _ in 0..count {
            let nlen = cur.read_u32::<LittleEndian>().map_err(truncated("record name"))? as usize;
            let mut nbytes = vec![0; nlen];
            cur.read_exact(&mut nbytes).map_err(truncated("record name"))?;
            let name = String::from_utf8(nbytes).map_err(|e| Error::checkpoint("record name", e.to_string()))?;
            let kind = Kind::from_byte(cur.read_u8().map_err(truncated(&name))?)?;
            let frozen = cur.read_u8().map_err(truncated(&name))? != 0;
            let rank = cur.read_u32::<LittleEndian>().map_err(truncated(&name))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(cur.read_u64::<LittleEndian>().map_err(truncated(&name))? as usize);
            }
            let len: usize = dims.iter().product();
            let remaining = body.len() - MAGIC.len() - cur.position() as usize;
            if len.saturating_mul(8) > remaining {
                return Err(Error::checkpoint(name, "unexpected end of data"));
            }
            let mut values = vec![0.0; len];
            cur.read_f64_into::<LittleEndian>(&mut values).map_err(truncated(&name))?;
            match kind {
                Kind::Param => {
                    let slot = model
                        .params
                        .get_mut(&name)
                        .ok_or_else(|| Error::checkpoint(&name, "parameter not in the model's manifest"))?;
                    if slot.value.shape() != dims.as_slice() {
                        return Err(Error::checkpoint(
                            &name,
                            format!("shape {dims:?} does not match manifest {:?}", slot.value.shape()),
                        ));
                    }
                    *slot = Param {
                        value: ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked"),
                        frozen,
                    };
                    seen_params += 1;
                }
                Kind::Buffer => {
                    let slot = model
                        .buffers
                        .get_mut(&name)
                        .ok_or_else(|| Error::checkpoint(&name, "buffer not in the model's manifest"))?;
                    if slot.len() != values.len() {
                        return Err(Error::checkpoint(
                            &name,
                            format!("width {} does not match manifest {}", values.len(), slot.len()),
                        ));
                    }
                    *slot = values;
                    seen_buffers += 1;
                }
                Kind::FirstMoment | Kind::SecondMoment => {
                    let shape = model
                        .params
                        .get(&name)
                        .ok_or_else(|| Error::checkpoint(&name, "optimizer state for an unknown parameter"))?
                        .value
                        .shape()
                        .to_vec();
                    if shape != dims {
                        return Err(Error::checkpoint(&name, format!("optimizer state shape {dims:?} vs {shape:?}")));
                    }
                    let t = ArrayD::from_shape_vec(IxDyn(&dims), values).expect("length checked");
                    if kind == Kind::FirstMoment {
                        moments_m.insert(name, t);
                    } else {
                        moments_v.insert(name, t);
                    }
                }
            }
        }
        if cur.position() as usize != body.len() - MAGIC.len() {
            return Err(Error::checkpoint("records", "trailing bytes after the last record"));
        }
        if seen_params != model.params.len() {
            return Err(Error::checkpoint(
                "parameters",
                format!("found {seen_params} of {} parameters", model.params.len()),
            ));
        }
        if seen_buffers != model.buffers.len() {
            return Err(Error::checkpoint(
                "buffers",
                format!("found {seen_buffers} of {} buffers", model.buffers.len()),
            ));
        }
        let mut moments = BTreeMap::new();
        for (name, m) in moments_m {
            let v = moments_v
                .remove(&name)
                .ok_or_else(|| Error::checkpoint(&name, "first moment without second moment"))?;
            moments.insert(name, Moments { m, v });
        }
        if let Some(name) = moments_v.keys().next() {
            return Err(Error::checkpoint(name, "second moment without first moment"));
        }
        Ok(Checkpoint {
            model,
            optimizer: AdamW {
                config: header.optimizer,
                step: header.adam_step,
                moments,
            },
            task: header.task,
            iteration: header.iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}
