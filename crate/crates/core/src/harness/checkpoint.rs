//! `SRNCKPT1` files: little-endian records of
//! `name_len: u32, name, rank: u32, extents: u64 * rank, f32 payload`,
//! followed by the CRC32 of every preceding byte.
//!
//! Configuration entries and the step counter travel as empty records named
//! `@config:<key>=<value>` and `@step:<n>`.

use std::fs;
use std::path::Path;

use super::config::Config;
use super::model::Model;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SRNCKPT1";
const CONFIG_PREFIX: &str = "@config:";
const STEP_PREFIX: &str = "@step:";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub params: ParamStore<f32>,
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend((e as u64).to_le_bytes());
    }
    for v in data {
        out.extend(v.to_le_bytes());
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &Config, step: u64) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            step,
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(&self.config.model, 0)?;
        for (name, t) in model.params.iter_mut() {
            let saved = self
                .params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if saved.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    saved.shape(),
                    t.shape()
                )));
            }
            *t = saved.clone();
        }
        if self.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (key, value) in self.config.entries() {
            put_record(&mut out, &format!("{CONFIG_PREFIX}{key}={value}"), &[0], &[]);
        }
        put_record(&mut out, &format!("{STEP_PREFIX}{}", self.step), &[0], &[]);
        for (name, t) in self.params.iter() {
            put_record(&mut out, name, t.shape(), t.data());
        }
        let crc = crc32fast::hash(&out);
        out.extend(crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("missing SRNCKPT1 magic".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let mut config = Config::default();
        let mut step = None;
        let mut params = ParamStore::new();
        while r.pos < body.len() {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let bytes_len = shape
                .iter()
                .try_fold(4usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` extents overflow")))?;
            let data: Vec<f32> = r
                .take(bytes_len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(entry) = name.strip_prefix(CONFIG_PREFIX) {
                let (key, value) = entry
                    .split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed config record `{name}`")))?;
                config.set(key, value)?;
            } else if let Some(n) = name.strip_prefix(STEP_PREFIX) {
                step = Some(
                    n.parse()
                        .map_err(|_| Error::Checkpoint(format!("bad step record `{name}`")))?,
                );
            } else {
                if params.contains(&name) {
                    return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
                }
                params.insert(name, Tensor::new(shape, data)?);
            }
        }
        Ok(Self {
            config,
            step: step.ok_or_else(|| Error::Checkpoint("missing step record".into()))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
