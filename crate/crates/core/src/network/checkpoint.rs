//! Checkpoint container: plan text, named parameter tensors, optimizer state
//! and a SHA-256 trailer over everything before it.
//!
//! ```text
//! "UMCK" | u16 version | u64 meta_len | meta JSON
//! u32 n_params  | (u32 name_len | name | UMTN tensor)*
//! u32 n_buffers | (UMTN tensor)*
//! sha256[32]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::NetworkPlan;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{io, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"UMCK";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<E> {
    pub plan: NetworkPlan,
    pub params: ParamStore<E>,
    /// Optimizer momentum buffers, one per parameter.
    pub momentum: Vec<Vec<E>>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// Word position of the patch-sampling generator, so training resumes mid-stream.
    pub rng_word_pos: u128,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    plan: NetworkPlan,
    epoch: usize,
    seed: u64,
    rng_word_pos: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
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

    fn tensor<E: Element>(&mut self) -> Result<Tensor<E>> {
        let (t, used) = io::decode_prefix(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(t)
    }
}

impl<E: Element> Checkpoint<E> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = Meta {
            plan: self.plan.clone(),
            epoch: self.epoch,
            seed: self.seed,
            rng_word_pos: self.rng_word_pos.to_string(),
        };
        let meta = serde_json::to_vec(&meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&io::encode(t));
        }
        out.extend_from_slice(&(self.momentum.len() as u32).to_le_bytes());
        for m in &self.momentum {
            let t = Tensor::from_vec(&[m.len()], m.clone()).expect("nonempty buffer");
            out.extend_from_slice(&io::encode(&t));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic or too short)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body)[..] != trailer[..] {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("checkpoint meta: {e}")))?;
        meta.plan.validate()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            params.add(name, r.tensor()?);
        }
        let mut momentum = Vec::new();
        for _ in 0..r.u32()? {
            momentum.push(r.tensor::<E>()?.into_data());
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before checksum".into()));
        }
        let rng_word_pos = meta
            .rng_word_pos
            .parse()
            .map_err(|_| Error::Format("bad generator position".into()))?;
        Ok(Self {
            plan: meta.plan,
            params,
            momentum,
            epoch: meta.epoch,
            seed: meta.seed,
            rng_word_pos,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
