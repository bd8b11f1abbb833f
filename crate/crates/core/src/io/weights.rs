//! `CANW` weight containers and training checkpoints.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "CANW" | version u16 | count u32
//! count x { name_len u16 | name utf-8 | dtype u8 (0 = f32) | rank u8 | dims u32 x rank | payload f32 x numel }
//! crc32 u32 over every preceding byte
//! ```

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::model::{CanModel, ModelConfig};
use crate::nn::ParamStore;
use crate::optim::Sgd;
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"CANW";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CANC";

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Splits off and verifies the CRC trailer.
fn checked_body(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(body)
}

fn with_crc(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serializes named tensors in the given order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(4);
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::invalid(format!("extent of `{name}` exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(4 * t.numel());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(with_crc(out))
}

/// Parses a container. The structure is walked before the checksum is
/// compared, so a short stream reports truncation rather than a CRC error.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(format_err(0, "bad magic, expected CANW"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported container version {version}")));
    }
    let count = r.u32()? as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos();
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err(at + 2, "tensor name is not utf-8"))?
            .to_string();
        let at = r.pos();
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(format_err(at, format!("unknown dtype code {dtype} for `{name}`")));
        }
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(format_err(at + 1, format!("rank {rank} of `{name}` outside 1..=4")));
        }
        let mut dims = [1usize; 4];
        for d in &mut dims[4 - rank..] {
            *d = r.u32()? as usize;
        }
        let shape = Shape(dims);
        let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let payload_len = numel
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err(at, format!("extent of `{name}` overflows")))?;
        let payload = r.take(payload_len)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(Error::Weights {
                name,
                msg: "duplicate tensor name".into(),
            });
        }
        out.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.remaining() < 4 {
        return Err(Error::Truncated {
            offset: r.pos(),
            needed: 4,
            available: r.remaining(),
        });
    }
    if r.remaining() > 4 {
        return Err(format_err(
            r.pos(),
            format!("{} unexpected bytes before checksum", r.remaining() - 4),
        ));
    }
    checked_body(bytes)?;
    Ok(out)
}

/// Every stored tensor, buffers included, in name order.
pub fn save_store(store: &ParamStore<f32>) -> Result<Vec<u8>> {
    encode_tensors(store.iter().map(|(n, e)| (n, &e.tensor)))
}

/// Overwrites `store` from a container that must hold exactly its tensor set.
pub fn load_into(store: &mut ParamStore<f32>, bytes: &[u8]) -> Result<()> {
    let tensors = decode_tensors(bytes)?;
    let mut found = BTreeSet::new();
    for (name, t) in &tensors {
        let Some(dst) = store.get(name) else {
            return Err(Error::Weights {
                name: name.clone(),
                msg: "not a parameter of this model".into(),
            });
        };
        if dst.shape() != t.shape() {
            return Err(Error::Weights {
                name: name.clone(),
                msg: format!("stored shape {} but the model expects {}", t.shape(), dst.shape()),
            });
        }
        found.insert(name.as_str());
    }
    if let Some(missing) = store.names().find(|n| !found.contains(n)) {
        return Err(Error::Weights {
            name: missing.to_string(),
            msg: "missing from container".into(),
        });
    }
    for (name, t) in tensors {
        *store.get_mut(&name).expect("checked above") = t;
    }
    Ok(())
}

pub fn save_weights(model: &CanModel) -> Result<Vec<u8>> {
    save_store(&model.params)
}

/// Builds the network described by `config` and fills it from `bytes`.
pub fn load_weights(bytes: &[u8], config: &ModelConfig) -> Result<CanModel> {
    let mut model = CanModel::new(config.clone(), 0)?;
    load_into(&mut model.params, bytes)?;
    Ok(model)
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub iter: u64,
    pub params: ParamStore<f32>,
    pub optimizer: Sgd<f32>,
}

/// `"CANC" | version u16 | iter u64 | len u32 | weights | len u32 | velocities | crc32`,
/// where both blobs are complete `CANW` containers.
pub fn save_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let weights = save_store(&ck.params)?;
    let velocity = encode_tensors(ck.optimizer.velocity.iter().map(|(n, t)| (n.as_str(), t)))?;
    let mut out = Vec::with_capacity(weights.len() + velocity.len() + 26);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ck.iter.to_le_bytes());
    for blob in [&weights, &velocity] {
        let len = u32::try_from(blob.len()).map_err(|_| Error::invalid("checkpoint section exceeds 4 GiB"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(blob);
    }
    Ok(with_crc(out))
}

/// Restores a checkpoint for the network described by `config`; velocities
/// must name trainable parameters of matching shape.
pub fn load_checkpoint(bytes: &[u8], config: &ModelConfig) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(format_err(0, "bad magic, expected CANC"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let iter = r.u64()?;
    let len = r.u32()? as usize;
    let weights = r.take(len)?;
    let len = r.u32()? as usize;
    let velocity = r.take(len)?;
    if r.remaining() != 4 {
        return Err(if r.remaining() < 4 {
            Error::Truncated {
                offset: r.pos(),
                needed: 4,
                available: r.remaining(),
            }
        } else {
            format_err(r.pos(), "unexpected bytes before checksum")
        });
    }
    checked_body(bytes)?;
    let model = load_weights(weights, config)?;
    let mut optimizer = Sgd::new();
    for (name, t) in decode_tensors(velocity)? {
        match model.params.get(&name) {
            Some(p) if p.shape() == t.shape() && model.params.role(&name) == Some(crate::nn::Role::Trainable) => {
                optimizer.velocity.insert(name, t);
            }
            _ => {
                return Err(Error::Weights {
                    name,
                    msg: "velocity does not match a trainable parameter".into(),
                })
            }
        }
    }
    Ok(Checkpoint {
        iter,
        params: model.params,
        optimizer,
    })
}
