//! Binary tensor container.
//!
//! ```text
//! magic    "FSKT"
//! version  u32 LE
//! count    u32 LE
//! count × { name_len u16 LE, name bytes, rank u8, rank × u32 LE extents, f32 LE payload }
//! ```

use std::fs;
use std::path::Path;

use sketchmotion_core::{DenoiserWeights, LoraAdapter, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSKT";
pub const VERSION: u32 = 1;

const LORA_A: &str = ".lora_a";
const LORA_B: &str = ".lora_b";

pub fn encode(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len())
        .map_err(|_| Error::format("checkpoint", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank =
            u8::try_from(t.rank()).map_err(|_| Error::format("checkpoint", "rank above 255"))?;
        out.push(rank);
        for &e in t.shape() {
            let e =
                u32::try_from(e).map_err(|_| Error::format("checkpoint", "extent above u32"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::format("checkpoint", format!("truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .map_err(|_| Error::Magic { found: [0; 4] })?
        .try_into()
        .expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::Magic { found: magic });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("checkpoint", format!("tensor name: {e}")))?
            .to_owned();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", "tensor too large"))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode(tensors)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&fs::read(path).map_err(Error::io(path))?)
}

pub fn save_weights(path: &Path, weights: &DenoiserWeights) -> Result<()> {
    save(path, weights.named())
}

pub fn load_weights(path: &Path) -> Result<DenoiserWeights> {
    Ok(DenoiserWeights::from_named(load(path)?)?)
}

pub fn adapter_tensors(adapters: &[LoraAdapter]) -> Vec<(String, Tensor)> {
    adapters
        .iter()
        .flat_map(|a| {
            [
                (format!("{}{LORA_A}", a.target()), a.a().clone()),
                (format!("{}{LORA_B}", a.target()), a.b().clone()),
            ]
        })
        .collect()
}

pub fn adapters_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<Vec<LoraAdapter>> {
    if tensors.len() % 2 != 0 {
        return Err(Error::format(
            "adapter file",
            "factors must come in A/B pairs",
        ));
    }
    let mut out = Vec::with_capacity(tensors.len() / 2);
    let mut it = tensors.into_iter();
    while let (Some((na, a)), Some((nb, b))) = (it.next(), it.next()) {
        let target = na
            .strip_suffix(LORA_A)
            .filter(|t| nb.strip_suffix(LORA_B) == Some(*t))
            .ok_or_else(|| {
                Error::format("adapter file", format!("unpaired factors `{na}` / `{nb}`"))
            })?;
        out.push(LoraAdapter::new(target, a, b)?);
    }
    Ok(out)
}

pub fn save_adapters(path: &Path, adapters: &[LoraAdapter]) -> Result<()> {
    save(path, &adapter_tensors(adapters))
}

pub fn load_adapters(path: &Path) -> Result<Vec<LoraAdapter>> {
    adapters_from_tensors(load(path)?)
}
