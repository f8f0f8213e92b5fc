//! Binary checkpoint format.
//!
//! ```text
//! "PLABCKPT" | u32 version | u32 header_len | header (key=value lines)
//! u32 tensor_count | tensors... | 32-byte SHA-256 of everything before it
//! tensor: u16 name_len | name | u8 dtype (0 = f32) | u8 ndim | u64 dims... | f32 LE data
//! ```
//!
//! All integers are little-endian. Encoder tensors are written in layout
//! order; any further tensors (task heads) follow.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelCheckpoint, ModelConfig, ParamLayout};
use crate::artifact::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PLABCKPT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape does not match data");
        Self {
            name: name.into(),
            shape,
            data,
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Result<Vec<u8>> {
    if ckpt.rng_provenance.contains('\n') {
        return Err(Error::invalid("rng provenance must be a single line"));
    }
    let mut header = String::new();
    for (k, v) in ckpt.config.to_key_values() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("rng_provenance={}\n", ckpt.rng_provenance));

    let mut out = Vec::with_capacity(ckpt.params.len() * 4 + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let count = ckpt.layout.entries().len() + ckpt.extra.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for e in ckpt.layout.entries() {
        put_tensor(&mut out, &e.name, &e.shape, &ckpt.params[e.range.clone()]);
    }
    for t in &ckpt.extra {
        if ckpt.layout.get(&t.name).is_some() {
            return Err(Error::invalid(format!("extra tensor {} shadows an encoder tensor", t.name)));
        }
        put_tensor(&mut out, &t.name, &t.shape, &t.data);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<NamedTensor> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?.to_string();
        if self.u8()? != DTYPE_F32 {
            return Err(corrupt(format!("{name}: unsupported dtype")));
        }
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(usize::try_from(self.u64()?).map_err(|_| corrupt("dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("{name}: element count overflow")))?;
        let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(NamedTensor { name, shape, data })
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| corrupt("header is not UTF-8"))?;

    let mut config = ModelConfig::desk();
    let mut seen = Vec::new();
    let mut rng_provenance = None;
    for line in header.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad header line {line:?}")))?;
        if k == "rng_provenance" {
            rng_provenance = Some(v.to_string());
        } else {
            config.set(k, v).map_err(|e| corrupt(e.to_string()))?;
            seen.push(k.to_string());
        }
    }
    let required = ModelConfig::desk().to_key_values();
    if let Some((k, _)) = required.iter().find(|(k, _)| !seen.iter().any(|s| s == k)) {
        return Err(corrupt(format!("header lacks {k}")));
    }
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let rng_provenance = rng_provenance.ok_or_else(|| corrupt("header lacks rng_provenance"))?;

    let layout = ParamLayout::new(&config);
    let count = r.u32()? as usize;
    if count < layout.entries().len() {
        return Err(corrupt(format!("{count} tensors, expected at least {}", layout.entries().len())));
    }
    let mut params = vec![0.0f32; layout.total()];
    for e in layout.entries() {
        let t = r.tensor()?;
        if t.name != e.name || t.shape != e.shape {
            return Err(corrupt(format!(
                "expected {} {:?}, found {} {:?}",
                e.name, e.shape, t.name, t.shape
            )));
        }
        params[e.range.clone()].copy_from_slice(&t.data);
    }
    let mut extra = Vec::new();
    for _ in layout.entries().len()..count {
        extra.push(r.tensor()?);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    Ok(ModelCheckpoint {
        config,
        layout,
        params,
        rng_provenance,
        extra,
    })
}

pub fn write_checkpoint(ckpt: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
