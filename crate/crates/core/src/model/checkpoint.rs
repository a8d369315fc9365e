//! Binary parameter files.
//!
//! Layout (little-endian): magic `DTNT`, `u32` version, `u32` tensor count;
//! per tensor `u32` name length, UTF-8 name, `u8` dtype (0 = f32), `u8`
//! rank, `u64` dims, raw element data; finally a CRC32 of every preceding
//! byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::dtnet::DtNetModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTNT";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

fn ckpt_err(tensor: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        tensor: tensor.to_owned(),
        reason: reason.into(),
    }
}

/// Serializes named tensors in the given order.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.push(4);
        for d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, tensor: &str, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ckpt_err(tensor, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, tensor: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, tensor, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, tensor: &str, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, tensor, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, tensor: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, tensor, what)?[0])
    }
}

/// Parses a checkpoint into named tensors, in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    const HEADER: &str = "<header>";
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, HEADER, "magic")? != MAGIC {
        return Err(ckpt_err(HEADER, "bad magic"));
    }
    let version = r.u32(HEADER, "version")?;
    if version != VERSION {
        return Err(ckpt_err(HEADER, format!("unsupported version {version}")));
    }
    let count = r.u32(HEADER, "tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let placeholder = format!("<tensor #{i}>");
        let len = r.u32(&placeholder, "name length")? as usize;
        let name = std::str::from_utf8(r.take(len, &placeholder, "name")?)
            .map_err(|_| ckpt_err(&placeholder, "name is not UTF-8"))?
            .to_owned();
        let dtype = r.u8(&name, "dtype")?;
        if dtype != DTYPE_F32 {
            return Err(ckpt_err(&name, format!("unsupported dtype {dtype}")));
        }
        let rank = r.u8(&name, "rank")? as usize;
        if rank > 4 {
            return Err(ckpt_err(&name, format!("rank {rank} exceeds 4")));
        }
        let mut dims = [1usize; 4];
        for slot in dims[4 - rank..].iter_mut() {
            *slot = usize::try_from(r.u64(&name, "dims")?)
                .map_err(|_| ckpt_err(&name, "dimension overflows"))?;
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| ckpt_err(&name, "element count overflows"))?;
        let raw = r.take(
            numel.checked_mul(4).ok_or_else(|| ckpt_err(&name, "size overflows"))?,
            &name,
            "data",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(dims, data)?));
    }
    const TRAILER: &str = "<trailer>";
    let body_end = r.pos;
    let stored = r.u32(TRAILER, "checksum")?;
    if r.pos != bytes.len() {
        return Err(ckpt_err(TRAILER, "trailing bytes after checksum"));
    }
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(ckpt_err(TRAILER, format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &DtNetModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_tensors(model.params.iter().map(|(k, p)| (k, &p.value)));
    fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint into the topology described by `config`. Every
/// parameter of the topology must appear exactly once with matching dims.
pub fn load_checkpoint(path: impl AsRef<Path>, config: ModelConfig) -> Result<DtNetModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ckpt_err("<file>", format!("{}: {e}", path.display())))?;
    let tensors = decode_tensors(&bytes)?;
    let mut model = DtNetModel::<f32>::new(config, 0)?;
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(ckpt_err(&name, "appears twice"));
        }
        let slot = model
            .params
            .get_mut(&name)
            .map_err(|_| ckpt_err(&name, "not part of the configured model"))?;
        if slot.dims() != t.dims() {
            return Err(ckpt_err(
                &name,
                format!("dims {:?} do not match manifest {:?}", t.dims(), slot.dims()),
            ));
        }
        *slot = t;
    }
    if let Some((missing, _)) = model.params.iter().find(|(k, _)| !seen.contains(*k)) {
        return Err(ckpt_err(missing, "missing from checkpoint"));
    }
    Ok(model)
}
