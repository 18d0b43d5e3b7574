//! Binary checkpoint format.
//!
//! ```text
//! "HSEG" | u32 version (=1) | u32 tensor count
//! per tensor: u16 name length | name (ASCII) | u8 rank | rank × u32 dims | f32 data
//! ```
//! All integers and floats are little-endian. The architecture is recovered
//! from tensor names and shapes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{HUNetCompound, Param, UNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(model: &HUNetCompound, mut out: W) -> std::io::Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(model.params().len() as u32).to_le_bytes())?;
    for Param { name, value } in model.params() {
        debug_assert!(name.is_ascii() && name.len() <= u16::MAX as usize);
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[value.shape().len() as u8])?;
        for &d in value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(value.numel() * 4);
        for v in value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &HUNetCompound, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<HUNetCompound> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.pos,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a checkpoint. Nothing is returned unless the whole file is valid.
pub fn read_checkpoint(bytes: &[u8]) -> Result<HUNetCompound> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"HSEG\"")));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("tensor count")? as usize;
    let body_start = cur.pos;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let start = cur.pos;
        let len = cur.u16("name length")? as usize;
        let name = cur.take(len, "name")?;
        if !name.is_ascii() || name.is_empty() {
            return Err(Error::format(start + 2, "tensor name must be nonempty ASCII"));
        }
        let name = String::from_utf8(name.to_vec()).expect("ASCII is UTF-8");
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(start, format!("tensor {name} shape {shape:?} overflows")))?;
        let raw = cur.take(numel.saturating_mul(4), &format!("data of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Param {
            name,
            value: Tensor::from_parts(shape, data),
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let arch_err = |msg: String| Error::format(body_start, format!("unrecognized architecture: {msg}"));
    let lnet = if params.iter().any(|p| p.name.starts_with("lnet.")) {
        Some(infer_config("lnet", &params).map_err(arch_err)?)
    } else {
        None
    };
    let cnet = infer_config("cnet", &params).map_err(arch_err)?;
    HUNetCompound::from_params(lnet, cnet, params).map_err(|e| arch_err(e.to_string()))
}

fn infer_config(prefix: &str, params: &[Param]) -> std::result::Result<UNetConfig, String> {
    let shape = |name: &str| -> std::result::Result<&[usize], String> {
        let full = format!("{prefix}.{name}");
        params
            .iter()
            .find(|p| p.name == full)
            .map(|p| p.value.shape())
            .ok_or_else(|| format!("missing tensor {full}"))
    };
    let adapter = shape("adapter.weight")?;
    let head = shape("head.weight")?;
    let first = shape("enc0.conv1.weight")?;
    let (&[base, in_channels, ..], &[out_channels, ..], &[_, _, kernel_size, _]) = (adapter, head, first) else {
        return Err(format!("{prefix} tensors have unexpected rank"));
    };
    let depth = (0..)
        .take_while(|level| shape(&format!("enc{level}.conv1.weight")).is_ok())
        .count();
    Ok(UNetConfig {
        depth,
        base_channels: base,
        in_channels,
        out_channels,
        kernel_size,
    })
}
