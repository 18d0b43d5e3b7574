//! Soft segmentation maps: an ASCII header `SSEG 1 <H> <W> <L>\n` followed by
//! `H·W·L` little-endian f32 values, pixel-major with the label innermost.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::SoftSegmentation;

const MAX_HEADER: usize = 128;

pub fn encode_softmap(soft: &SoftSegmentation) -> Vec<u8> {
    let (h, w, l) = (soft.height, soft.width, soft.num_labels);
    let mut out = format!("SSEG 1 {h} {w} {l}\n").into_bytes();
    out.reserve(h * w * l * 4);
    for p in 0..h * w {
        for label in 0..l {
            out.extend_from_slice(&soft.prob(label, p).to_le_bytes());
        }
    }
    out
}

/// Parses a soft map. With `check_distribution`, also requires entries in
/// `[0,1]` and per-pixel sums within 1e-5 of 1.
pub fn decode_softmap(bytes: &[u8], check_distribution: bool) -> Result<SoftSegmentation> {
    let newline = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(0, "missing SSEG header line"))?;
    let header = std::str::from_utf8(&bytes[..newline]).map_err(|_| Error::format(0, "header is not ASCII"))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 5 || fields[0] != "SSEG" {
        return Err(Error::format(0, format!("bad header {header:?}, expected \"SSEG 1 <H> <W> <L>\"")));
    }
    if fields[1] != "1" {
        return Err(Error::format(5, format!("unsupported SSEG version {}", fields[1])));
    }
    let dim = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(0, format!("bad {name} {:?} in header", fields[i])))
    };
    let (h, w, l) = (dim(2, "height")?, dim(3, "width")?, dim(4, "label count")?);
    let start = newline + 1;
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(l))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::format(0, "dimensions overflow"))?;
    let actual = bytes.len() - start;
    if actual != expected {
        return Err(Error::format(
            start + actual.min(expected),
            format!("payload should be {expected} bytes, found {actual}"),
        ));
    }
    let plane = h * w;
    let mut data = vec![0.0f32; expected / 4];
    for (i, chunk) in bytes[start..].chunks_exact(4).enumerate() {
        let (p, label) = (i / l, i % l);
        data[label * plane + p] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    let soft = SoftSegmentation::new(l, h, w, data)?;
    if check_distribution {
        soft.validate(1e-5).map_err(|e| Error::format(start, e.to_string()))?;
    }
    Ok(soft)
}

pub fn write_softmap(path: impl AsRef<Path>, soft: &SoftSegmentation) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_softmap(soft)).map_err(|e| Error::io(path, e))
}

pub fn read_softmap(path: impl AsRef<Path>, check_distribution: bool) -> Result<SoftSegmentation> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_softmap(&bytes, check_distribution)
}
