//! Binary PGM ("P5", maxval 255) for images and label maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{GrayImage, LabelMap, NUM_LABELS};

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn skip_space_and_comments(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn read_number(bytes: &[u8], pos: usize, what: &str) -> Result<(usize, usize)> {
    let pos = skip_space_and_comments(bytes, pos);
    let end = bytes[pos..]
        .iter()
        .position(|b| !b.is_ascii_digit())
        .map_or(bytes.len(), |n| pos + n);
    if end == pos {
        return Err(Error::format(pos, format!("expected {what}")));
    }
    let text = std::str::from_utf8(&bytes[pos..end]).expect("digits are ASCII");
    let value = text
        .parse::<usize>()
        .map_err(|_| Error::format(pos, format!("{what} {text} out of range")))?;
    Ok((value, end))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::format(0, format!("expected binary PGM magic \"P5\", found {found:?}")));
    }
    let (width, pos) = read_number(bytes, 2, "width")?;
    let (height, pos) = read_number(bytes, pos, "height")?;
    let (maxval, pos) = read_number(bytes, pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::format(pos, format!("maxval must be 255, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("empty image {width}x{height}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(pos, "missing whitespace after maxval"));
    }
    let data_offset = pos + 1;
    let expected = width
        .checked_mul(height)
        .ok_or_else(|| Error::format(2, "image dimensions overflow"))?;
    let available = bytes.len() - data_offset;
    if available != expected {
        return Err(Error::format(
            data_offset + available.min(expected),
            format!("payload of {width}x{height} image should be {expected} bytes, found {available}"),
        ));
    }
    Ok(Header {
        width,
        height,
        data_offset,
    })
}

fn encode(width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<GrayImage> {
    let h = parse_header(bytes)?;
    let pixels = bytes[h.data_offset..].iter().map(|&b| b as f32 / 255.0).collect();
    GrayImage::new(h.width, h.height, pixels)
}

/// Maps `[0,1]` back to bytes with round-half-up; values outside are clamped.
pub fn quantize(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_image(image: &GrayImage) -> Vec<u8> {
    let payload: Vec<u8> = image.pixels.iter().map(|&v| quantize(v)).collect();
    encode(image.width, image.height, &payload)
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelMap> {
    let h = parse_header(bytes)?;
    let payload = &bytes[h.data_offset..];
    if let Some(i) = payload.iter().position(|&v| v as usize >= NUM_LABELS) {
        return Err(Error::format(
            h.data_offset + i,
            format!("pixel {i} has class {} (must be 0..=3)", payload[i]),
        ));
    }
    LabelMap::new(h.width, h.height, payload.to_vec())
}

pub fn encode_labels(labels: &LabelMap) -> Vec<u8> {
    encode(labels.width, labels.height, &labels.labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    with_path(path, decode_image(&read_file(path)?))
}

pub fn write_image(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_image(image)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    with_path(path, decode_labels(&read_file(path)?))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path, e))
}
