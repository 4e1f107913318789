//! Binary PGM (P5) and PPM (P6) with 16-bit big-endian samples.
//!
//! Writing always uses maxval 65535. Reading also accepts 8-bit files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GroundTruthMask, Image};

const MAX16: f64 = 65535.0;

pub fn encode(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n65535\n", img.width(), img.height()).into_bytes();
    out.reserve(img.data().len() * 2);
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * MAX16).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// Grey-level dump of any per-pixel scalar field; values are clamped to [0,1].
pub fn encode_gray(height: usize, width: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * MAX16).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

/// 8-bit P5 with raw byte values.
pub fn encode_gray8(height: usize, width: usize, values: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    maxval: u32,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let err = |offset: usize, message: &str| Error::Parse {
        offset,
        message: message.to_string(),
    };
    if bytes.len() < 2 {
        return Err(err(0, "missing magic number"));
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(err(0, "expected P5 or P6")),
    };
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each field
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text.parse().map_err(|_| err(start, "number out of range"))?;
        if i < 2 && *field == 0 {
            return Err(err(start, "zero image dimension"));
        }
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(err(pos, "expected single whitespace after maxval")),
    }
    let maxval = fields[2];
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    Ok(Header {
        channels,
        width: fields[0] as usize,
        height: fields[1] as usize,
        maxval,
        data_offset: pos,
    })
}

fn samples(bytes: &[u8], header: &Header) -> Result<Vec<f64>> {
    let n = header.width * header.height * header.channels;
    let wide = header.maxval > 255;
    let need = n * if wide { 2 } else { 1 };
    let payload = &bytes[header.data_offset..];
    if payload.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    let max = header.maxval as f64;
    let out = if wide {
        payload[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / max).min(1.0))
            .collect()
    } else {
        payload[..need].iter().map(|&b| (b as f64 / max).min(1.0)).collect()
    };
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let header = parse_header(bytes)?;
    let data = samples(bytes, &header)?;
    Image::new(header.height, header.width, header.channels, data)
}

pub fn decode_mask(bytes: &[u8]) -> Result<GroundTruthMask> {
    let header = parse_header(bytes)?;
    if header.channels != 1 {
        return Err(Error::Parse {
            offset: 0,
            message: "masks must be single-channel P5".into(),
        });
    }
    let data = samples(bytes, &header)?;
    GroundTruthMask::new(
        header.height,
        header.width,
        data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
    )
}

pub fn encode_mask(mask: &GroundTruthMask) -> Vec<u8> {
    let values: Vec<f64> = mask.data().iter().map(|&b| b as f64).collect();
    encode_gray(mask.height(), mask.width(), &values)
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_image(img: &Image, path: &Path) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read_mask(path: &Path) -> Result<GroundTruthMask> {
    decode_mask(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_mask(mask: &GroundTruthMask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask(mask)).map_err(|e| Error::io(path, e))
}

pub fn write_gray(height: usize, width: usize, values: &[f64], path: &Path) -> Result<()> {
    std::fs::write(path, encode_gray(height, width, values)).map_err(|e| Error::io(path, e))
}
