//! Binary greymap ("P5", 8-bit) encoding.

use super::{GrayImage, Mask};
use crate::error::{Error, Result};

/// Round-half-up to the nearest of 256 levels.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v as f64 * 255.0 + 0.5).floor() as u8
}

pub fn dequantize(b: u8) -> f32 {
    b as f32 / 255.0
}

fn encode_bytes(h: usize, w: usize, pixels: impl Iterator<Item = u8>) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    out
}

pub fn encode(image: &GrayImage) -> Vec<u8> {
    encode_bytes(image.h, image.w, image.data.iter().map(|&v| quantize(v)))
}

/// Masks are written as 0 / 255.
pub fn encode_mask(mask: &Mask) -> Vec<u8> {
    encode_bytes(mask.h, mask.w, mask.data.iter().map(|&v| if v > 0 { 255 } else { 0 }))
}

struct Header {
    w: usize,
    h: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if !bytes.starts_with(b"P5") {
        return Err(Error::Parse("not a binary PGM (missing P5 magic)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Parse("truncated PGM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("expected a number in PGM header at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|e| Error::Parse(format!("PGM header field {text:?}: {e}")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("missing whitespace after PGM maxval".into())),
    }
    let [w, h, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    Ok(Header { w, h, maxval, offset: pos })
}

fn payload(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let header = parse_header(bytes)?;
    let want = header.w * header.h;
    let body = &bytes[header.offset..];
    if body.len() != want {
        return Err(Error::Parse(format!(
            "PGM payload has {} bytes, header declares {}x{} = {want}",
            body.len(),
            header.w,
            header.h
        )));
    }
    Ok((header, body))
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    let (header, body) = payload(bytes)?;
    let scale = header.maxval as f32;
    let data = if header.maxval == 255 {
        body.iter().map(|&b| dequantize(b)).collect()
    } else {
        body.iter().map(|&b| (b as f32 / scale).min(1.0)).collect()
    };
    GrayImage::new(header.h, header.w, data)
}

/// Accepts only 0 and maxval.
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let (header, body) = payload(bytes)?;
    let max = header.maxval as u8;
    let data = body
        .iter()
        .map(|&b| match b {
            0 => Ok(0),
            b if b == max => Ok(1),
            other => Err(Error::Parse(format!("mask pixel value {other} is neither 0 nor {max}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(header.h, header.w, data)
}
