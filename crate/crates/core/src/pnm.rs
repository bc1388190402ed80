//! Binary PPM (P6) and PGM (P5) codec for slide rasters and label planes.
//!
//! The decoder is strict where it matters for safety — dimensions are
//! capped, payload length must match the header exactly, trailing bytes
//! are rejected — while accepting standard header freedoms (runs of
//! whitespace, `#` comments between fields).

use crate::error::{Error, Result};

/// Largest accepted edge; generous for slides (HIGH level of a 4096 base
/// is 4096) while keeping width*height*3 far from overflow.
pub const MAX_DIM: usize = 1 << 15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// Interleaved samples: 3 per pixel for P6, 1 for P5.
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) -> Result<()> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => return Ok(()),
                None => return Err(Error::Format("pnm: truncated header".into())),
            }
        }
    }

    fn read_uint(&mut self) -> Result<usize> {
        self.skip_space_and_comments()?;
        let start = self.pos;
        let mut value: usize = 0;
        while let Some(&b) = self.bytes.get(self.pos) {
            if !b.is_ascii_digit() {
                break;
            }
            value = value
                .checked_mul(10)
                .and_then(|v| v.checked_add((b - b'0') as usize))
                .ok_or_else(|| Error::Format("pnm: header value overflow".into()))?;
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format("pnm: expected integer in header".into()));
        }
        Ok(value)
    }
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Pnm> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "pnm: bad magic, expected {}",
            std::str::from_utf8(magic).unwrap()
        )));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.read_uint()?;
    let height = cur.read_uint()?;
    let maxval = cur.read_uint()?;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Format(format!("pnm: bad dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("pnm: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Format("pnm: missing separator before payload".into())),
    }
    let expect = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("pnm: size overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expect {
        return Err(Error::Format(format!(
            "pnm: payload truncated, expected {expect} bytes, got {}",
            payload.len()
        )));
    }
    if payload.len() > expect {
        return Err(Error::Format(format!(
            "pnm: {} trailing bytes after payload",
            payload.len() - expect
        )));
    }
    Ok(Pnm { width, height, data: payload.to_vec() })
}

/// Decode a binary RGB PPM (P6, maxval 255).
pub fn decode_ppm(bytes: &[u8]) -> Result<Pnm> {
    decode(bytes, b"P6", 3)
}

/// Decode a binary grayscale PGM (P5, maxval 255).
pub fn decode_pgm(bytes: &[u8]) -> Result<Pnm> {
    decode(bytes, b"P5", 1)
}

fn encode(magic: &str, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<Vec<u8>> {
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Domain(format!("pnm: bad dimensions {width}x{height}")));
    }
    if data.len() != width * height * channels {
        return Err(Error::Domain(format!(
            "pnm: data length {} does not match {width}x{height}x{channels}",
            data.len()
        )));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode("P6", width, height, 3, rgb)
}

pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode("P5", width, height, 1, gray)
}
