//! Binary NetPBM: P5 (grayscale) and P6 (RGB), maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit raster, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("netpbm", detail)
}

/// Header tokens are separated by whitespace; `#` starts a comment that runs
/// to the end of the line. Exactly one whitespace byte follows the maxval.
fn header_token(buf: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match buf.get(*pos) {
            Some(b'#') => {
                while buf.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(bad("header ends early")),
        }
    }
    let start = *pos;
    while buf.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(bad(format!("expected a number at byte {start}")));
    }
    std::str::from_utf8(&buf[start..*pos]).unwrap().parse().map_err(|_| bad("number out of range"))
}

pub fn decode(buf: &[u8]) -> Result<Raster> {
    let channels = match buf.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("magic is not P5 or P6")),
    };
    let mut pos = 2;
    let width = header_token(buf, &mut pos)?;
    let height = header_token(buf, &mut pos)?;
    let maxval = header_token(buf, &mut pos)?;
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval} unsupported, only 255")));
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing separator after maxval"));
    }
    pos += 1;
    let len = width * height * channels;
    let payload = buf.get(pos..pos + len).ok_or_else(|| bad(format!("payload truncated: want {len} bytes")))?;
    Ok(Raster { width, height, channels, data: payload.to_vec() })
}

pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::arg(format!("netpbm holds 1 or 3 channels, not {c}"))),
    };
    if r.data.len() != r.width * r.height * r.channels {
        return Err(Error::arg("raster size does not match its dimensions"));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    Ok(out)
}

pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
    decode(&fs::read(path)?)
}

pub fn write(path: impl AsRef<Path>, r: &Raster) -> Result<()> {
    Ok(fs::write(path, encode(r)?)?)
}

impl Raster {
    /// `(H, W, C)` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.data.iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data).expect("raster size")
    }

    /// `(H, W, 1)` mask: bytes of 128 and above are foreground.
    pub fn to_mask(&self) -> Result<Tensor<f32>> {
        if self.channels != 1 {
            return Err(Error::arg("masks must be single-channel"));
        }
        let data = self.data.iter().map(|&b| if b >= 128 { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::new(vec![self.height, self.width, 1], data).expect("raster size"))
    }

    /// Quantizes an `(H, W, C)` tensor as `round(v * 255)`, clamped to `[0, 255]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let &[height, width, channels] = t.shape() else {
            return Err(Error::shape(format!("expected (H, W, C), got {:?}", t.shape())));
        };
        let data = t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Ok(Self { width, height, channels, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_exact() {
        let r = Raster { width: 3, height: 2, channels: 1, data: vec![0, 1, 2, 3, 4, 255] };
        let bytes = encode(&r).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
        assert_eq!(decode(&bytes).unwrap(), r);
    }

    #[test]
    fn comments_and_spacing() {
        let bytes = b"P6 # rgb\n# size\n1   1\n255 \x01\x02\x03";
        let r = decode(bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels, r.data.clone()), (1, 1, 3, vec![1, 2, 3]));
    }

    #[test]
    fn rejections() {
        assert!(decode(b"P2\n1 1\n255\n0").is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode(b"P5\n2").is_err());
    }

    #[test]
    fn mask_threshold() {
        let r = Raster { width: 4, height: 1, channels: 1, data: vec![0, 127, 128, 255] };
        assert_eq!(r.to_mask().unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
