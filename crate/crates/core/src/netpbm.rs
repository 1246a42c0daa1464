//! Binary 8-bit PGM (`P5`) and PPM (`P6`).

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    /// Row-major, channels interleaved.
    pub pixels: Vec<u8>,
}

impl Netpbm {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 1, pixels)
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::checked(width, height, 3, pixels)
    }

    fn checked(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height * channels {
            return Err(Error::invalid(
                "netpbm",
                format!("{width}×{height}×{channels} image with {} bytes", pixels.len()),
            ));
        }
        Ok(Netpbm {
            width,
            height,
            channels,
            maxval: 255,
            pixels,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const F: &str = "netpbm";
        let mut pos = 0;
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(Error::format(F, 0, "expected P5 or P6 magic")),
        };
        pos += 2;
        let mut fields = [0usize; 3];
        for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
            // Whitespace and `#` comments separate header fields.
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
                pos += 1;
            }
            fields[i] = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(F, start, format!("missing {name}")))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(Error::format(F, pos, "zero image dimension"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(Error::format(F, pos, format!("maxval {maxval} is not an 8-bit range")));
        }
        if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
            return Err(Error::format(F, pos, "header must end in one whitespace byte"));
        }
        pos += 1;
        let n = width * height * channels;
        let payload = &bytes[pos..];
        if payload.len() != n {
            return Err(Error::format(
                F,
                pos,
                format!("expected {n} payload bytes, found {}", payload.len()),
            ));
        }
        if let Some(i) = payload.iter().position(|&b| b as usize > maxval) {
            return Err(Error::format(F, pos + i, format!("sample above maxval {maxval}")));
        }
        Ok(Netpbm {
            width,
            height,
            channels,
            maxval: maxval as u16,
            pixels: payload.to_vec(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Maps `[0, 1]` to a byte, rounding to nearest.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        let g = Netpbm::gray(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let b = g.to_bytes();
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(Netpbm::from_bytes(&b).unwrap(), g);
        let c = Netpbm::rgb(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(Netpbm::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn comments_and_small_maxval() {
        let b = b"P5 # made by hand\n2 1\n# range\n3\n\x00\x03";
        let img = Netpbm::from_bytes(b).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (2, 1, 3));
        assert_eq!(img.pixels, vec![0, 3]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(Netpbm::from_bytes(b"P2\n1 1\n255\n0"), Err(Error::Format { offset: 0, .. })));
        assert!(Netpbm::from_bytes(b"P5\n2 2\n255\n\x00").is_err());
        assert!(Netpbm::from_bytes(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(Netpbm::from_bytes(b"P5\n1 1\n3\n\x09").is_err());
        assert!(Netpbm::from_bytes(b"P5\n1\n").is_err());
        assert!(Netpbm::gray(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn byte_rounding() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(2.0), 255);
    }
}
