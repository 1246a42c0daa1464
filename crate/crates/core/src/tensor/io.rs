//! `KCT1` tensor serialization.
//!
//! Layout: magic `KCT1`, one byte of rank, `rank` little-endian `u32`
//! extents, then the row-major payload as little-endian `f64`.

use std::path::Path;

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KCT1";

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 8 * t.len());
    encode(t, &mut out);
    out
}

/// Little-endian reader that reports absolute offsets in its errors.
pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) base: usize,
    pub(crate) format: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], base: usize, format: &'static str) -> Self {
        Reader {
            bytes,
            pos: 0,
            base,
            format,
        }
    }

    pub(crate) fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.format,
                self.offset(),
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                self.format,
                at,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let at = self.offset();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.format, at, "length overflow"))?, what)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(self.format, at + 8 * i, "non-finite value"));
        }
        Ok(vals)
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.offset();
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(self.format, at, format!("{what} is not UTF-8")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.format,
                self.offset(),
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

/// Decodes one tensor from the front of `reader`, leaving trailing bytes.
pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(MAGIC)?;
    let at = r.offset();
    let rank = r.u8("rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(r.format, at, format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let at = r.offset();
        let d = r.u32("extent")? as usize;
        if d == 0 {
            return Err(Error::format(r.format, at, "zero extent"));
        }
        shape.push(d);
    }
    let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let len = len.ok_or_else(|| Error::format(r.format, at, "element count overflows"))?;
    let data = r.f64s(len, "payload")?;
    Ok(Tensor::from_parts(shape, data))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, 0, "KCT1");
    let t = decode_from(&mut r)?;
    r.finish()?;
    Ok(t)
}

pub fn save(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.0, -2.5]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"KCT1");
        assert_eq!(b[4], 2);
        assert_eq!(&b[5..9], &2u32.to_le_bytes());
        assert_eq!(&b[9..13], &1u32.to_le_bytes());
        assert_eq!(&b[13..21], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 13 + 16);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = to_bytes(&t);
        match from_bytes(&b[..b.len() - 3]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 9),
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut trailing = b;
        trailing.push(0);
        assert!(from_bytes(&trailing).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..5, 0..=4), seed in any::<u64>()) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|i| ((seed ^ i as u64) % 1000) as f64 / 7.0 - 50.0).collect();
            let t = Tensor::new(&shape, data).unwrap();
            prop_assert_eq!(from_bytes(&to_bytes(&t)).unwrap(), t);
        }
    }
}
