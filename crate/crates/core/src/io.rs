//! Little-endian binary container helpers shared by the record and
//! checkpoint formats.

use crate::error::{Error, Result};

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u16) -> Self {
        let mut w = Self { buf: magic.to_vec() };
        w.u16(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, data: &[f32]) {
        self.buf.reserve(data.len() * 4);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    /// `u32` length prefix followed by UTF-8 JSON.
    pub fn json(&mut self, v: &serde_json::Value) -> Result<()> {
        let s = serde_json::to_vec(v)?;
        self.u32(len_u32(s.len())?);
        self.bytes(&s);
        Ok(())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds u32")))
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, leaving the cursor after the header.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let v = r.u16()?;
        if v != version {
            return Err(Error::Version(v));
        }
        Ok(r)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated { needed: usize::MAX })?;
        if end > self.buf.len() {
            return Err(Error::Truncated { needed: end });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or(Error::Corrupt("element count overflows".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn json(&mut self) -> Result<serde_json::Value> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        serde_json::from_slice(bytes).map_err(|e| Error::Corrupt(format!("json trailer: {e}")))
    }

    /// Errors if bytes remain after the last field.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_checks() {
        let mut w = Writer::new(b"TEST", 1);
        w.u32(7);
        let bytes = w.finish();
        let mut r = Reader::open(&bytes, b"TEST", 1).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        r.finish().unwrap();
        assert!(matches!(Reader::open(&bytes, b"NOPE", 1), Err(Error::BadMagic { .. })));
        assert!(matches!(Reader::open(&bytes, b"TEST", 2), Err(Error::Version(1))));
        let mut r = Reader::open(&bytes[..8], b"TEST", 1).unwrap();
        assert!(matches!(r.u32(), Err(Error::Truncated { .. })));
    }
}
