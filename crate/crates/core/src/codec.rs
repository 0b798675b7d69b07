//! Little-endian byte helpers shared by the CVTW and CVTF containers.
//!
//! Both containers end with a CRC32 of every preceding byte; the checksum is
//! verified before any field is parsed, so truncation surfaces as
//! [`Error::ChecksumMismatch`].

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4]) -> Self {
        Self {
            buf: magic.to_vec(),
        }
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

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and trailing checksum, returning a reader positioned
    /// after the magic.
    pub fn open(bytes: &'a [u8], magic: &'static str) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic.as_bytes() {
            return Err(Error::BadMagic { expected: magic });
        }
        if bytes.len() < 8 {
            return Err(Error::ChecksumMismatch {
                stored: 0,
                computed: crc32fast::hash(bytes),
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        Ok(Self { body, pos: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.body.len() - self.pos < n {
            return Err(Error::shape("container ends before declared payload"));
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
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

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::shape("payload overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::shape("payload overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::shape(format!("unsupported rank {rank}")));
        }
        (0..rank).map(|_| Ok(self.u32()? as usize)).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.body.len() {
            return Err(Error::shape(format!(
                "{} trailing bytes after payload",
                self.body.len() - self.pos
            )));
        }
        Ok(())
    }
}
