//! Little-endian binary checkpoint framing: a 4-byte magic, a format
//! version, then a sequence of fixed-width fields.

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    pub fn save(self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct Reader {
    data: Vec<u8>,
    pos: usize,
    what: &'static str,
}

impl Reader {
    pub fn open(path: &Path, magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(data, magic, version, what)
    }

    pub fn from_bytes(data: Vec<u8>, magic: &[u8; 4], version: u32, what: &'static str) -> Result<Self> {
        let mut r = Self { data, pos: 0, what };
        let m = r.take(4)?;
        if m != magic {
            return Err(Error::Checkpoint(format!("{what}: bad magic")));
        }
        let v = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if v != version {
            return Err(Error::Checkpoint(format!(
                "{what}: format version {v} is not supported (expected {version})"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.what)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{}: size overflow", self.what)))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.what)));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let what = self.what;
        let b = self.take(n)?.to_vec();
        String::from_utf8(b).map_err(|_| Error::Checkpoint(format!("{what}: invalid text field")))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Checkpoint(format!("{}: trailing bytes", self.what)));
        }
        Ok(())
    }
}
