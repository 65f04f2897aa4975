//! Little-endian readers and writers shared by the binary formats.

use std::path::Path;

use crate::error::{format_err, io_err, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    /// Append the CRC32 of everything written so far and store the file.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        std::fs::write(path, &self.buf).map_err(io_err(path))
    }
}

pub(crate) struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Check magic, version and trailing checksum, and position after the
    /// version field.
    pub fn open(path: &'a Path, buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if buf.len() < 12 {
            return Err(format_err(path, format!("truncated file ({} bytes)", buf.len())));
        }
        if &buf[..4] != magic {
            return Err(format_err(
                path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&buf[..4]), String::from_utf8_lossy(magic)),
            ));
        }
        let found = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(format_err(path, format!("unsupported version {found}, expected {version}")));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(format_err(path, "checksum mismatch (file is corrupted or truncated)"));
        }
        Ok(Self { path, buf: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(format_err(self.path, "truncated payload"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err(self.path, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| format_err(self.path, "text field is not UTF-8"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(
                self.path,
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}
