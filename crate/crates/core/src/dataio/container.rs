use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NADA";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum RecordKind {
    AttentionStack = 1,
    EmbeddingMatrix = 2,
    MlpCheckpoint = 3,
}

/// Reads the container preamble and returns the raw kind field.
pub fn read_kind<R: Read>(source: R) -> Result<u16> {
    let mut r = ByteReader::new(source);
    r.preamble()
}

/// Little-endian reader that turns short reads into [`Error::Truncated`].
pub(crate) struct ByteReader<R> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    fn fill(&mut self, buf: &mut [u8], what: &'static str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    return Err(Error::Truncated {
                        what,
                        expected: buf.len() as u64,
                        actual: got as u64,
                    })
                }
                Ok(n) => got += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Magic and version; returns the kind.
    pub fn preamble(&mut self) -> Result<u16> {
        let mut magic = [0u8; 4];
        self.fill(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = self.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        self.u16("record kind")
    }

    pub fn expect_kind(&mut self, kind: RecordKind) -> Result<()> {
        let found = self.preamble()?;
        if found != kind as u16 {
            return Err(Error::WrongKind {
                expected: kind as u16,
                found,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// u16 length prefix followed by UTF-8 bytes.
    pub fn string(&mut self, what: &'static str) -> Result<String> {
        let len = self.u16(what)? as usize;
        let mut buf = vec![0u8; len];
        self.fill(&mut buf, what)?;
        String::from_utf8(buf).map_err(|_| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{what} is not valid UTF-8"),
            ))
        })
    }

    fn payload_bytes(&mut self, count: usize, width: usize) -> Result<Vec<u8>> {
        let expected = (count as u64).saturating_mul(width as u64);
        let mut buf = Vec::new();
        (&mut self.inner).take(expected).read_to_end(&mut buf)?;
        if (buf.len() as u64) < expected {
            return Err(Error::Truncated {
                what: "payload",
                expected,
                actual: buf.len() as u64,
            });
        }
        Ok(buf)
    }

    pub fn f32_payload(&mut self, count: usize) -> Result<Vec<f32>> {
        let buf = self.payload_bytes(count, 4)?;
        buf.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(i))
                }
            })
            .collect()
    }

    pub fn f64_payload(&mut self, count: usize) -> Result<Vec<f64>> {
        let buf = self.payload_bytes(count, 8)?;
        buf.chunks_exact(8)
            .enumerate()
            .map(|(i, c)| {
                let v = f64::from_le_bytes(c.try_into().expect("chunk of 8"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(i))
                }
            })
            .collect()
    }
}

/// Little-endian writer that counts emitted bytes.
pub(crate) struct ByteWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> ByteWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }

    pub fn written(&self) -> u64 {
        self.written
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        self.written += b.len() as u64;
        Ok(())
    }

    pub fn preamble(&mut self, kind: RecordKind) -> Result<()> {
        self.bytes(MAGIC)?;
        self.u16(VERSION)?;
        self.u16(kind as u16)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u16(&mut self, v: u16) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    /// Callers validate `s.len() <= u16::MAX` beforehand.
    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u16(s.len() as u16)?;
        self.bytes(s.as_bytes())
    }

    pub fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len().min(1 << 16) * 4);
        for chunk in values.chunks(1 << 16) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.bytes(&buf)?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, values: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(values.len().min(1 << 15) * 8);
        for chunk in values.chunks(1 << 15) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.bytes(&buf)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

pub(crate) fn check_string_len(s: &str, what: &str) -> Result<(), String> {
    if s.len() > u16::MAX as usize {
        Err(format!("{what} longer than {} bytes", u16::MAX))
    } else {
        Ok(())
    }
}
