//! Little-endian binary container shared by index and checkpoint files:
//! 4-byte magic, `u32` format version, payload, trailing CRC32 of every
//! preceding byte.

use crate::error::{Error, Result};

pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// `u16` byte length followed by UTF-8 bytes.
    pub fn short_str(&mut self, field: &'static str, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::Format {
            field,
            detail: format!("{} bytes do not fit a u16 length", s.len()),
        })?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }

    /// `u32` byte length followed by raw bytes.
    pub fn blob(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.buf.extend_from_slice(bytes);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    /// Validates magic, version and checksum, in that order, and positions
    /// the cursor at the start of the payload.
    pub fn open(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::Format {
                field: "magic",
                detail: format!(
                    "expected {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    String::from_utf8_lossy(&bytes[..bytes.len().min(4)])
                ),
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Format {
                field: "header",
                detail: format!("file truncated at {} bytes", bytes.len()),
            });
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::Version {
                found,
                expected: version,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(Self { buf: body, pos: 8 })
    }

    fn take(&mut self, field: &'static str, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Format {
                field,
                detail: format!("needs {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            });
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(field, 2)?.try_into().expect("2 bytes")))
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(field, 4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(field, 8)?.try_into().expect("8 bytes")))
    }

    pub fn f32s(&mut self, field: &'static str, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(field, n.checked_mul(4).ok_or_else(|| overflow(field))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, field: &'static str, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(field, n.checked_mul(8).ok_or_else(|| overflow(field))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn short_str(&mut self, field: &'static str) -> Result<String> {
        let len = self.u16(field)? as usize;
        let bytes = self.take(field, len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Format {
            field,
            detail: e.to_string(),
        })
    }

    pub fn blob(&mut self, field: &'static str) -> Result<&'a [u8]> {
        let len = self.u32(field)? as usize;
        self.take(field, len)
    }

    /// Fails if payload bytes remain unread.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                field: "trailer",
                detail: format!("{} unread bytes before checksum", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn overflow(field: &'static str) -> Error {
    Error::Format {
        field,
        detail: "length overflows".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut e = Encoder::new(b"TST1", 3);
        e.u16(7);
        e.short_str("id", "héllo").unwrap();
        e.f32s([1.5, -2.0]);
        e.f64s([0.1]);
        e.finish()
    }

    #[test]
    fn round_trip() {
        let bytes = sample();
        let mut d = Decoder::open(&bytes, b"TST1", 3).unwrap();
        assert_eq!(d.u16("a").unwrap(), 7);
        assert_eq!(d.short_str("id").unwrap(), "héllo");
        assert_eq!(d.f32s("x", 2).unwrap(), [1.5, -2.0]);
        assert_eq!(d.f64s("y", 1).unwrap(), [0.1]);
        d.finish().unwrap();
    }

    #[test]
    fn failures_name_the_field() {
        let bytes = sample();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Decoder::open(&bad, b"TST1", 3), Err(Error::Format { field: "magic", .. })));
        assert!(matches!(Decoder::open(&bytes, b"TST1", 4), Err(Error::Version { found: 3, expected: 4 })));
        let mut flipped = bytes.clone();
        flipped[10] ^= 1;
        assert!(matches!(Decoder::open(&flipped, b"TST1", 3), Err(Error::Checksum { .. })));
        assert!(matches!(Decoder::open(&bytes[..6], b"TST1", 3), Err(Error::Format { field: "header", .. })));

        let mut d = Decoder::open(&bytes, b"TST1", 3).unwrap();
        d.u16("a").unwrap();
        d.short_str("id").unwrap();
        assert!(matches!(d.f32s("frames", 10), Err(Error::Format { field: "frames", .. })));
    }
}
