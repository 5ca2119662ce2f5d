//! Canonical byte encoding used for MACs and traffic accounting: a 4-byte
//! big-endian message tag, then length-prefixed fields.

use num_bigint::BigUint;

use super::ProtocolError;

pub const TAG_UPLOAD: u32 = 0x4643_0001;
pub const TAG_CSP_REQUEST: u32 = 0x4643_0002;
pub const TAG_CSP_OUTPUT: u32 = 0x4643_0003;
pub const TAG_DOWNLOAD: u32 = 0x4643_0004;

pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(tag: u32) -> Self {
        Self { buf: tag.to_be_bytes().to_vec() }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("sequence longer than u32::MAX"))
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.len(b.len());
        self.buf.extend_from_slice(b);
        self
    }

    /// 4-byte length, then `v` big-endian, left-padded to `width` bytes.
    pub fn biguint(&mut self, v: &BigUint, width: usize) -> &mut Self {
        let raw = v.to_bytes_be();
        assert!(raw.len() <= width, "integer wider than its declared field");
        self.len(width);
        self.buf.resize(self.buf.len() + width - raw.len(), 0);
        self.buf.extend_from_slice(&raw);
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

pub struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8], tag: u32) -> Result<Self, ProtocolError> {
        let mut d = Self { bytes, pos: 0 };
        let found = d.u32()?;
        if found != tag {
            return Err(ProtocolError::Wire { offset: 0, message: format!("tag {found:#x}, expected {tag:#x}") });
        }
        Ok(d)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            ProtocolError::Wire { offset: self.pos, message: format!("need {n} more bytes") },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, ProtocolError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, ProtocolError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_be_bytes(a))
    }

    pub fn len(&mut self) -> Result<usize, ProtocolError> {
        Ok(self.u32()? as usize)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], ProtocolError> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn biguint(&mut self, width: usize) -> Result<BigUint, ProtocolError> {
        let at = self.pos;
        let b = self.bytes()?;
        if b.len() != width {
            return Err(ProtocolError::Wire {
                offset: at,
                message: format!("integer field of {} bytes, expected {width}", b.len()),
            });
        }
        Ok(BigUint::from_bytes_be(b))
    }

    pub fn finish(self) -> Result<(), ProtocolError> {
        if self.pos != self.bytes.len() {
            return Err(ProtocolError::Wire {
                offset: self.pos,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Encoded size of one ciphertext field: length prefix plus fixed width.
pub fn ciphertext_size(width: usize) -> usize {
    4 + width
}
