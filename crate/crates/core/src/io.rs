//! Little-endian binary helpers shared by the matrix, checkpoint and prompt
//! store formats, plus the CRC-64 used for record checksums and weight digests.

use std::io::{self, Read, Write};

use crate::error::{Result, SparcError};
use crate::linalg::Matrix;

pub const MATRIX_MAGIC: &[u8; 4] = b"SPMX";

const CRC64_POLY: u64 = 0xC96C_5795_D787_0F42; // CRC-64/XZ, reflected

const fn crc64_table() -> [u64; 256] {
    let mut table = [0u64; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u64;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ CRC64_POLY
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC64_TABLE: [u64; 256] = crc64_table();

/// Streaming CRC-64/XZ.
#[derive(Debug, Clone)]
pub struct Crc64 {
    state: u64,
}

impl Default for Crc64 {
    fn default() -> Self {
        Self::new()
    }
}

impl Crc64 {
    pub fn new() -> Self {
        Crc64 { state: !0 }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let mut crc = self.state;
        for &b in bytes {
            crc = CRC64_TABLE[((crc ^ b as u64) & 0xff) as usize] ^ (crc >> 8);
        }
        self.state = crc;
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.update(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        !self.state
    }
}

pub fn crc64(bytes: &[u8]) -> u64 {
    let mut c = Crc64::new();
    c.update(bytes);
    c.finish()
}

/// Append-only little-endian encoder.
#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.bytes(MATRIX_MAGIC);
        self.u32(m.rows() as u32);
        self.u32(m.cols() as u32);
        for v in m.data() {
            self.f64(*v);
        }
    }

    pub fn vector(&mut self, v: &[f64]) {
        self.matrix(&Matrix::row_vector(v));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice; every short read is a `Truncated` error.
#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn slice(&self, start: usize, end: usize) -> &'a [u8] {
        &self.buf[start..end]
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(SparcError::Truncated(what.to_string()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| SparcError::Format(format!("{what}: invalid UTF-8")))
    }

    pub fn matrix(&mut self, what: &str) -> Result<Matrix> {
        let magic = self.take(4, what)?;
        if magic != MATRIX_MAGIC {
            return Err(SparcError::Format(format!("{what}: missing SPMX magic")));
        }
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| SparcError::Format(format!("{what}: shape overflow")))?;
        if self.remaining() < n.saturating_mul(8) {
            return Err(SparcError::Truncated(what.to_string()));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64(what)?);
        }
        Matrix::new(rows, cols, data).map_err(|e| SparcError::Format(format!("{what}: {e}")))
    }

    pub fn vector(&mut self, what: &str) -> Result<Vec<f64>> {
        let m = self.matrix(what)?;
        if m.rows() != 1 && !m.data().is_empty() {
            return Err(SparcError::Format(format!("{what}: expected a row vector")));
        }
        Ok(m.into_data())
    }
}

/// Write a single matrix in the standalone SPMX format.
pub fn write_matrix<W: Write>(mut w: W, m: &Matrix) -> io::Result<()> {
    let mut enc = Encoder::new();
    enc.matrix(m);
    w.write_all(enc.as_slice())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Matrix> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut dec = Decoder::new(&buf);
    let m = dec.matrix("matrix")?;
    if dec.remaining() != 0 {
        return Err(SparcError::Format("trailing bytes after matrix".into()));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc64_check_value() {
        // Standard check value for CRC-64/XZ.
        assert_eq!(crc64(b"123456789"), 0x995D_C9BB_DF19_39FA);
    }

    #[test]
    fn spmx_layout() {
        let m = Matrix::new(1, 2, vec![1.0, -2.5]).unwrap();
        let mut bytes = Vec::new();
        write_matrix(&mut bytes, &m).unwrap();
        assert_eq!(&bytes[..4], b"SPMX");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 16);
        assert_eq!(read_matrix(&bytes[..]).unwrap(), m);
    }

    #[test]
    fn truncated_matrix_is_reported() {
        let m = Matrix::zeros(3, 3);
        let mut bytes = Vec::new();
        write_matrix(&mut bytes, &m).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(
            read_matrix(&bytes[..]),
            Err(SparcError::Truncated(_))
        ));
    }
}
