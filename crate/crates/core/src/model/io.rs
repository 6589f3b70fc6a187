//! Little-endian byte cursor helpers for the model containers.

use super::ModelError;
use crate::quantize::AffineParams;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn i8(&mut self, v: i8) {
        self.buf.push(v as u8);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn affine(&mut self, q: AffineParams) {
        self.f64(q.scale);
        self.i8(q.zero_point);
    }
    /// Writes `u16` dimensions; callers guarantee they fit.
    pub fn dims(&mut self, d: &[usize]) {
        for &v in d {
            self.u16(v as u16);
        }
    }
    /// Appends `u16 kind | u32 len | payload`.
    pub fn section(&mut self, kind: u16, payload: Writer) {
        self.u16(kind);
        self.u32(payload.buf.len() as u32);
        self.bytes(&payload.buf);
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    // absolute offset of `data[0]` in the file
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self {
            data,
            pos: 0,
            base: 0,
        }
    }

    pub fn pos(&self) -> usize {
        self.base + self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn corrupt(&self) -> ModelError {
        ModelError::CorruptSection(self.base + self.pos)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.data.len() - self.pos < n {
            return Err(self.corrupt());
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    pub fn i8(&mut self) -> Result<i8, ModelError> {
        Ok(self.take(1)?[0] as i8)
    }
    pub fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i32(&mut self) -> Result<i32, ModelError> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ModelError> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn affine(&mut self) -> Result<AffineParams, ModelError> {
        let at = self.pos();
        let scale = self.f64()?;
        let z = self.i8()?;
        AffineParams::new(scale, z).map_err(|_| ModelError::CorruptSection(at))
    }
    pub fn dims<const N: usize>(&mut self) -> Result<[usize; N], ModelError> {
        let mut out = [0usize; N];
        for v in out.iter_mut() {
            *v = self.u16()? as usize;
        }
        Ok(out)
    }
    /// Reads `u16 kind | u32 len` and returns the kind with a sub-reader over
    /// the payload.
    pub fn section(&mut self) -> Result<(u16, Reader<'a>), ModelError> {
        let kind = self.u16()?;
        let len = self.u32()? as usize;
        let base = self.pos();
        let payload = self.take(len)?;
        Ok((
            kind,
            Reader {
                data: payload,
                pos: 0,
                base,
            },
        ))
    }
}
