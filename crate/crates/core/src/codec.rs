//! Little-endian byte writer/reader shared by the model file and the wire
//! protocol. Arrays are written as a `u32` element count followed by the
//! elements; shapes always precede data.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
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

    pub fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }

    pub fn u32s(&mut self, values: &[usize]) {
        self.len_u32(values.len());
        for &v in values {
            self.len_u32(v);
        }
    }

    pub fn f64s(&mut self, values: &[f64]) {
        self.len_u32(values.len());
        for &v in values {
            self.f64(v);
        }
    }

    pub fn string(&mut self, s: &str) {
        self.len_u32(s.len());
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32s(t.shape());
        self.f64s(t.data());
    }

    pub fn matrix(&mut self, m: &Matrix) {
        self.len_u32(m.rows());
        self.len_u32(m.cols());
        self.f64s(m.data());
    }

    pub fn matrices(&mut self, ms: &[Matrix]) {
        self.len_u32(ms.len());
        for m in ms {
            self.matrix(m);
        }
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        let msg = format!("{msg} at byte {}", self.pos);
        if self.what == "model" {
            Error::ModelFormat(msg)
        } else {
            Error::Protocol(msg)
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated {} (wanted {n} bytes)", self.what)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(&self) -> Result<()> {
        if self.is_done() {
            Ok(())
        } else {
            Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn count(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        // Reject counts that cannot possibly fit in the remaining buffer.
        if n > self.buf.len() - self.pos {
            return Err(self.err(format!("count {n} exceeds remaining bytes")));
        }
        Ok(n)
    }

    pub fn u32s(&mut self) -> Result<Vec<usize>> {
        let n = self.count()?;
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.count()?;
        if n * 8 > self.buf.len() - self.pos {
            return Err(self.err("f64 array exceeds remaining bytes"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.count()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.u32s()?;
        let data = self.f64s()?;
        Tensor::new(shape, data).map_err(|e| self.err(e))
    }

    pub fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let data = self.f64s()?;
        Matrix::new(rows, cols, data).map_err(|e| self.err(e))
    }

    pub fn matrices(&mut self) -> Result<Vec<Matrix>> {
        let n = self.count()?;
        (0..n).map(|_| self.matrix()).collect()
    }
}
