//! `JCT1` tensor files: magic, `u32` rank, `rank` × `u32` dims, then the
//! values as little-endian `f64` in row-major order.

use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"JCT1";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
    pub what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                what: self.what,
                offset: self.pos,
                msg: format!("expected {n} more bytes, found {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            offset,
            msg: msg.into(),
        }
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        if self.take(4)? != TENSOR_MAGIC {
            return Err(self.fail(start, "bad tensor magic, expected JCT1"));
        }
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.fail(start + 4, format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| self.fail(start, "size overflow"))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| self.fail(start, e.to_string()))
    }
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    encode_tensor(t, &mut out);
    out
}

pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes, "tensor file");
    let t = r.tensor()?;
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after tensor payload"));
    }
    Ok(t)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    tensor_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let mut expected = b"JCT1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(tensor_from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = tensor_to_bytes(&t);
        let err = tensor_from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 12, .. }), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            tensor_from_bytes(&bad).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));
    }
}
