//! Tensor files.
//!
//! Binary tensor (little-endian):
//!
//! ```text
//! b"RVTF" | u32 version=1 | u32 ndim | ndim x u64 dims | prod(dims) x f64 values (row-major)
//! ```
//!
//! Binary quantized tensor (little-endian):
//!
//! ```text
//! b"RVQ8" | u32 version=1 | u8 kind (0 tensor, 1 channel, 2 block) | u32 a | u32 b
//!         | u32 ndim | ndim x u64 dims | u32 sdim | sdim x u64 scale dims
//!         | prod(scale dims) x f64 scales | prod(dims) x u8 E4M3 codes
//! ```
//!
//! `a` is the channel axis or block rows, `b` the block cols; unused fields are 0.
//!
//! Text tensor: `#` starts a comment; the first line holds the dims, the rest
//! the values, whitespace separated, row-major.

use std::path::Path;

use super::{Granularity, QuantError, QuantizedTensor, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"RVTF";
const QUANT_MAGIC: &[u8; 4] = b"RVQ8";
const VERSION: u32 = 1;

fn io_err(path: &Path, e: impl ToString) -> QuantError {
    QuantError::Io { path: path.display().to_string(), message: e.to_string() }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn dims(&mut self) -> Result<Vec<usize>, String> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.u64().map(|d| d as usize)).collect()
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<(), String> {
        if self.take(4)? != magic {
            return Err("bad magic".into());
        }
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(format!("unsupported version {v}")),
        }
    }
    fn end(&self) -> Result<(), String> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(format!("{} trailing bytes", self.buf.len() - self.pos))
        }
    }
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.extend((dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend((d as u64).to_le_bytes());
    }
}

fn count(dims: &[usize]) -> Result<usize, String> {
    dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| "dims overflow".to_string())
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * (t.shape.len() + t.len()));
    out.extend(TENSOR_MAGIC);
    out.extend(VERSION.to_le_bytes());
    put_dims(&mut out, &t.shape);
    for x in &t.data {
        out.extend(x.to_le_bytes());
    }
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor, String> {
    let mut r = Reader { buf, pos: 0 };
    r.header(TENSOR_MAGIC)?;
    let shape = r.dims()?;
    let data = (0..count(&shape)?).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.end()?;
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), QuantError> {
    std::fs::write(path, tensor_to_bytes(t)).map_err(|e| io_err(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor, QuantError> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    tensor_from_bytes(&buf).map_err(|e| io_err(path, e))
}

pub fn write_tensor_text(path: &Path, t: &Tensor) -> Result<(), QuantError> {
    let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
    let mut s = dims.join(" ");
    s.push('\n');
    let row = *t.shape.last().expect("nonempty shape");
    for chunk in t.data.chunks(row.max(1)) {
        let v: Vec<String> = chunk.iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&v.join(" "));
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_tensor_text(path: &Path) -> Result<Tensor, QuantError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty());
    let head = lines.next().ok_or_else(|| io_err(path, "empty file"))?;
    let shape = head
        .split_whitespace()
        .map(|d| d.parse::<usize>().map_err(|_| io_err(path, format!("bad dimension `{d}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    let data = lines
        .flat_map(str::split_whitespace)
        .map(|v| v.parse::<f64>().map_err(|_| io_err(path, format!("bad value `{v}`"))))
        .collect::<Result<Vec<_>, _>>()?;
    Tensor::new(shape, data)
}

/// A tensor file by extension: `.txt` is text, anything else binary.
pub fn read_any(path: &Path) -> Result<Tensor, QuantError> {
    if path.extension().is_some_and(|e| e == "txt") {
        read_tensor_text(path)
    } else {
        read_tensor(path)
    }
}

pub fn quantized_to_bytes(q: &QuantizedTensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(QUANT_MAGIC);
    out.extend(VERSION.to_le_bytes());
    let (kind, a, b) = match q.granularity {
        Granularity::PerTensor => (0u8, 0usize, 0usize),
        Granularity::PerChannel { axis } => (1, axis, 0),
        Granularity::PerBlock { rows, cols } => (2, rows, cols),
    };
    out.push(kind);
    out.extend((a as u32).to_le_bytes());
    out.extend((b as u32).to_le_bytes());
    put_dims(&mut out, &q.shape);
    put_dims(&mut out, &q.scale_shape);
    for s in &q.scales {
        out.extend(s.to_le_bytes());
    }
    out.extend(&q.codes);
    out
}

pub fn quantized_from_bytes(buf: &[u8]) -> Result<QuantizedTensor, String> {
    let mut r = Reader { buf, pos: 0 };
    r.header(QUANT_MAGIC)?;
    let kind = r.u8()?;
    let (a, b) = (r.u32()? as usize, r.u32()? as usize);
    let granularity = match kind {
        0 => Granularity::PerTensor,
        1 => Granularity::PerChannel { axis: a },
        2 => Granularity::PerBlock { rows: a, cols: b },
        k => return Err(format!("unknown granularity tag {k}")),
    };
    let shape = r.dims()?;
    let scale_shape = r.dims()?;
    let scales = (0..count(&scale_shape)?).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let codes = r.take(count(&shape)?)?.to_vec();
    r.end()?;
    let q = QuantizedTensor { codes, scales, scale_shape, shape, granularity };
    q.validate().map_err(|e| e.to_string())?;
    Ok(q)
}

pub fn write_quantized(path: &Path, q: &QuantizedTensor) -> Result<(), QuantError> {
    std::fs::write(path, quantized_to_bytes(q)).map_err(|e| io_err(path, e))
}

pub fn read_quantized(path: &Path) -> Result<QuantizedTensor, QuantError> {
    let buf = std::fs::read(path).map_err(|e| io_err(path, e))?;
    quantized_from_bytes(&buf).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    #[test]
    fn bytes_roundtrip() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.0, 1e-3, 7.0, -0.25]).unwrap();
        assert_eq!(tensor_from_bytes(&tensor_to_bytes(&t)).unwrap(), t);
        let q = quantize(&t, Granularity::PerBlock { rows: 1, cols: 2 }).unwrap();
        let bytes = quantized_to_bytes(&q);
        assert_eq!(&bytes[..4], b"RVQ8");
        // header 4+4+1+4+4, shape 4+16, scale shape 4+16, 2x2 scales, 6 codes
        assert_eq!(bytes.len(), 17 + 20 + 20 + 32 + 6);
        assert_eq!(quantized_from_bytes(&bytes).unwrap(), q);
        assert!(quantized_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
