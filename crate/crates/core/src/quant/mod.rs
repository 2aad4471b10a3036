//! FP8 E4M3 post-training quantization emulated bit-exactly, at per-tensor,
//! per-channel and per-block granularity, plus error metrics and a
//! model-compression calculator.
//!
//! Scales use absmax calibration: `scale = max|x| / 448` per group, so the
//! group maximum maps exactly onto the largest finite code.

mod compression;
mod fp8;
mod io;

pub use compression::{compression_ratio, Component, ModelSizeSpec, BUILTIN_MODELS};
pub use fp8::{Fp8Format, E4M3};
pub use io::{
    quantized_from_bytes, quantized_to_bytes, read_any, read_quantized, read_tensor, read_tensor_text, tensor_from_bytes,
    tensor_to_bytes, write_quantized, write_tensor, write_tensor_text,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BLOCK: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, QuantError> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(QuantError::Shape { shape, reason: format!("{} values", data.len()) });
        }
        Ok(Self { shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check_finite(&self) -> Result<(), QuantError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(QuantError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Granularity {
    PerTensor,
    /// One scale per index along `axis`.
    PerChannel { axis: usize },
    /// Tiles over the last two dimensions; leading dimensions index separate tiles.
    PerBlock { rows: usize, cols: usize },
}

impl Granularity {
    pub fn block() -> Self {
        Granularity::PerBlock { rows: DEFAULT_BLOCK, cols: DEFAULT_BLOCK }
    }

    pub fn label(&self) -> String {
        match self {
            Granularity::PerTensor => "per_tensor".into(),
            Granularity::PerChannel { axis } => format!("per_channel:{axis}"),
            Granularity::PerBlock { rows, cols } => format!("per_block:{rows}x{cols}"),
        }
    }

    /// Parses `per_tensor`, `per_channel[:axis]`, `per_block[:RxC]`.
    pub fn parse(s: &str) -> Result<Self, QuantError> {
        let bad = || QuantError::Invalid(format!("unknown granularity `{s}`"));
        let (head, arg) = s.split_once(':').map_or((s, None), |(h, a)| (h, Some(a)));
        match (head, arg) {
            ("per_tensor", None) => Ok(Granularity::PerTensor),
            ("per_channel", None) => Ok(Granularity::PerChannel { axis: 0 }),
            ("per_channel", Some(a)) => Ok(Granularity::PerChannel { axis: a.parse().map_err(|_| bad())? }),
            ("per_block", None) => Ok(Granularity::block()),
            ("per_block", Some(a)) => {
                let (r, c) = a.split_once('x').ok_or_else(bad)?;
                Ok(Granularity::PerBlock { rows: r.parse().map_err(|_| bad())?, cols: c.parse().map_err(|_| bad())? })
            }
            _ => Err(bad()),
        }
    }

    /// Shape of the scale array for a tensor of `shape`.
    pub fn scale_shape(&self, shape: &[usize]) -> Result<Vec<usize>, QuantError> {
        let err = |reason: &str| QuantError::Shape { shape: shape.to_vec(), reason: reason.into() };
        match *self {
            Granularity::PerTensor => Ok(vec![1]),
            Granularity::PerChannel { axis } => {
                shape.get(axis).map(|&n| vec![n]).ok_or_else(|| err("channel axis out of range"))
            }
            Granularity::PerBlock { rows, cols } => {
                if shape.len() < 2 {
                    return Err(err("per-block needs at least 2 dimensions"));
                }
                if rows == 0 || cols == 0 {
                    return Err(err("block dimensions must be >= 1"));
                }
                let k = shape.len();
                let mut s = shape[..k - 2].to_vec();
                s.push(shape[k - 2].div_ceil(rows));
                s.push(shape[k - 1].div_ceil(cols));
                Ok(s)
            }
        }
    }

    /// Group index of every element, row-major.
    fn groups(&self, shape: &[usize]) -> Result<(usize, Vec<usize>), QuantError> {
        let ss = self.scale_shape(shape)?;
        let n_groups = ss.iter().product();
        let n: usize = shape.iter().product();
        let ids = match *self {
            Granularity::PerTensor => vec![0; n],
            Granularity::PerChannel { axis } => {
                let inner: usize = shape[axis + 1..].iter().product();
                (0..n).map(|i| (i / inner) % shape[axis]).collect()
            }
            Granularity::PerBlock { rows, cols } => {
                let k = shape.len();
                let (r, c) = (shape[k - 2], shape[k - 1]);
                let (br, bc) = (ss[k - 2], ss[k - 1]);
                (0..n)
                    .map(|i| {
                        let lead = i / (r * c);
                        let (ri, ci) = ((i / c) % r, i % c);
                        (lead * br + ri / rows) * bc + ci / cols
                    })
                    .collect()
            }
        };
        Ok((n_groups, ids))
    }
}

/// Extents of the tiles covering a `(.., rows, cols)` shape: `(row0, rows, col0, cols)`.
/// Edge tiles are truncated.
pub fn block_partition(shape: &[usize], block: (usize, usize)) -> Result<Vec<(usize, usize, usize, usize)>, QuantError> {
    Granularity::PerBlock { rows: block.0, cols: block.1 }.scale_shape(shape)?;
    let k = shape.len();
    let (r, c) = (shape[k - 2], shape[k - 1]);
    let mut out = Vec::new();
    for r0 in (0..r).step_by(block.0) {
        for c0 in (0..c).step_by(block.1) {
            out.push((r0, block.0.min(r - r0), c0, block.1.min(c - c0)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    /// E4M3 bit patterns, row-major.
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
    pub scale_shape: Vec<usize>,
    pub shape: Vec<usize>,
    pub granularity: Granularity,
}

pub fn quantize(t: &Tensor, g: Granularity) -> Result<QuantizedTensor, QuantError> {
    t.check_finite()?;
    let (n_groups, ids) = g.groups(&t.shape)?;
    let mut amax = vec![0.0f64; n_groups];
    for (x, &gi) in t.data.iter().zip(&ids) {
        amax[gi] = amax[gi].max(x.abs());
    }
    let scales: Vec<f64> = amax.iter().map(|&m| if m > 0.0 { m / Fp8Format::MAX_NORMAL } else { 1.0 }).collect();
    let codes = t.data.iter().zip(&ids).map(|(x, &gi)| Fp8Format::encode(x / scales[gi])).collect();
    Ok(QuantizedTensor { codes, scales, scale_shape: g.scale_shape(&t.shape)?, shape: t.shape.clone(), granularity: g })
}

impl QuantizedTensor {
    pub fn validate(&self) -> Result<(), QuantError> {
        let n: usize = self.shape.iter().product();
        if self.codes.len() != n {
            return Err(QuantError::Invalid(format!("{} codes for shape {:?}", self.codes.len(), self.shape)));
        }
        if self.granularity.scale_shape(&self.shape)? != self.scale_shape
            || self.scales.len() != self.scale_shape.iter().product::<usize>()
        {
            return Err(QuantError::Invalid("scale array does not match the granularity".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(QuantError::Invalid("scales must be finite and > 0".into()));
        }
        if self.codes.iter().any(|&c| Fp8Format::is_nan_code(c)) {
            return Err(QuantError::Invalid("NaN code".into()));
        }
        Ok(())
    }

    pub fn group_ids(&self) -> Vec<usize> {
        self.granularity.groups(&self.shape).expect("validated shape").1
    }
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Tensor, QuantError> {
    q.validate()?;
    let data = q.codes.iter().zip(q.group_ids()).map(|(&c, g)| Fp8Format::decode(c) * q.scales[g]).collect();
    Tensor::new(q.shape.clone(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: usize,
    pub scale: f64,
    pub max_rel_error: f64,
    /// Over every nonzero element, subnormal results included.
    pub max_rel_error_all: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantErrorReport {
    /// Over elements whose scaled magnitude is in the E4M3 normal range.
    pub max_rel_error: f64,
    pub mse: f64,
    pub groups: Vec<GroupError>,
}

pub fn quant_error(original: &Tensor, q: &QuantizedTensor) -> Result<QuantErrorReport, QuantError> {
    if original.shape != q.shape {
        return Err(QuantError::Shape { shape: original.shape.clone(), reason: format!("vs quantized {:?}", q.shape) });
    }
    let deq = dequantize(q)?;
    let ids = q.group_ids();
    let mut groups: Vec<GroupError> =
        q.scales.iter().enumerate().map(|(group, &scale)| GroupError { group, scale, max_rel_error: 0.0, max_rel_error_all: 0.0, mse: 0.0 }).collect();
    let mut counts = vec![0usize; groups.len()];
    let mut sq = 0.0;
    for ((&x, &y), &g) in original.data.iter().zip(&deq.data).zip(&ids) {
        let e = (x - y).powi(2);
        sq += e;
        groups[g].mse += e;
        counts[g] += 1;
        if x != 0.0 {
            let rel = (x - y).abs() / x.abs();
            let ge = &mut groups[g];
            ge.max_rel_error_all = ge.max_rel_error_all.max(rel);
            if (x / q.scales[g]).abs() >= Fp8Format::MIN_NORMAL {
                ge.max_rel_error = ge.max_rel_error.max(rel);
            }
        }
    }
    for (g, c) in groups.iter_mut().zip(counts) {
        g.mse /= c.max(1) as f64;
    }
    Ok(QuantErrorReport {
        max_rel_error: groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max),
        mse: sq / original.len().max(1) as f64,
        groups,
    })
}
