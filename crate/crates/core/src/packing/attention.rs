//! Single-head scaled dot-product attention in f64, used as the semantic
//! reference for packed (varlen) attention. Multi-head is a loop over heads.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("bad cu_seqlens: {0}")]
    Offsets(String),
}

/// A `(sequence, model_dim)` matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallTensor(DMatrix<f64>);

impl SmallTensor {
    pub fn new(m: DMatrix<f64>) -> Result<Self, AttentionError> {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                if !m[(r, c)].is_finite() {
                    return Err(AttentionError::NonFinite { row: r, col: c });
                }
            }
        }
        Ok(Self(m))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self, AttentionError> {
        if data.len() != rows * cols {
            return Err(AttentionError::Shape(format!("{} values for {rows}x{cols}", data.len())));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[(r, c)]
    }

    /// Rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> SmallTensor {
        Self(self.0.rows(start, end - start).into_owned())
    }

    pub fn max_abs_diff(&self, other: &SmallTensor) -> f64 {
        (&self.0 - &other.0).abs().max()
    }
}

fn check_qkv(q: &SmallTensor, k: &SmallTensor, v: &SmallTensor) -> Result<(), AttentionError> {
    if q.dim() != k.dim() {
        return Err(AttentionError::Shape(format!("q dim {} vs k dim {}", q.dim(), k.dim())));
    }
    if k.rows() != v.rows() {
        return Err(AttentionError::Shape(format!("k has {} rows, v has {}", k.rows(), v.rows())));
    }
    if k.rows() == 0 || q.dim() == 0 {
        return Err(AttentionError::Shape("empty keys".into()));
    }
    Ok(())
}

/// `softmax(q k^T / sqrt(d)) v`, row-wise, with optional key mask
/// (`mask[(i, j)] == false` excludes key `j` for query `i`).
fn attend(q: &SmallTensor, k: &SmallTensor, v: &SmallTensor, mask: Option<&DMatrix<bool>>) -> SmallTensor {
    let scale = 1.0 / (q.dim() as f64).sqrt();
    let scores = (&q.0 * k.0.transpose()) * scale;
    let mut out = DMatrix::zeros(q.rows(), v.dim());
    for i in 0..q.rows() {
        let keep = |j: usize| mask.is_none_or(|m| m[(i, j)]);
        let max = (0..k.rows()).filter(|&j| keep(j)).map(|j| scores[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut denom = 0.0;
        for j in (0..k.rows()).filter(|&j| keep(j)) {
            let w = (scores[(i, j)] - max).exp();
            denom += w;
            for c in 0..v.dim() {
                out[(i, c)] += w * v.0[(j, c)];
            }
        }
        for c in 0..v.dim() {
            out[(i, c)] /= denom;
        }
    }
    SmallTensor(out)
}

pub fn reference_attention(q: &SmallTensor, k: &SmallTensor, v: &SmallTensor) -> Result<SmallTensor, AttentionError> {
    check_qkv(q, k, v)?;
    Ok(attend(q, k, v, None))
}

fn check_offsets(cu: &[usize], rows: usize) -> Result<(), AttentionError> {
    if cu.first() != Some(&0) {
        return Err(AttentionError::Offsets("must start at 0".into()));
    }
    if cu.windows(2).any(|w| w[1] <= w[0]) {
        return Err(AttentionError::Offsets("must be strictly increasing".into()));
    }
    if cu.last() != Some(&rows) {
        return Err(AttentionError::Offsets(format!("last offset {:?} != {rows} rows", cu.last())));
    }
    Ok(())
}

/// Attention over concatenated samples delimited by `cu_seqlens`; each
/// segment attends only to itself.
pub fn packed_attention(
    q: &SmallTensor,
    k: &SmallTensor,
    v: &SmallTensor,
    cu_seqlens: &[usize],
) -> Result<SmallTensor, AttentionError> {
    check_qkv(q, k, v)?;
    if q.rows() != k.rows() {
        return Err(AttentionError::Shape("packed q and k must have the same rows".into()));
    }
    check_offsets(cu_seqlens, q.rows())?;
    let mut out = DMatrix::zeros(q.rows(), v.dim());
    for w in cu_seqlens.windows(2) {
        let (a, b) = (w[0], w[1]);
        let seg = attend(&q.slice_rows(a, b), &k.slice_rows(a, b), &v.slice_rows(a, b), None);
        out.rows_mut(a, b - a).copy_from(&seg.0);
    }
    Ok(SmallTensor(out))
}

/// `true` where query and key lie in the same segment.
pub fn block_diagonal_mask(cu_seqlens: &[usize]) -> Result<DMatrix<bool>, AttentionError> {
    let n = *cu_seqlens.last().ok_or_else(|| AttentionError::Offsets("empty".into()))?;
    check_offsets(cu_seqlens, n)?;
    let mut seg = vec![0; n];
    for (s, w) in cu_seqlens.windows(2).enumerate() {
        seg[w[0]..w[1]].fill(s);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| seg[i] == seg[j]))
}

/// Full-sequence attention with a boolean key mask.
pub fn masked_attention(
    q: &SmallTensor,
    k: &SmallTensor,
    v: &SmallTensor,
    mask: &DMatrix<bool>,
) -> Result<SmallTensor, AttentionError> {
    check_qkv(q, k, v)?;
    if mask.nrows() != q.rows() || mask.ncols() != k.rows() {
        return Err(AttentionError::Shape("mask shape".into()));
    }
    Ok(attend(q, k, v, Some(mask)))
}
