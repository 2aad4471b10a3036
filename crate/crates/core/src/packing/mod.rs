//! Sequence packing: bin-packing planners, varlen offset metadata, padding
//! analytics, per-batch dynamic padding and camera-view pruning.
//!
//! Packed samples never attend to each other; [`attention`] holds the
//! numeric reference that shows packed and per-sample computation agree.

pub mod attention;
mod corpus;

pub use attention::{
    block_diagonal_mask, masked_attention, packed_attention, reference_attention, AttentionError, SmallTensor,
};
pub use corpus::{read_corpus, write_corpus, PackingPreset, BUILTIN_PACKING};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FLOPs per (query, key, dim) triple in one attention layer: one multiply-add
/// for `q k^T` and one for `p v`.
pub const ATTENTION_FLOP_CONSTANT: f64 = 4.0;

/// Linear-layer FLOPs per token per `d^2` in one transformer block
/// (QKV and output projections 8d^2, 4x MLP 16d^2).
pub const LINEAR_FLOP_CONSTANT: f64 = 24.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PackingError {
    #[error("sample `{id}` has {len} tokens, more than the capacity {capacity}")]
    Oversize { id: String, len: u64, capacity: u64 },
    #[error("sample `{id}` has no view `{view}`")]
    UnknownView { id: String, view: String },
    #[error("invalid sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Corpus { path: String, message: String },
}

/// Token layout of one training sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLen {
    pub id: String,
    pub view_lens: BTreeMap<String, u64>,
    pub text_len: u64,
}

impl SampleLen {
    pub fn new(id: impl Into<String>, views: &[(&str, u64)], text_len: u64) -> Result<Self, PackingError> {
        let s = Self {
            id: id.into(),
            view_lens: views.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            text_len,
        };
        s.validate()?;
        Ok(s)
    }

    /// A text-only sample.
    pub fn text(id: impl Into<String>, len: u64) -> Self {
        Self { id: id.into(), view_lens: BTreeMap::new(), text_len: len }
    }

    pub fn total_len(&self) -> u64 {
        self.view_lens.values().sum::<u64>() + self.text_len
    }

    pub fn validate(&self) -> Result<(), PackingError> {
        if self.total_len() == 0 {
            return Err(PackingError::InvalidSample { id: self.id.clone(), reason: "total length is 0".into() });
        }
        Ok(())
    }
}

/// Drop one camera view from a sample.
pub fn prune_view(sample: &SampleLen, view: &str) -> Result<SampleLen, PackingError> {
    let mut out = sample.clone();
    if out.view_lens.remove(view).is_none() {
        return Err(PackingError::UnknownView { id: sample.id.clone(), view: view.to_string() });
    }
    out.validate()?;
    Ok(out)
}

/// Apply [`prune_view`] to every sample that has the view; others pass through.
pub fn prune_corpus(samples: &[SampleLen], view: &str) -> Result<Vec<SampleLen>, PackingError> {
    samples
        .iter()
        .map(|s| if s.view_lens.contains_key(view) { prune_view(s, view) } else { Ok(s.clone()) })
        .collect()
}

/// One packed row: members laid end to end, at most `capacity` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub capacity: u64,
    pub members: Vec<(String, u64)>,
    pub cu_seqlens: Vec<u64>,
}

impl PackedSequence {
    fn open(capacity: u64) -> Self {
        Self { capacity, members: Vec::new(), cu_seqlens: vec![0] }
    }

    fn push(&mut self, id: &str, len: u64) {
        self.members.push((id.to_string(), len));
        self.cu_seqlens.push(self.used() + len);
    }

    pub fn used(&self) -> u64 {
        *self.cu_seqlens.last().unwrap_or(&0)
    }

    pub fn free(&self) -> u64 {
        self.capacity - self.used()
    }

    pub fn lengths(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.1).collect()
    }
}

/// Prefix sums with a leading zero.
pub fn cu_seqlens(lengths: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(lengths.len() + 1);
    out.push(0);
    let mut acc = 0;
    for &l in lengths {
        acc += l;
        out.push(acc);
    }
    out
}

fn check_sizes<'a>(items: impl IntoIterator<Item = (&'a str, u64)>, capacity: u64) -> Result<(), PackingError> {
    if capacity == 0 {
        return Err(PackingError::Invalid("capacity must be >= 1".into()));
    }
    for (id, len) in items {
        if len > capacity {
            return Err(PackingError::Oversize { id: id.to_string(), len, capacity });
        }
        if len == 0 {
            return Err(PackingError::InvalidSample { id: id.to_string(), reason: "length is 0".into() });
        }
    }
    Ok(())
}

/// First-fit decreasing. Ties keep input order, so the plan is deterministic.
pub fn pack_ffd(items: &[(String, u64)], capacity: u64) -> Result<Vec<PackedSequence>, PackingError> {
    check_sizes(items.iter().map(|(i, l)| (i.as_str(), *l)), capacity)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[b].1.cmp(&items[a].1));
    let mut bins: Vec<PackedSequence> = Vec::new();
    for i in order {
        let (id, len) = &items[i];
        match bins.iter_mut().find(|b| b.free() >= *len) {
            Some(b) => b.push(id, *len),
            None => {
                let mut b = PackedSequence::open(capacity);
                b.push(id, *len);
                bins.push(b);
            }
        }
    }
    Ok(bins)
}

/// Next-fit in arrival order, for streams where earlier rows are already
/// emitted: a row is closed as soon as the next sample does not fit.
pub fn pack_greedy(items: &[(String, u64)], capacity: u64) -> Result<Vec<PackedSequence>, PackingError> {
    check_sizes(items.iter().map(|(i, l)| (i.as_str(), *l)), capacity)?;
    let mut bins: Vec<PackedSequence> = Vec::new();
    for (id, len) in items {
        if bins.last().is_none_or(|b| b.free() < *len) {
            bins.push(PackedSequence::open(capacity));
        }
        bins.last_mut().expect("open row").push(id, *len);
    }
    Ok(bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackAlgorithm {
    Ffd,
    Greedy,
}

pub fn pack(items: &[(String, u64)], capacity: u64, algo: PackAlgorithm) -> Result<Vec<PackedSequence>, PackingError> {
    match algo {
        PackAlgorithm::Ffd => pack_ffd(items, capacity),
        PackAlgorithm::Greedy => pack_greedy(items, capacity),
    }
}

/// `(id, total_len)` pairs for the planners.
pub fn items(samples: &[SampleLen]) -> Vec<(String, u64)> {
    samples.iter().map(|s| (s.id.clone(), s.total_len())).collect()
}

/// Fraction of slots that are filler when every sample is padded to `pad_to`.
pub fn padding_rate(lengths: &[u64], pad_to: u64) -> Result<f64, PackingError> {
    if lengths.is_empty() {
        return Err(PackingError::Invalid("no lengths".into()));
    }
    let max = *lengths.iter().max().expect("nonempty");
    if pad_to < max || pad_to == 0 {
        return Err(PackingError::Invalid(format!("pad_to {pad_to} is below the longest sample {max}")));
    }
    let total: u64 = lengths.iter().sum();
    Ok(1.0 - total as f64 / (lengths.len() as f64 * pad_to as f64))
}

/// Saving estimate when attention cost is quadratic in length:
/// `1 - sum(l^2) / (B * L^2)`.
pub fn quadratic_saving(lengths: &[u64], pad_to: u64) -> Result<f64, PackingError> {
    padding_rate(lengths, pad_to)?;
    let sq: f64 = lengths.iter().map(|&l| (l as f64).powi(2)).sum();
    Ok(1.0 - sq / (lengths.len() as f64 * (pad_to as f64).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttentionMode {
    /// Every sample padded to this length; filler tokens take part.
    Fixed(u64),
    /// Varlen: each sample attends only within itself.
    Packed,
}

/// Attention FLOPs for one layer of width `dim`.
pub fn attention_flops(lengths: &[u64], mode: AttentionMode, dim: u64) -> f64 {
    let c = ATTENTION_FLOP_CONSTANT * dim as f64;
    match mode {
        AttentionMode::Fixed(l) => c * lengths.len() as f64 * (l as f64).powi(2),
        AttentionMode::Packed => c * lengths.iter().map(|&l| (l as f64).powi(2)).sum::<f64>(),
    }
}

/// Per-batch pad length: the longest sample in the batch.
pub fn dynamic_pad_length(batch: &[u64]) -> Result<u64, PackingError> {
    batch.iter().copied().max().ok_or_else(|| PackingError::Invalid("empty batch".into()))
}

/// Token slots saved by padding each batch to its own maximum instead of `cap`.
pub fn dynamic_padding_savings(batches: &[Vec<u64>], cap: u64) -> Result<u64, PackingError> {
    let mut saved = 0;
    for b in batches {
        let m = dynamic_pad_length(b)?;
        if m > cap {
            return Err(PackingError::Invalid(format!("batch maximum {m} exceeds the cap {cap}")));
        }
        saved += (cap - m) * b.len() as u64;
    }
    Ok(saved)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackingStats {
    pub samples: usize,
    pub bins_used: usize,
    pub fill_rate: f64,
    /// Padding when every sample is padded to the fixed length.
    pub padding_rate_before: f64,
    /// Unused slots across packed rows.
    pub padding_rate_after: f64,
    pub attention_flops_fixed: f64,
    pub attention_flops_packed: f64,
    pub linear_saving: f64,
    pub quadratic_saving: f64,
}

pub fn packing_stats(bins: &[PackedSequence], pad_to: u64, dim: u64) -> Result<PackingStats, PackingError> {
    let lengths: Vec<u64> = bins.iter().flat_map(|b| b.lengths()).collect();
    let slots: u64 = bins.iter().map(|b| b.capacity).sum();
    let used: u64 = lengths.iter().sum();
    let before = padding_rate(&lengths, pad_to)?;
    let fill = used as f64 / slots as f64;
    Ok(PackingStats {
        samples: lengths.len(),
        bins_used: bins.len(),
        fill_rate: fill,
        padding_rate_before: before,
        padding_rate_after: 1.0 - fill,
        attention_flops_fixed: attention_flops(&lengths, AttentionMode::Fixed(pad_to), dim),
        attention_flops_packed: attention_flops(&lengths, AttentionMode::Packed, dim),
        linear_saving: before,
        quadratic_saving: quadratic_saving(&lengths, pad_to)?,
    })
}

/// Training cost of one transformer layer, in FLOPs, for rows of `slots`
/// tokens whose attention covers the given segments.
fn layer_cost(slots: f64, segments_sq: f64, dim: u64) -> f64 {
    let d = dim as f64;
    LINEAR_FLOP_CONSTANT * d * d * slots + ATTENTION_FLOP_CONSTANT * d * segments_sq
}

/// Throughput gain of packing: cost of padding each sample to `pad_to`
/// divided by the cost of the packed rows (each row billed at full capacity,
/// attention only within members). Both process the same real tokens.
pub fn throughput_proxy(bins: &[PackedSequence], pad_to: u64, dim: u64) -> f64 {
    let lengths: Vec<u64> = bins.iter().flat_map(|b| b.lengths()).collect();
    let l = pad_to as f64;
    let n = lengths.len() as f64;
    let fixed = layer_cost(n * l, n * l * l, dim);
    let slots: f64 = bins.iter().map(|b| b.capacity as f64).sum();
    let sq: f64 = lengths.iter().map(|&x| (x as f64).powi(2)).sum();
    fixed / layer_cost(slots, sq, dim)
}
