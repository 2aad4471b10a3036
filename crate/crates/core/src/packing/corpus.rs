//! Corpus length files and the synthetic packing preset.
//!
//! A corpus file is CSV with header `id,text,<view>...`: one row per sample,
//! text tokens then image tokens per named view.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{PackingError, SampleLen};

pub fn read_corpus(path: &Path) -> Result<Vec<SampleLen>, PackingError> {
    let err = |message: String| PackingError::Corpus { path: path.display().to_string(), message };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| err(e.to_string()))?;
    let header = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.get(0) != Some("id") || header.get(1) != Some("text") {
        return Err(err(format!("header must start with `id,text`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let views: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        let num = |i: usize| -> Result<u64, PackingError> {
            rec.get(i)
                .unwrap_or("")
                .parse()
                .map_err(|_| err(format!("line {}: column `{}` is not a token count", line + 2, &header[i])))
        };
        let s = SampleLen {
            id: rec.get(0).unwrap_or("").to_string(),
            text_len: num(1)?,
            view_lens: views.iter().enumerate().map(|(j, v)| Ok((v.clone(), num(j + 2)?))).collect::<Result<_, _>>()?,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// Views are the union over samples; a missing view is written as 0.
pub fn write_corpus(path: &Path, samples: &[SampleLen]) -> Result<(), PackingError> {
    let err = |e: csv::Error| PackingError::Corpus { path: path.display().to_string(), message: e.to_string() };
    let views: std::collections::BTreeSet<&String> = samples.iter().flat_map(|s| s.view_lens.keys()).collect();
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let mut header = vec!["id".to_string(), "text".to_string()];
    header.extend(views.iter().map(|v| v.to_string()));
    w.write_record(&header).map_err(err)?;
    for s in samples {
        let mut row = vec![s.id.clone(), s.text_len.to_string()];
        row.extend(views.iter().map(|v| s.view_lens.get(*v).copied().unwrap_or(0).to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| PackingError::Corpus { path: path.display().to_string(), message: e.to_string() })
}

pub const BUILTIN_PACKING: &[(&str, &str)] =
    &[("qwen25vl_sft", include_str!("../../presets/packing_qwen25vl_sft.toml"))];

/// Log-normal text length, clipped to `[min, max]` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextLength {
    pub mu: f64,
    pub sigma: f64,
    pub min: u64,
    pub max: u64,
}

/// A frozen synthetic corpus plus the packing geometry it is evaluated under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackingPreset {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub samples: usize,
    pub seed: u64,
    /// Fixed pad length of the unpacked baseline.
    pub pad_to: u64,
    /// Packed row length.
    pub capacity: u64,
    /// Model width used by the FLOP model.
    pub dim: u64,
    pub text: TextLength,
    /// Image tokens per view, identical for every sample.
    #[serde(default)]
    pub views: BTreeMap<String, u64>,
}

impl PackingPreset {
    pub fn builtin(name: &str) -> Result<Self, PackingError> {
        let (_, text) = BUILTIN_PACKING
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| PackingError::Invalid(format!("unknown packing preset `{name}`")))?;
        Self::parse(text, &format!("<builtin {name}>"))
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, PackingError> {
        let p: Self = toml::from_str(text)
            .map_err(|e| PackingError::Corpus { path: origin.to_string(), message: e.to_string() })?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), PackingError> {
        let views: u64 = self.views.values().sum();
        let t = &self.text;
        if self.samples == 0 || self.dim == 0 {
            return Err(PackingError::Invalid("samples and dim must be >= 1".into()));
        }
        if !(t.sigma > 0.0) || !t.mu.is_finite() || t.min > t.max || views + t.max == 0 {
            return Err(PackingError::Invalid("text length distribution is invalid".into()));
        }
        if views + t.max > self.pad_to || self.pad_to > self.capacity {
            return Err(PackingError::Invalid(format!(
                "need views + text.max <= pad_to <= capacity, got {} / {} / {}",
                views + t.max,
                self.pad_to,
                self.capacity
            )));
        }
        Ok(())
    }

    pub fn generate(&self) -> Vec<SampleLen> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dist = LogNormal::new(self.text.mu, self.text.sigma).expect("validated sigma");
        (0..self.samples)
            .map(|i| {
                let x: f64 = dist.sample(&mut rng);
                SampleLen {
                    id: format!("s{i:06}"),
                    view_lens: self.views.clone(),
                    text_len: (x.round() as u64).clamp(self.text.min, self.text.max),
                }
            })
            .collect()
    }
}
