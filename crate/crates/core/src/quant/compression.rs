//! Model size before and after partial FP8 quantization.

use serde::{Deserialize, Serialize};

use super::QuantError;

pub const BUILTIN_MODELS: &[(&str, &str)] = &[("qwen25vl_3b", include_str!("../../presets/model_qwen25vl_3b.toml"))];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub name: String,
    pub params: u64,
    pub quantize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizeSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub components: Vec<Component>,
    #[serde(default = "two")]
    pub bytes_hi: f64,
    #[serde(default = "one")]
    pub bytes_lo: f64,
    /// Bytes per stored scale.
    #[serde(default = "four")]
    pub scale_bytes: f64,
    /// Elements sharing one scale (128 x 128 for block-wise).
    #[serde(default = "block")]
    pub group_elements: u64,
}

fn two() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn four() -> f64 {
    4.0
}
fn block() -> u64 {
    128 * 128
}

impl ModelSizeSpec {
    pub fn builtin(name: &str) -> Result<Self, QuantError> {
        let (_, text) = BUILTIN_MODELS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| QuantError::Invalid(format!("unknown model `{name}`")))?;
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Self, QuantError> {
        let s: Self = toml::from_str(text).map_err(|e| QuantError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.components.is_empty() {
            return Err(QuantError::Invalid("no components".into()));
        }
        if let Some(c) = self.components.iter().find(|c| c.params == 0) {
            return Err(QuantError::Invalid(format!("component `{}` has 0 parameters", c.name)));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(self.bytes_hi > 0.0 && ok(self.bytes_lo) && ok(self.scale_bytes) && self.group_elements > 0) {
            return Err(QuantError::Invalid("byte sizes must be >= 0 (bytes_hi > 0) and group_elements >= 1".into()));
        }
        Ok(())
    }

    pub fn bytes_before(&self) -> f64 {
        self.components.iter().map(|c| c.params as f64).sum::<f64>() * self.bytes_hi
    }

    pub fn bytes_after(&self) -> f64 {
        let per_q = self.bytes_lo + self.scale_bytes / self.group_elements as f64;
        self.components
            .iter()
            .map(|c| c.params as f64 * if c.quantize { per_q } else { self.bytes_hi })
            .sum()
    }
}

/// Size reduction in percent.
pub fn compression_ratio(spec: &ModelSizeSpec) -> Result<f64, QuantError> {
    spec.validate()?;
    Ok(100.0 * (1.0 - spec.bytes_after() / spec.bytes_before()))
}
