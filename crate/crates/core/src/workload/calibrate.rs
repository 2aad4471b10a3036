//! Least-squares fitting of affine cost coefficients from observed timings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::presets::{DdpPreset, PresetError, WorkloadPreset};
use super::{CostModel, DdpCostModel, EnvModel, ScalingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    InferenceAlpha,
    InferenceBeta,
    TrainAlpha,
    TrainBeta,
    EnvAlpha,
    EnvBeta,
    /// `param_bytes / bandwidth` of the ring allreduce.
    RingBandwidthTerm,
    LinkLatency,
    Contention,
}

impl Coefficient {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
    }

    pub fn name(&self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observation {
    Inference { batch: f64, latency: f64 },
    Train { samples: f64, latency: f64 },
    GpuEnv { batch: f64, latency: f64 },
    DdpEpoch { dp: usize, mbs: u64, epoch_seconds: f64 },
}

impl Observation {
    fn observed(&self) -> f64 {
        match *self {
            Observation::Inference { latency, .. }
            | Observation::Train { latency, .. }
            | Observation::GpuEnv { latency, .. } => latency,
            Observation::DdpEpoch { epoch_seconds, .. } => epoch_seconds,
        }
    }

    fn family(&self) -> &'static [Coefficient] {
        use Coefficient::*;
        match self {
            Observation::Inference { .. } => &[InferenceAlpha, InferenceBeta],
            Observation::Train { .. } => &[TrainAlpha, TrainBeta],
            Observation::GpuEnv { .. } => &[EnvAlpha, EnvBeta],
            Observation::DdpEpoch { .. } => {
                &[TrainAlpha, TrainBeta, RingBandwidthTerm, LinkLatency, Contention]
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error(transparent)]
    Preset(#[from] PresetError),
    #[error("no observations")]
    Empty,
    #[error("observation {index} must be positive and finite")]
    BadObservation { index: usize },
    #[error("{observations} observations cannot identify {unknowns} unknowns; unidentifiable: {}", names(.unidentifiable))]
    Underdetermined {
        observations: usize,
        unknowns: usize,
        unidentifiable: Vec<Coefficient>,
    },
    #[error("rank-deficient system; unidentifiable: {}", names(.unidentifiable))]
    RankDeficient { unidentifiable: Vec<Coefficient> },
    #[error("coefficient {0:?} does not apply to this preset")]
    NotApplicable(Coefficient),
}

fn names(c: &[Coefficient]) -> String {
    c.iter().map(Coefficient::name).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub observation: Observation,
    pub predicted: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum CalibratedModel {
    Workload(Box<WorkloadPreset>),
    Ddp(DdpPreset),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub preset: String,
    pub model: CalibratedModel,
    pub fitted: Vec<(Coefficient, f64)>,
    /// Coefficients that wanted to go negative and were pinned at zero.
    pub pinned_at_zero: Vec<Coefficient>,
    pub residuals: Vec<Residual>,
}

impl Calibration {
    pub fn max_relative_error(&self) -> f64 {
        self.residuals
            .iter()
            .map(|r| r.relative_error.abs())
            .fold(0.0, f64::max)
    }
}

enum Base {
    Workload(WorkloadPreset),
    Ddp(DdpPreset),
}

impl Base {
    fn get(&self, c: Coefficient) -> Result<f64, CalibrationError> {
        use Coefficient::*;
        match self {
            Base::Workload(p) => {
                let m = &p.cost;
                Ok(match c {
                    InferenceAlpha => m.inference.alpha,
                    InferenceBeta => m.inference.beta,
                    TrainAlpha => m.train.alpha,
                    TrainBeta => m.train.beta,
                    EnvAlpha | EnvBeta => match m.env {
                        EnvModel::GpuBatched { alpha, beta } => {
                            if c == EnvAlpha {
                                alpha
                            } else {
                                beta
                            }
                        }
                        EnvModel::CpuPerEnv { .. } => return Err(CalibrationError::NotApplicable(c)),
                    },
                    _ => return Err(CalibrationError::NotApplicable(c)),
                })
            }
            Base::Ddp(p) => {
                let m = &p.cost;
                Ok(match c {
                    TrainAlpha => m.train.alpha,
                    TrainBeta => m.train.beta,
                    RingBandwidthTerm => m.network.param_bytes / m.network.bandwidth,
                    LinkLatency => m.network.link_latency,
                    Contention => m.network.contention,
                    _ => return Err(CalibrationError::NotApplicable(c)),
                })
            }
        }
    }

    fn set(&mut self, c: Coefficient, v: f64) {
        use Coefficient::*;
        match self {
            Base::Workload(p) => {
                let m: &mut CostModel = &mut p.cost;
                match c {
                    InferenceAlpha => m.inference.alpha = v,
                    InferenceBeta => m.inference.beta = v,
                    TrainAlpha => m.train.alpha = v,
                    TrainBeta => m.train.beta = v,
                    EnvAlpha | EnvBeta => {
                        if let EnvModel::GpuBatched { alpha, beta } = &mut m.env {
                            if c == EnvAlpha {
                                *alpha = v;
                            } else {
                                *beta = v;
                            }
                        }
                    }
                    _ => {}
                }
            }
            Base::Ddp(p) => {
                let m: &mut DdpCostModel = &mut p.cost;
                match c {
                    TrainAlpha => m.train.alpha = v,
                    TrainBeta => m.train.beta = v,
                    RingBandwidthTerm => {
                        if v > 0.0 {
                            m.network.bandwidth = m.network.param_bytes / v;
                        } else {
                            m.network.param_bytes = 0.0;
                        }
                    }
                    LinkLatency => m.network.link_latency = v,
                    Contention => m.network.contention = v,
                    _ => {}
                }
            }
        }
    }

    /// Regressor of coefficient `c` for one observation, and the divisor that
    /// maps the observation onto a sum of coefficient contributions.
    fn regressor(&self, obs: &Observation, c: Coefficient) -> f64 {
        use Coefficient::*;
        match *obs {
            Observation::Inference { batch, .. } => match c {
                InferenceAlpha => 1.0,
                InferenceBeta => batch,
                _ => 0.0,
            },
            Observation::Train { samples, .. } => match c {
                TrainAlpha => 1.0,
                TrainBeta => samples,
                _ => 0.0,
            },
            Observation::GpuEnv { batch, .. } => match c {
                EnvAlpha => 1.0,
                EnvBeta => batch,
                _ => 0.0,
            },
            Observation::DdpEpoch { dp, mbs, .. } => {
                let n = dp as f64;
                let hops = (dp.max(1) - 1) as f64;
                match c {
                    TrainAlpha => 1.0,
                    TrainBeta => mbs as f64,
                    RingBandwidthTerm => 2.0 * hops / n,
                    LinkLatency => 2.0 * hops,
                    Contention => hops * hops,
                    _ => 0.0,
                }
            }
        }
    }

    /// Observed value expressed per unit of the affine model (per step for DDP).
    fn normalised_target(&self, obs: &Observation) -> f64 {
        match (self, *obs) {
            (Base::Ddp(p), Observation::DdpEpoch { dp, mbs, epoch_seconds }) => {
                let steps = ScalingConfig { mbs, dp, dataset_size: p.dataset_size }.steps_per_epoch();
                epoch_seconds / steps as f64
            }
            _ => obs.observed(),
        }
    }

    fn predict(&self, obs: &Observation) -> f64 {
        match (self, *obs) {
            (Base::Ddp(p), Observation::DdpEpoch { dp, mbs, .. }) => p.epoch_time(dp, mbs),
            (Base::Workload(p), Observation::Inference { batch, .. }) => p.cost.inference.eval(batch),
            (Base::Workload(p), Observation::Train { samples, .. }) => p.cost.train.eval(samples),
            (Base::Workload(p), Observation::GpuEnv { batch, .. }) => match p.cost.env {
                EnvModel::GpuBatched { alpha, beta } => alpha + beta * batch,
                EnvModel::CpuPerEnv { step_cost, .. } => step_cost,
            },
            _ => f64::NAN,
        }
    }
}

/// Fit the coefficients in `free` (default: every coefficient of each observed
/// family) to the observations by least squares on relative residuals. The
/// remaining coefficients keep their preset values. Coefficients that would go
/// negative are pinned at zero and the rest refit.
pub fn calibrate(
    preset_name: &str,
    observations: &[Observation],
    free: Option<&[Coefficient]>,
) -> Result<Calibration, CalibrationError> {
    if observations.is_empty() {
        return Err(CalibrationError::Empty);
    }
    for (index, o) in observations.iter().enumerate() {
        let v = o.observed();
        if !(v > 0.0 && v.is_finite()) {
            return Err(CalibrationError::BadObservation { index });
        }
    }
    let mut base = match WorkloadPreset::builtin(preset_name) {
        Ok(p) => Base::Workload(p),
        Err(_) => Base::Ddp(DdpPreset::builtin(preset_name)?),
    };

    let mut unknowns: Vec<Coefficient> = match free {
        Some(f) => f.to_vec(),
        None => {
            let mut all: Vec<Coefficient> =
                observations.iter().flat_map(|o| o.family().iter().copied()).collect();
            all.sort();
            all.dedup();
            all
        }
    };
    unknowns.sort();
    unknowns.dedup();
    for c in &unknowns {
        base.get(*c)?;
    }

    if observations.len() < unknowns.len() {
        return Err(CalibrationError::Underdetermined {
            observations: observations.len(),
            unknowns: unknowns.len(),
            unidentifiable: unidentifiable(&base, observations, &unknowns),
        });
    }
    let deficient = unidentifiable(&base, observations, &unknowns);
    if !deficient.is_empty() {
        return Err(CalibrationError::RankDeficient { unidentifiable: deficient });
    }

    let mut pinned = Vec::new();
    loop {
        let solution = solve(&base, observations, &unknowns)?;
        let worst = solution
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < 0.0)
            .min_by(|a, b| a.1.total_cmp(b.1));
        match worst {
            Some((i, _)) => {
                let c = unknowns.remove(i);
                base.set(c, 0.0);
                pinned.push(c);
                if unknowns.is_empty() {
                    break;
                }
            }
            None => {
                for (c, v) in unknowns.iter().zip(&solution) {
                    base.set(*c, *v);
                }
                break;
            }
        }
    }

    let fitted = unknowns
        .iter()
        .chain(pinned.iter())
        .map(|c| Ok((*c, base.get(*c)?)))
        .collect::<Result<Vec<_>, CalibrationError>>()?;
    let residuals = observations
        .iter()
        .map(|o| {
            let predicted = base.predict(o);
            Residual {
                observation: *o,
                predicted,
                relative_error: (predicted - o.observed()) / o.observed(),
            }
        })
        .collect();
    let model = match base {
        Base::Workload(p) => CalibratedModel::Workload(Box::new(p)),
        Base::Ddp(p) => CalibratedModel::Ddp(p),
    };
    Ok(Calibration {
        preset: preset_name.to_string(),
        model,
        fitted,
        pinned_at_zero: pinned,
        residuals,
    })
}

fn design(
    base: &Base,
    observations: &[Observation],
    unknowns: &[Coefficient],
) -> Result<(DMatrix<f64>, DVector<f64>), CalibrationError> {
    let m = observations.len();
    let k = unknowns.len();
    let mut a = DMatrix::zeros(m, k);
    let mut b = DVector::zeros(m);
    // every coefficient of the observation's family that is not being fitted is held fixed
    for (i, o) in observations.iter().enumerate() {
        let y = base.normalised_target(o);
        let mut fixed = 0.0;
        for c in o.family() {
            if !unknowns.contains(c) {
                fixed += base.get(*c).unwrap_or(0.0) * base.regressor(o, *c);
            }
        }
        let w = 1.0 / y;
        for (j, c) in unknowns.iter().enumerate() {
            a[(i, j)] = base.regressor(o, *c) * w;
        }
        b[i] = (y - fixed) * w;
    }
    Ok((a, b))
}

fn unidentifiable(base: &Base, observations: &[Observation], unknowns: &[Coefficient]) -> Vec<Coefficient> {
    let Ok((a, _)) = design(base, observations, unknowns) else {
        return unknowns.to_vec();
    };
    let k = unknowns.len();
    if k == 0 {
        return Vec::new();
    }
    // column-normalise so the rank test is scale free
    let mut a = a;
    for j in 0..k {
        let n = a.column(j).norm();
        if n > 0.0 {
            a.column_mut(j).scale_mut(1.0 / n);
        }
    }
    let gram = a.transpose() * &a;
    let eig = SymmetricEigen::new(gram);
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = 1e-10 * max.max(1.0);
    let mut involved = vec![false; k];
    for (idx, ev) in eig.eigenvalues.iter().enumerate() {
        if *ev <= tol {
            let v = eig.eigenvectors.column(idx);
            for j in 0..k {
                if v[j].abs() > 1e-6 {
                    involved[j] = true;
                }
            }
        }
    }
    unknowns
        .iter()
        .zip(involved)
        .filter_map(|(c, bad)| bad.then_some(*c))
        .collect()
}

fn solve(base: &Base, observations: &[Observation], unknowns: &[Coefficient]) -> Result<Vec<f64>, CalibrationError> {
    let (a, b) = design(base, observations, unknowns)?;
    let k = unknowns.len();
    let mut scale = vec![1.0; k];
    let mut a = a;
    for (j, s) in scale.iter_mut().enumerate() {
        let n = a.column(j).norm();
        if n > 0.0 {
            *s = n;
            a.column_mut(j).scale_mut(1.0 / n);
        }
    }
    let svd = a.svd(true, true);
    let x = svd
        .solve(&b, 1e-14)
        .map_err(|_| CalibrationError::RankDeficient { unidentifiable: unknowns.to_vec() })?;
    Ok(x.iter().zip(&scale).map(|(v, s)| v / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Affine;

    #[test]
    fn recovers_synthetic_inference_coefficients() {
        let truth = Affine::new(0.0123, 0.00456);
        let obs: Vec<_> = [1.0, 4.0, 9.0, 16.0, 33.0]
            .iter()
            .map(|&b| Observation::Inference { batch: b, latency: truth.eval(b) })
            .collect();
        let cal = calibrate("libero_pi05", &obs, None).unwrap();
        let CalibratedModel::Workload(p) = &cal.model else { panic!() };
        assert!((p.cost.inference.alpha - truth.alpha).abs() < 1e-9);
        assert!((p.cost.inference.beta - truth.beta).abs() < 1e-9);
        assert!(cal.max_relative_error() < 1e-9);
    }

    #[test]
    fn recovers_synthetic_ddp_coefficients() {
        let mut preset = DdpPreset::builtin("ddp_gr00t").unwrap();
        preset.cost.train.alpha = 3.1;
        preset.cost.network.link_latency = 2e-3;
        preset.cost.network.contention = 4e-5;
        let obs: Vec<_> = [(16usize, 128u64), (32, 128), (64, 128), (128, 128), (256, 128)]
            .iter()
            .map(|&(dp, mbs)| Observation::DdpEpoch { dp, mbs, epoch_seconds: preset.epoch_time(dp, mbs) })
            .collect();
        let free = [Coefficient::TrainAlpha, Coefficient::LinkLatency, Coefficient::Contention];
        let cal = calibrate("ddp_gr00t", &obs, Some(&free)).unwrap();
        let CalibratedModel::Ddp(p) = &cal.model else { panic!() };
        assert!((p.cost.train.alpha - 3.1).abs() < 1e-9);
        assert!((p.cost.network.link_latency - 2e-3).abs() < 1e-9);
        assert!((p.cost.network.contention - 4e-5).abs() < 1e-9);
        assert!(cal.max_relative_error() < 1e-9);
    }

    #[test]
    fn underdetermined_is_an_error() {
        let obs = [
            Observation::DdpEpoch { dp: 32, mbs: 128, epoch_seconds: 9180.0 },
            Observation::DdpEpoch { dp: 64, mbs: 128, epoch_seconds: 4464.0 },
        ];
        let free = [Coefficient::TrainAlpha, Coefficient::LinkLatency, Coefficient::Contention];
        match calibrate("ddp_gr00t", &obs, Some(&free)) {
            Err(CalibrationError::Underdetermined { observations: 2, unknowns: 3, unidentifiable }) => {
                assert!(!unidentifiable.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn collinear_columns_are_named() {
        // alpha and beta cannot be separated when mbs never changes
        let obs = [
            Observation::DdpEpoch { dp: 32, mbs: 128, epoch_seconds: 9180.0 },
            Observation::DdpEpoch { dp: 64, mbs: 128, epoch_seconds: 4464.0 },
            Observation::DdpEpoch { dp: 128, mbs: 128, epoch_seconds: 2628.0 },
        ];
        let free = [Coefficient::TrainAlpha, Coefficient::TrainBeta, Coefficient::Contention];
        match calibrate("ddp_gr00t", &obs, Some(&free)) {
            Err(CalibrationError::RankDeficient { unidentifiable }) => {
                assert_eq!(unidentifiable, vec![Coefficient::TrainAlpha, Coefficient::TrainBeta]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coefficient_names_round_trip() {
        assert_eq!(Coefficient::parse("link_latency"), Some(Coefficient::LinkLatency));
        assert_eq!(Coefficient::Contention.name(), "contention");
        assert_eq!(Coefficient::parse("nope"), None);
    }
}
