//! Domain records shared across the crate and the basic signal preprocessing
//! applied before decomposition and training.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SignalError {
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("signal too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("sampling rate must be positive, got {0}")]
    BadRate(f64),
    #[error("annotation score {0} outside [1, 9]")]
    ScoreOutOfRange(f64),
    #[error("{0}")]
    Invalid(String),
}

/// One raw skin-conductance recording of a subject listening to a stimulus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdaTrace {
    pub subject_id: String,
    pub stimulus_id: String,
    /// Hz.
    pub sampling_hz: f64,
    /// Microsiemens.
    pub samples: Vec<f64>,
}

impl EdaTrace {
    pub fn new(
        subject_id: impl Into<String>,
        stimulus_id: impl Into<String>,
        sampling_hz: f64,
        samples: Vec<f64>,
    ) -> Self {
        Self {
            subject_id: subject_id.into(),
            stimulus_id: stimulus_id.into(),
            sampling_hz,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sampling_hz
    }
}

/// Aligned decomposition of a trace: `origin = phasic + tonic + residual`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposedEda {
    pub origin: Vec<f64>,
    pub phasic: Vec<f64>,
    pub tonic: Vec<f64>,
    /// Sparse non-negative sudomotor driver.
    pub driver: Vec<f64>,
    pub residual: Vec<f64>,
}

impl DecomposedEda {
    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Largest deviation from the reconstruction identity.
    pub fn reconstruction_error(&self) -> f64 {
        self.origin
            .iter()
            .zip(&self.phasic)
            .zip(&self.tonic)
            .zip(&self.residual)
            .map(|(((o, p), t), r)| (o - (p + t + r)).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub subject_id: String,
    pub stimulus_id: String,
    pub valence: f64,
    pub arousal: f64,
}

impl AnnotationRecord {
    pub fn new(
        subject_id: impl Into<String>,
        stimulus_id: impl Into<String>,
        valence: f64,
        arousal: f64,
    ) -> Result<Self, SignalError> {
        for s in [valence, arousal] {
            if !(1.0..=9.0).contains(&s) {
                return Err(SignalError::ScoreOutOfRange(s));
            }
        }
        Ok(Self {
            subject_id: subject_id.into(),
            stimulus_id: stimulus_id.into(),
            valence,
            arousal,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryLabels {
    pub valence_class: u8,
    pub arousal_class: u8,
}

impl BinaryLabels {
    pub fn get(&self, dim: AffectDim) -> usize {
        match dim {
            AffectDim::Valence => self.valence_class as usize,
            AffectDim::Arousal => self.arousal_class as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffectDim {
    Valence,
    Arousal,
}

impl AffectDim {
    pub fn as_str(&self) -> &'static str {
        match self {
            AffectDim::Valence => "valence",
            AffectDim::Arousal => "arousal",
        }
    }
}

impl std::str::FromStr for AffectDim {
    type Err = SignalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valence" | "v" => Ok(AffectDim::Valence),
            "arousal" | "a" => Ok(AffectDim::Arousal),
            other => Err(SignalError::Invalid(format!("unknown dimension '{other}'"))),
        }
    }
}

/// Precomputed feature vector of one stimulus (e.g. acoustic descriptors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusFeatures {
    pub stimulus_id: String,
    pub vector: Vec<f64>,
}

/// Network-ready example: 3 rows (origin, phasic, tonic) of length L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub channels: [Vec<f64>; 3],
    pub music: Option<Vec<f64>>,
    pub labels: BinaryLabels,
    pub subject_id: String,
    pub stimulus_id: String,
}

impl LabeledExample {
    pub fn input_len(&self) -> usize {
        self.channels[0].len()
    }
}

pub fn validate_trace(trace: EdaTrace) -> Result<EdaTrace, SignalError> {
    if !(trace.sampling_hz > 0.0) || !trace.sampling_hz.is_finite() {
        return Err(SignalError::BadRate(trace.sampling_hz));
    }
    if let Some(i) = trace.samples.iter().position(|s| !s.is_finite()) {
        return Err(SignalError::NonFinite(i));
    }
    if trace.samples.len() < 2 {
        return Err(SignalError::TooShort {
            len: trace.samples.len(),
            min: 2,
        });
    }
    Ok(trace)
}

/// Drops the first `floor(seconds * sampling_hz)` samples.
pub fn trim_head(mut trace: EdaTrace, seconds: f64) -> Result<EdaTrace, SignalError> {
    if !(seconds >= 0.0) {
        return Err(SignalError::Invalid(format!(
            "trim length must be non-negative, got {seconds}"
        )));
    }
    let drop = (seconds * trace.sampling_hz).floor() as usize;
    let n = trace.samples.len();
    if drop + 2 > n {
        return Err(SignalError::TooShort {
            len: n.saturating_sub(drop),
            min: 2,
        });
    }
    trace.samples.drain(..drop);
    Ok(trace)
}

/// Piecewise-linear resampling onto `target_len` uniform points spanning
/// `[0, N-1]`. Endpoints are copied exactly.
pub fn resample_linear(signal: &[f64], target_len: usize) -> Result<Vec<f64>, SignalError> {
    let n = signal.len();
    if n < 2 {
        return Err(SignalError::TooShort { len: n, min: 2 });
    }
    if target_len < 2 {
        return Err(SignalError::TooShort {
            len: target_len,
            min: 2,
        });
    }
    if target_len == n {
        return Ok(signal.to_vec());
    }
    let scale = (n - 1) as f64 / (target_len - 1) as f64;
    let mut out = Vec::with_capacity(target_len);
    for j in 0..target_len {
        if j == 0 {
            out.push(signal[0]);
            continue;
        }
        if j == target_len - 1 {
            out.push(signal[n - 1]);
            continue;
        }
        let pos = j as f64 * scale;
        let i = (pos.floor() as usize).min(n - 2);
        let frac = pos - i as f64;
        out.push(signal[i] + frac * (signal[i + 1] - signal[i]));
    }
    Ok(out)
}

/// Standardizes to zero mean and unit population standard deviation.
/// Constant input yields all zeros.
pub fn zscore(signal: &[f64]) -> Result<Vec<f64>, SignalError> {
    let n = signal.len();
    if n < 2 {
        return Err(SignalError::TooShort { len: n, min: 2 });
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let var = signal.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    // Treat spreads at rounding level as flat.
    let scale = signal.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-300);
    if std <= scale * 1e-12 {
        return Ok(vec![0.0; n]);
    }
    Ok(signal.iter().map(|x| (x - mean) / std).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(samples: Vec<f64>, hz: f64) -> EdaTrace {
        EdaTrace::new("s", "m", hz, samples)
    }

    #[test]
    fn validate_accepts_minimal_trace() {
        let t = trace(vec![1.0, 1.1], 50.0);
        assert_eq!(validate_trace(t.clone()).unwrap(), t);
    }

    #[test]
    fn validate_rejects_bad_inputs() {
        assert_eq!(
            validate_trace(trace(vec![1.0, f64::NAN], 50.0)),
            Err(SignalError::NonFinite(1))
        );
        assert_eq!(
            validate_trace(trace(vec![1.0, 2.0], 0.0)),
            Err(SignalError::BadRate(0.0))
        );
        assert!(matches!(
            validate_trace(trace(vec![1.0], 1.0)),
            Err(SignalError::TooShort { .. })
        ));
    }

    #[test]
    fn trim_head_drops_leading_seconds() {
        let t = trace((0..10).map(f64::from).collect(), 1.0);
        let out = trim_head(t.clone(), 3.0).unwrap();
        assert_eq!(out.samples, (3..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(trim_head(t, 0.0).unwrap().len(), 10);
        let short = trace(vec![0.0; 4], 1.0);
        assert!(matches!(
            trim_head(short, 3.0),
            Err(SignalError::TooShort { .. })
        ));
    }

    #[test]
    fn resample_examples() {
        assert_eq!(resample_linear(&[0.0, 2.0], 3).unwrap(), vec![0.0, 1.0, 2.0]);
        assert_eq!(resample_linear(&[5.0; 3], 7).unwrap(), vec![5.0; 7]);
        assert_eq!(
            resample_linear(&[0.0, 1.0, 4.0], 5).unwrap(),
            vec![0.0, 0.5, 1.0, 2.5, 4.0]
        );
        assert!(resample_linear(&[1.0], 4).is_err());
        assert!(resample_linear(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore(&[1.0, 3.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(zscore(&[7.0; 3]).unwrap(), vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn resample_is_idempotent_at_same_length(v in prop::collection::vec(-1e3f64..1e3, 2..50)) {
            prop_assert_eq!(resample_linear(&v, v.len()).unwrap(), v);
        }

        #[test]
        fn resample_preserves_endpoints(v in prop::collection::vec(-1e3f64..1e3, 2..50), m in 2usize..200) {
            let out = resample_linear(&v, m).unwrap();
            prop_assert_eq!(out.len(), m);
            prop_assert_eq!(out[0], v[0]);
            prop_assert_eq!(out[m - 1], v[v.len() - 1]);
        }

        #[test]
        fn zscore_moments(v in prop::collection::vec(-1e3f64..1e3, 2..80)) {
            let z = zscore(&v).unwrap();
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(var.abs() < 1e-9 || (var - 1.0).abs() < 1e-9);
        }

        #[test]
        fn zscore_affine_invariance(
            v in prop::collection::vec(-10f64..10.0, 3..60),
            a in 0.01f64..100.0,
            b in -100f64..100.0,
        ) {
            let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let zv = zscore(&v).unwrap();
            let zw = zscore(&w).unwrap();
            for (x, y) in zv.iter().zip(&zw) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
