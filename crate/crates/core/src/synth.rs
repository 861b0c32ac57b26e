//! Synthetic skin-conductance traces and annotated corpora with known
//! ground truth. Traces follow the same generative model the decomposition
//! inverts: Poisson driver spikes convolved with the sampled impulse
//! response, plus a linear tonic level and white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvxeda::{sample_irf, BatemanIrf, CvxedaError};
use crate::model::{AnnotationRecord, EdaTrace, StimulusFeatures};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Irf(#[from] CvxedaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub sampling_hz: f64,
    pub duration_s: f64,
    /// Poisson rate of driver spikes, Hz.
    pub scr_rate_hz: f64,
    pub scr_amp_range: [f64; 2],
    pub tonic_level: f64,
    pub tonic_drift_per_s: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        let amp_hi = 1.0;
        Self {
            sampling_hz: 4.0,
            duration_s: 60.0,
            scr_rate_hz: 0.1,
            scr_amp_range: [0.3, amp_hi],
            tonic_level: 2.0,
            tonic_drift_per_s: 0.005,
            noise_std: 0.02 * amp_hi,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Low-activity class of the default corpus.
    pub fn low() -> Self {
        Self {
            scr_rate_hz: 0.05,
            ..Self::default()
        }
    }

    /// High-activity class of the default corpus.
    pub fn high() -> Self {
        Self {
            scr_rate_hz: 0.25,
            ..Self::default()
        }
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sampling_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let [lo, hi] = self.scr_amp_range;
        let finite = [
            self.sampling_hz,
            self.duration_s,
            self.scr_rate_hz,
            lo,
            hi,
            self.tonic_level,
            self.tonic_drift_per_s,
            self.noise_std,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(SynthError::BadSpec("non-finite field".into()));
        }
        if !(self.sampling_hz > 0.0 && self.duration_s > 0.0) {
            return Err(SynthError::BadSpec("sampling rate and duration must be positive".into()));
        }
        if self.scr_rate_hz < 0.0 || self.noise_std < 0.0 || !(lo > 0.0 && hi >= lo) {
            return Err(SynthError::BadSpec(format!(
                "rates, amplitudes and noise must be non-negative (amp range {lo}..{hi})"
            )));
        }
        if self.duration_s * self.sampling_hz < 64.0 {
            return Err(SynthError::BadSpec("need at least 64 samples".into()));
        }
        Ok(())
    }
}

/// Ground-truth components of one synthetic trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    /// Spike times snapped to the sampling grid.
    pub spike_times_s: Vec<f64>,
    pub spike_amps: Vec<f64>,
    pub true_phasic: Vec<f64>,
    pub true_tonic: Vec<f64>,
    pub noise: Vec<f64>,
}

impl SynthTruth {
    pub fn noise_rms(&self) -> f64 {
        rms(&self.noise)
    }

    /// `20 log10(rms(phasic) / rms(noise))`; infinite for noiseless traces.
    pub fn snr_db(&self) -> f64 {
        20.0 * (rms(&self.true_phasic) / self.noise_rms()).log10()
    }
}

pub(crate) fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// Poisson spike train on `[0, duration)`: (time, amplitude) pairs.
fn poisson_spikes(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut spikes = Vec::new();
    if spec.scr_rate_hz <= 0.0 {
        return spikes;
    }
    let gaps = Exp::new(spec.scr_rate_hz).expect("positive rate");
    let [lo, hi] = spec.scr_amp_range;
    let mut t = gaps.sample(rng);
    while t < spec.duration_s {
        let amp = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        spikes.push((t, amp));
        t += gaps.sample(rng);
    }
    spikes
}

pub fn gen_trace(spec: &SynthSpec, irf: &BatemanIrf) -> Result<(EdaTrace, SynthTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spikes = poisson_spikes(spec, &mut rng);
    gen_trace_inner(spec, irf, &spikes, &mut rng)
}

/// Generates a trace from an explicit spike list instead of a Poisson draw.
pub fn gen_trace_with_spikes(
    spec: &SynthSpec,
    irf: &BatemanIrf,
    spikes: &[(f64, f64)],
) -> Result<(EdaTrace, SynthTruth), SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    gen_trace_inner(spec, irf, spikes, &mut rng)
}

fn gen_trace_inner(
    spec: &SynthSpec,
    irf: &BatemanIrf,
    spikes: &[(f64, f64)],
    rng: &mut ChaCha8Rng,
) -> Result<(EdaTrace, SynthTruth), SynthError> {
    let n = spec.num_samples();
    let h = sample_irf(irf, spec.sampling_hz)?;
    let mut phasic = vec![0.0; n];
    let mut times = Vec::with_capacity(spikes.len());
    let mut amps = Vec::with_capacity(spikes.len());
    for &(t, amp) in spikes {
        let idx = (t * spec.sampling_hz).round() as usize;
        if idx >= n {
            continue;
        }
        times.push(idx as f64 / spec.sampling_hz);
        amps.push(amp);
        for (k, hk) in h.iter().enumerate().take(n - idx) {
            phasic[idx + k] += amp * hk;
        }
    }
    let tonic: Vec<f64> = (0..n)
        .map(|i| spec.tonic_level + spec.tonic_drift_per_s * (i as f64 / spec.sampling_hz))
        .collect();
    let noise: Vec<f64> = if spec.noise_std > 0.0 {
        let dist = Normal::new(0.0, spec.noise_std).expect("valid std");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    let samples = (0..n).map(|i| phasic[i] + tonic[i] + noise[i]).collect();
    let trace = EdaTrace::new("synthetic", format!("seed{}", spec.seed), spec.sampling_hz, samples);
    Ok((
        trace,
        SynthTruth {
            spike_times_s: times,
            spike_amps: amps,
            true_phasic: phasic,
            true_tonic: tonic,
            noise,
        },
    ))
}

/// Inputs of [`gen_dataset`], also the on-disk form read by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n_subjects: usize,
    pub traces_per_subject: usize,
    pub low: SynthSpec,
    pub high: SynthSpec,
    pub music_dim: usize,
    pub seed: u64,
    pub irf: BatemanIrf,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_subjects: 20,
            traces_per_subject: 20,
            low: SynthSpec::low(),
            high: SynthSpec::high(),
            music_dim: 8,
            seed: 42,
            irf: BatemanIrf::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub traces: Vec<EdaTrace>,
    pub truth: Vec<SynthTruth>,
    /// Intended class of each trace (1 = high activity).
    pub classes: Vec<u8>,
    pub annotations: Vec<AnnotationRecord>,
    pub stimuli: Vec<StimulusFeatures>,
}

/// SplitMix64 step, used to derive independent per-trace seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stimulus_id(j: usize) -> String {
    format!("M{j:03}")
}

pub fn subject_id(i: usize) -> String {
    format!("S{i:03}")
}

/// Builds a corpus where stimulus `j` carries class `j % 2`. Class-1 traces
/// come from `spec_high`, class-0 from `spec_low`; each subject gets a random
/// gain in `[0.5, 2.0]` applied to their whole signal.
pub fn gen_dataset(
    n_subjects: usize,
    traces_per_subject: usize,
    spec_low: &SynthSpec,
    spec_high: &SynthSpec,
    music_dim: usize,
    seed: u64,
    irf: &BatemanIrf,
) -> Result<SynthDataset, SynthError> {
    if n_subjects < 10 {
        return Err(SynthError::BadSpec(format!(
            "need at least 10 subjects for ten folds, got {n_subjects}"
        )));
    }
    if traces_per_subject < 2 {
        return Err(SynthError::BadSpec("need at least 2 traces per subject".into()));
    }
    spec_low.validate()?;
    spec_high.validate()?;
    irf.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed));
    let jitter = Normal::new(0.0, 0.5).expect("valid std");
    let unit = Normal::new(0.0, 1.0).expect("valid std");

    let informative = music_dim.div_ceil(2);
    let stimuli: Vec<StimulusFeatures> = (0..traces_per_subject)
        .map(|j| {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            let vector = (0..music_dim)
                .map(|d| {
                    if d < informative {
                        sign + 0.5 * unit.sample(&mut rng)
                    } else {
                        unit.sample(&mut rng)
                    }
                })
                .collect();
            StimulusFeatures {
                stimulus_id: stimulus_id(j),
                vector,
            }
        })
        .collect();

    let mut out = SynthDataset {
        traces: Vec::new(),
        truth: Vec::new(),
        classes: Vec::new(),
        annotations: Vec::new(),
        stimuli,
    };
    for s in 0..n_subjects {
        let gain: f64 = rng.gen_range(0.5..2.0);
        for j in 0..traces_per_subject {
            let class = (j % 2) as u8;
            let base = if class == 1 { spec_high } else { spec_low };
            let spec = SynthSpec {
                scr_amp_range: [base.scr_amp_range[0] * gain, base.scr_amp_range[1] * gain],
                tonic_level: base.tonic_level * gain,
                tonic_drift_per_s: base.tonic_drift_per_s * gain,
                noise_std: base.noise_std * gain,
                seed: mix(seed ^ mix((s as u64) << 32 | j as u64)),
                ..*base
            };
            let (mut trace, truth) = gen_trace(&spec, irf)?;
            trace.subject_id = subject_id(s);
            trace.stimulus_id = stimulus_id(j);
            let center: f64 = if class == 1 { 8.0 } else { 2.0 };
            let v = (center + jitter.sample(&mut rng)).clamp(1.0, 9.0);
            let a = (center + jitter.sample(&mut rng)).clamp(1.0, 9.0);
            out.annotations.push(
                AnnotationRecord::new(subject_id(s), stimulus_id(j), v, a)
                    .expect("clamped into range"),
            );
            out.traces.push(trace);
            out.truth.push(truth);
            out.classes.push(class);
        }
    }
    Ok(out)
}

pub fn gen_dataset_from_spec(spec: &DatasetSpec) -> Result<SynthDataset, SynthError> {
    gen_dataset(
        spec.n_subjects,
        spec.traces_per_subject,
        &spec.low,
        &spec.high,
        spec.music_dim,
        spec.seed,
        &spec.irf,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_stimulus_gives_exact_ramp() {
        let spec = SynthSpec {
            scr_rate_hz: 0.0,
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let (trace, truth) = gen_trace(&spec, &BatemanIrf::default()).unwrap();
        assert!(truth.true_phasic.iter().all(|&v| v == 0.0));
        for (i, v) in trace.samples.iter().enumerate() {
            let expected = spec.tonic_level + spec.tonic_drift_per_s * (i as f64 / spec.sampling_hz);
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn single_forced_spike_is_shifted_irf() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..SynthSpec::default()
        };
        let irf = BatemanIrf::default();
        let (trace, truth) = gen_trace_with_spikes(&spec, &irf, &[(5.0, 0.8)]).unwrap();
        let h = sample_irf(&irf, spec.sampling_hz).unwrap();
        let at = 20;
        for i in 0..trace.len() {
            let expected = if i >= at && i - at < h.len() { 0.8 * h[i - at] } else { 0.0 };
            assert_eq!(truth.true_phasic[i], expected);
            assert_eq!(trace.samples[i], truth.true_phasic[i] + truth.true_tonic[i]);
        }
        assert_eq!(truth.spike_times_s, vec![5.0]);
    }

    #[test]
    fn same_seed_same_trace_and_additive_truth() {
        let spec = SynthSpec {
            seed: 17,
            ..SynthSpec::default()
        };
        let irf = BatemanIrf::default();
        let (a, ta) = gen_trace(&spec, &irf).unwrap();
        let (b, _) = gen_trace(&spec, &irf).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert_eq!(a.samples[i], ta.true_phasic[i] + ta.true_tonic[i] + ta.noise[i]);
        }
        let (c, _) = gen_trace(&SynthSpec { seed: 18, ..spec }, &irf).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn spike_counts_match_poisson_rate() {
        let spec = SynthSpec {
            scr_rate_hz: 0.2,
            ..SynthSpec::default()
        };
        let irf = BatemanIrf::default();
        let runs = 400;
        let mut total = 0usize;
        for seed in 0..runs {
            let (_, truth) = gen_trace(&SynthSpec { seed, ..spec }, &irf).unwrap();
            total += truth.spike_times_s.len();
        }
        // Sum of independent Poisson counts is Poisson with the summed mean.
        let mean = spec.scr_rate_hz * spec.duration_s * runs as f64;
        let sigma = mean.sqrt();
        assert!(((total as f64) - mean).abs() < 3.0 * sigma, "{total} vs {mean}");
    }

    #[test]
    fn rejects_bad_specs() {
        let irf = BatemanIrf::default();
        let short = SynthSpec {
            duration_s: 10.0,
            ..SynthSpec::default()
        };
        assert!(matches!(gen_trace(&short, &irf), Err(SynthError::BadSpec(_))));
        let neg = SynthSpec {
            noise_std: -1.0,
            ..SynthSpec::default()
        };
        assert!(gen_trace(&neg, &irf).is_err());
        let low = SynthSpec::low();
        assert!(gen_dataset(9, 4, &low, &SynthSpec::high(), 0, 1, &irf).is_err());
    }

    #[test]
    fn dataset_balance_and_seeds() {
        let irf = BatemanIrf::default();
        let (low, high) = (SynthSpec::low(), SynthSpec::high());
        let d = gen_dataset(10, 5, &low, &high, 4, 3, &irf).unwrap();
        assert_eq!(d.traces.len(), 50);
        for s in 0..10 {
            let ones = d.classes[s * 5..(s + 1) * 5].iter().filter(|&&c| c == 1).count();
            let zeros = 5 - ones;
            assert!(ones.abs_diff(zeros) <= 1);
        }
        assert_eq!(d.stimuli.len(), 5);
        assert!(d.stimuli.iter().all(|s| s.vector.len() == 4));
        let e = gen_dataset(10, 5, &low, &high, 4, 4, &irf).unwrap();
        assert_ne!(d.traces[0].samples, e.traces[0].samples);
        let again = gen_dataset(10, 5, &low, &high, 4, 3, &irf).unwrap();
        assert_eq!(d, again);
    }
}
