//! Dataset assembly, per-subject relabeling, subject-independent folds,
//! training, metrics, Pearson correlation and the linear SVM baseline.

use std::collections::{BTreeMap, BTreeSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cvxeda::{decompose_lenient, BatemanIrf, CvxedaConfig, CvxedaError};
use crate::model::{
    resample_linear, trim_head, validate_trace, zscore, AffectDim, AnnotationRecord, BinaryLabels,
    EdaTrace, LabeledExample, SignalError, StimulusFeatures,
};
use crate::rtcan::{RtcanConfig, RtcanError, RtcanModel};
use crate::tensor::{sgd_step, Tape, Tensor, TensorError};

pub const TRIM_HEAD_S: f64 = 3.0;
pub const FALLBACK_THRESHOLD: f64 = 5.0;
const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("too few items: {0}")]
    TooFew(String),
    #[error("empty set: {0}")]
    EmptySet(String),
    #[error("subject '{subject}' appears in both train and test sets of fold {fold}")]
    LeakageDetected { subject: String, fold: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Cvxeda(#[from] CvxedaError),
    #[error(transparent)]
    Rtcan(#[from] RtcanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// relabeling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMode {
    /// One k-means on the (valence, arousal) plane.
    #[default]
    Joint2d,
    /// Independent 1-D k-means per dimension.
    PerDimension,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub valence: f64,
    pub arousal: f64,
    pub valence_fallback: bool,
    pub arousal_fallback: bool,
}

/// Two-means with centers seeded at the lexicographically smallest and
/// largest points by (sum, coordinates). Returns the two centers.
fn two_means(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let key = |p: &Vec<f64>| {
        let mut k = vec![p.iter().sum::<f64>()];
        k.extend_from_slice(p);
        k
    };
    let cmp = |a: &&Vec<f64>, b: &&Vec<f64>| key(a).partial_cmp(&key(b)).expect("finite scores");
    let mut c0 = points.iter().min_by(cmp).expect("nonempty").clone();
    let mut c1 = points.iter().max_by(cmp).expect("nonempty").clone();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut assign: Vec<u8> = vec![2; points.len()];
    for _ in 0..KMEANS_MAX_ITER {
        let next: Vec<u8> = points
            .iter()
            .map(|p| u8::from(dist(p, &c1) < dist(p, &c0)))
            .collect();
        if next == assign {
            break;
        }
        assign = next;
        for (k, center) in [&mut c0, &mut c1].into_iter().enumerate() {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a as usize == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (d, c) in center.iter_mut().enumerate() {
                *c = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    (c0, c1)
}

/// Applies the threshold, falling back to the fixed midpoint of the scale
/// when one side would be empty.
fn binarize(values: &[f64], thr: f64) -> (f64, bool) {
    let high = values.iter().filter(|&&v| v > thr).count();
    if high == 0 || high == values.len() {
        (FALLBACK_THRESHOLD, true)
    } else {
        (thr, false)
    }
}

/// Binarizes one subject's annotations at the midpoint of two k-means
/// centers. Scores equal to a threshold map to class 0.
pub fn relabel_subject(
    records: &[AnnotationRecord],
    mode: ClusterMode,
) -> Result<(IndexMap<String, BinaryLabels>, Thresholds), PipelineError> {
    if records.len() < 2 {
        return Err(PipelineError::TooFew(format!(
            "relabeling needs at least 2 annotations, got {}",
            records.len()
        )));
    }
    let v: Vec<f64> = records.iter().map(|r| r.valence).collect();
    let a: Vec<f64> = records.iter().map(|r| r.arousal).collect();
    let (v_mid, a_mid) = match mode {
        ClusterMode::Joint2d => {
            let pts: Vec<Vec<f64>> = records.iter().map(|r| vec![r.valence, r.arousal]).collect();
            let (c0, c1) = two_means(&pts);
            ((c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0)
        }
        ClusterMode::PerDimension => {
            let mid = |xs: &[f64]| {
                let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
                let (c0, c1) = two_means(&pts);
                (c0[0] + c1[0]) / 2.0
            };
            (mid(&v), mid(&a))
        }
    };
    let (v_thr, v_fb) = binarize(&v, v_mid);
    let (a_thr, a_fb) = binarize(&a, a_mid);
    let labels = records
        .iter()
        .map(|r| {
            (
                r.stimulus_id.clone(),
                BinaryLabels {
                    valence_class: u8::from(r.valence > v_thr),
                    arousal_class: u8::from(r.arousal > a_thr),
                },
            )
        })
        .collect();
    Ok((
        labels,
        Thresholds {
            valence: v_thr,
            arousal: a_thr,
            valence_fallback: v_fb,
            arousal_fallback: a_fb,
        },
    ))
}

/// Relabels every subject. Keys are `(subject_id, stimulus_id)`.
pub fn relabel_all(
    records: &[AnnotationRecord],
    mode: ClusterMode,
) -> Result<BTreeMap<(String, String), BinaryLabels>, PipelineError> {
    let mut by_subject: BTreeMap<&str, Vec<AnnotationRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject_id).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (subject, recs) in by_subject {
        let (labels, _) = relabel_subject(&recs, mode)?;
        for (stim, l) in labels {
            out.insert((subject.to_string(), stim), l);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Checks disjointness, coverage of `subjects` and balanced sizes.
    pub fn validate(&self, subjects: &[String]) -> Result<(), PipelineError> {
        let mut seen = BTreeSet::new();
        for (i, fold) in self.folds.iter().enumerate() {
            for s in fold {
                if !seen.insert(s.as_str()) {
                    return Err(PipelineError::LeakageDetected { subject: s.clone(), fold: i });
                }
            }
        }
        let expected: BTreeSet<&str> = subjects.iter().map(String::as_str).collect();
        if seen != expected {
            return Err(PipelineError::Invalid("fold plan does not cover exactly the dataset subjects".into()));
        }
        let sizes: Vec<usize> = self.folds.iter().map(Vec::len).collect();
        let (lo, hi) = (sizes.iter().min(), sizes.iter().max());
        if let (Some(lo), Some(hi)) = (lo, hi) {
            if hi - lo > 1 {
                return Err(PipelineError::Invalid(format!("fold sizes {sizes:?} differ by more than 1")));
            }
        }
        Ok(())
    }
}

/// Shuffles the distinct subjects with a seeded RNG and deals them to folds
/// round-robin.
pub fn make_fold_plan(subjects: &[String], k: usize, seed: u64) -> Result<FoldPlan, PipelineError> {
    let mut unique: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if k == 0 || unique.len() < k {
        return Err(PipelineError::TooFew(format!("{} subjects for {k} folds", unique.len())));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in unique.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    Ok(FoldPlan { folds })
}

// ---------------------------------------------------------------------------
// dataset assembly

/// Trim, decompose, z-score each channel and resample to `input_len`.
/// Rows: origin, phasic, tonic.
pub fn preprocess(
    trace: &EdaTrace,
    irf: &BatemanIrf,
    cvx: &CvxedaConfig,
    input_len: usize,
) -> Result<[Vec<f64>; 3], PipelineError> {
    let trace = validate_trace(trace.clone())?;
    let trimmed = trim_head(trace, TRIM_HEAD_S)?;
    let d = decompose_lenient(&trimmed, irf, cvx)?;
    let row = |x: &[f64]| -> Result<Vec<f64>, PipelineError> { Ok(resample_linear(&zscore(x)?, input_len)?) };
    Ok([row(&d.origin)?, row(&d.phasic)?, row(&d.tonic)?])
}

/// Z-scores every feature dimension across stimuli.
pub fn standardize_stimuli(rows: &[StimulusFeatures]) -> Result<IndexMap<String, Vec<f64>>, PipelineError> {
    let Some(first) = rows.first() else {
        return Ok(IndexMap::new());
    };
    let dim = first.vector.len();
    if rows.iter().any(|r| r.vector.len() != dim) {
        return Err(PipelineError::Invalid("stimulus feature rows differ in length".into()));
    }
    let mut cols = Vec::with_capacity(dim);
    for d in 0..dim {
        let col: Vec<f64> = rows.iter().map(|r| r.vector[d]).collect();
        cols.push(zscore(&col)?);
    }
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| (r.stimulus_id.clone(), cols.iter().map(|c| c[i]).collect()))
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub irf: BatemanIrf,
    pub cvxeda: CvxedaConfig,
    pub cluster_mode: ClusterMode,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            irf: BatemanIrf::default(),
            cvxeda: CvxedaConfig::default(),
            cluster_mode: ClusterMode::Joint2d,
        }
    }
}

/// Joins traces with relabeled annotations (and standardized stimulus
/// features when given). Traces are preprocessed in parallel; the output
/// order follows the input traces.
pub fn build_examples(
    traces: &[EdaTrace],
    annotations: &[AnnotationRecord],
    stimuli: Option<&[StimulusFeatures]>,
    prep: &PrepConfig,
    input_len: usize,
) -> Result<Vec<LabeledExample>, PipelineError> {
    if traces.is_empty() {
        return Err(PipelineError::EmptySet("no traces".into()));
    }
    let labels = relabel_all(annotations, prep.cluster_mode)?;
    let music = stimuli.map(standardize_stimuli).transpose()?;
    let rows: Vec<[Vec<f64>; 3]> = traces
        .par_iter()
        .map(|t| preprocess(t, &prep.irf, &prep.cvxeda, input_len))
        .collect::<Result<_, _>>()?;
    traces
        .iter()
        .zip(rows)
        .map(|(t, channels)| {
            let key = (t.subject_id.clone(), t.stimulus_id.clone());
            let labels = *labels.get(&key).ok_or_else(|| {
                PipelineError::MissingData(format!("no annotation for {}/{}", t.subject_id, t.stimulus_id))
            })?;
            let music = match &music {
                Some(m) => Some(
                    m.get(&t.stimulus_id)
                        .ok_or_else(|| PipelineError::MissingData(format!("no stimulus features for {}", t.stimulus_id)))?
                        .clone(),
                ),
                None => None,
            };
            Ok(LabeledExample {
                channels,
                music,
                labels,
                subject_id: t.subject_id.clone(),
                stimulus_id: t.stimulus_id.clone(),
            })
        })
        .collect()
}

/// Stacks examples into `[B,3,L]` (and `[B,D]` when `with_music`).
pub fn batch_tensors(
    examples: &[&LabeledExample],
    with_music: bool,
) -> Result<(Tensor, Option<Tensor>), PipelineError> {
    let first = examples.first().ok_or_else(|| PipelineError::EmptySet("empty batch".into()))?;
    let len = first.input_len();
    let mut x = Vec::with_capacity(examples.len() * 3 * len);
    for e in examples {
        if e.input_len() != len {
            return Err(PipelineError::Invalid("examples differ in input length".into()));
        }
        for ch in &e.channels {
            x.extend_from_slice(ch);
        }
    }
    let x = Tensor::new(vec![examples.len(), 3, len], x)?;
    if !with_music {
        return Ok((x, None));
    }
    let dim = first.music.as_ref().map_or(0, Vec::len);
    let mut m = Vec::with_capacity(examples.len() * dim);
    for e in examples {
        let v = e
            .music
            .as_ref()
            .ok_or_else(|| PipelineError::MissingData(format!("no stimulus features for {}", e.stimulus_id)))?;
        if v.len() != dim {
            return Err(PipelineError::Invalid("stimulus feature lengths differ".into()));
        }
        m.extend_from_slice(v);
    }
    Ok((x, Some(Tensor::new(vec![examples.len(), dim], m)?)))
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            decay: 0.9,
            decay_every: 15,
            batch_size: 256,
            epochs: 60,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    /// A schedule that converges on small corpora with small batches.
    pub fn desk() -> Self {
        Self {
            lr0: 0.05,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(PipelineError::Invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(PipelineError::Invalid(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return Err(PipelineError::Invalid("decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi((epoch / self.decay_every) as i32)
    }
}

/// SplitMix64 finalizer, used to derive per-fold seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    /// Mean mini-batch loss of every epoch.
    pub loss_history: Vec<f64>,
    /// Loss of the untrained model on the training set.
    pub initial_loss: f64,
}

/// Mean cross-entropy of the model (eval mode) on `examples`.
pub fn mean_loss(model: &RtcanModel, examples: &[&LabeledExample], dim: AffectDim) -> Result<f64, PipelineError> {
    let with_music = model.config.music_dim > 0;
    let mut total = 0.0;
    for chunk in examples.chunks(64) {
        let (x, m) = batch_tensors(chunk, with_music)?;
        let probs = model.predict(x, m)?;
        let c = model.config.num_classes;
        for (row, e) in probs.chunks(c).zip(chunk) {
            total -= row[e.labels.get(dim)].max(1e-12).ln();
        }
    }
    Ok(total / examples.len() as f64)
}

/// Mini-batch SGD on softmax cross-entropy with a step-decayed learning rate.
/// Epoch shuffles are seeded by `(schedule.seed, fold_id)`.
pub fn train(
    model: &mut RtcanModel,
    train_set: &[&LabeledExample],
    dim: AffectDim,
    schedule: &TrainSchedule,
    fold_id: usize,
) -> Result<TrainReport, PipelineError> {
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(PipelineError::EmptySet("empty training set".into()));
    }
    let with_music = model.config.music_dim > 0;
    let initial_loss = mean_loss(model, train_set, dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(schedule.seed, fold_id as u64));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut loss_history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(schedule.batch_size) {
            let batch: Vec<&LabeledExample> = idx.iter().map(|&i| train_set[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.labels.get(dim)).collect();
            let (x, m) = batch_tensors(&batch, with_music)?;
            let mut tape = Tape::new();
            let vars = model.params.attach(&mut tape);
            let loss = {
                let mut ctx = model.train_ctx(&mut tape, &vars);
                let x = ctx.tape.constant(x);
                let m = m.map(|m| ctx.tape.constant(m));
                let out = ctx.model_forward(x, m)?;
                ctx.tape.cross_entropy(out.probs, &labels)?
            };
            tape.backward(loss)?;
            epoch_loss += tape.data(loss)[0];
            batches += 1;
            model.params.accumulate_grads(&tape, &vars)?;
            sgd_step(model.params.iter_mut(), lr)?;
        }
        let mean = epoch_loss / batches as f64;
        log::debug!("fold {fold_id} epoch {epoch}: loss {mean:.5} lr {lr:.6}");
        loss_history.push(mean);
    }
    Ok(TrainReport {
        loss_history,
        initial_loss,
    })
}

// ---------------------------------------------------------------------------
// metrics

/// Binary classification metrics with class 1 as the positive class.
/// `confusion[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: [[u64; 2]; 2],
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Self {
        let [[tn, fp], [fn_, tp]] = confusion;
        let total = tn + fp + fn_ + tp;
        let ratio = |a: u64, b: u64| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let accuracy = ratio(tn + tp, total);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            accuracy,
            precision,
            recall,
            f1,
            confusion,
        }
    }

    pub fn from_predictions(predictions: &[usize], truth: &[usize]) -> Result<Self, PipelineError> {
        if predictions.is_empty() {
            return Err(PipelineError::EmptySet("no predictions".into()));
        }
        if predictions.len() != truth.len() {
            return Err(PipelineError::Invalid("prediction and label counts differ".into()));
        }
        let mut confusion = [[0u64; 2]; 2];
        for (&p, &t) in predictions.iter().zip(truth) {
            if p > 1 || t > 1 {
                return Err(PipelineError::Invalid(format!("labels must be 0 or 1, got {t}/{p}")));
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    /// Internal consistency of the stored fields.
    pub fn is_consistent(&self) -> bool {
        let other = Self::from_confusion(self.confusion);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let f1 = if self.precision + self.recall > 0.0 {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        } else {
            0.0
        };
        close(self.accuracy, other.accuracy)
            && close(self.precision, other.precision)
            && close(self.recall, other.recall)
            && close(self.f1, f1)
            && [self.accuracy, self.precision, self.recall, self.f1]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
    }
}

/// Unweighted averages over folds plus the pooled confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pooled_confusion: [[u64; 2]; 2],
}

impl MeanMetrics {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self, PipelineError> {
        if reports.is_empty() {
            return Err(PipelineError::EmptySet("no fold reports".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let mut pooled = [[0u64; 2]; 2];
        for r in reports {
            for (i, row) in r.confusion.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    pooled[i][j] += v;
                }
            }
        }
        Ok(Self {
            accuracy: mean(|r| r.accuracy),
            precision: mean(|r| r.precision),
            recall: mean(|r| r.recall),
            f1: mean(|r| r.f1),
            pooled_confusion: pooled,
        })
    }
}

/// Argmax of each probability row; ties go to the lower class index.
pub fn argmax_rows(probs: &[f64], classes: usize) -> Vec<usize> {
    probs
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict_classes(model: &RtcanModel, examples: &[&LabeledExample]) -> Result<Vec<usize>, PipelineError> {
    let with_music = model.config.music_dim > 0;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let (x, m) = batch_tensors(chunk, with_music)?;
        let probs = model.predict(x, m)?;
        out.extend(argmax_rows(&probs, model.config.num_classes));
    }
    Ok(out)
}

pub fn evaluate(model: &RtcanModel, test_set: &[&LabeledExample], dim: AffectDim) -> Result<MetricsReport, PipelineError> {
    if test_set.is_empty() {
        return Err(PipelineError::EmptySet("empty test set".into()));
    }
    let pred = predict_classes(model, test_set)?;
    let truth: Vec<usize> = test_set.iter().map(|e| e.labels.get(dim)).collect();
    MetricsReport::from_predictions(&pred, &truth)
}

// ---------------------------------------------------------------------------
// cross-validation

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub test_examples: usize,
    pub report: MetricsReport,
    pub train: TrainReport,
    pub model: RtcanModel,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    pub mean: MeanMetrics,
}

/// Splits examples into (train, test) for one fold. Train examples are those
/// whose subject belongs to any other fold; a subject on both sides is an
/// error.
pub fn split_fold<'a>(
    examples: &'a [LabeledExample],
    plan: &FoldPlan,
    fold: usize,
) -> Result<(Vec<&'a LabeledExample>, Vec<&'a LabeledExample>), PipelineError> {
    let test: BTreeSet<&str> = plan.folds[fold].iter().map(String::as_str).collect();
    let train_subjects: BTreeSet<&str> = plan
        .folds
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != fold)
        .flat_map(|(_, f)| f.iter().map(String::as_str))
        .collect();
    if let Some(s) = test.intersection(&train_subjects).next() {
        return Err(PipelineError::LeakageDetected {
            subject: s.to_string(),
            fold,
        });
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for e in examples {
        let s = e.subject_id.as_str();
        if test.contains(s) {
            held.push(e);
        } else if train_subjects.contains(s) {
            train.push(e);
        } else {
            return Err(PipelineError::MissingData(format!("subject '{s}' is not in the fold plan")));
        }
    }
    if train.iter().any(|e| test.contains(e.subject_id.as_str())) {
        return Err(PipelineError::LeakageDetected {
            subject: train[0].subject_id.clone(),
            fold,
        });
    }
    Ok((train, held))
}

#[derive(Debug, Clone)]
pub struct CvSettings {
    pub config: RtcanConfig,
    pub schedule: TrainSchedule,
    pub dim: AffectDim,
    /// Seed for parameter initialization; each fold derives its own.
    pub init_seed: u64,
    /// Upper bound on folds trained concurrently.
    pub jobs: usize,
}

/// Subject-independent k-fold evaluation: one fresh model per fold.
pub fn cross_validate(examples: &[LabeledExample], settings: &CvSettings, plan: &FoldPlan) -> Result<CvOutcome, PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::EmptySet("empty dataset".into()));
    }
    settings.schedule.validate()?;
    settings.config.validate()?;
    // every split is checked before any training starts
    for fold in 0..plan.len() {
        split_fold(examples, plan, fold)?;
    }
    let run = |fold: usize| -> Result<FoldResult, PipelineError> {
        let (train_set, test_set) = split_fold(examples, plan, fold)?;
        if test_set.is_empty() {
            return Err(PipelineError::EmptySet(format!("fold {fold} has no test examples")));
        }
        let mut model = RtcanModel::new(settings.config.clone(), mix_seed(settings.init_seed, fold as u64))?;
        let report_train = train(&mut model, &train_set, settings.dim, &settings.schedule, fold)?;
        let report = evaluate(&model, &test_set, settings.dim)?;
        log::info!("fold {fold}: accuracy {:.4} f1 {:.4}", report.accuracy, report.f1);
        Ok(FoldResult {
            fold,
            test_subjects: plan.folds[fold].clone(),
            test_examples: test_set.len(),
            report,
            train: report_train,
            model,
        })
    };
    let folds: Vec<FoldResult> = if settings.jobs <= 1 {
        (0..plan.len()).map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build()
            .map_err(|e| PipelineError::Invalid(e.to_string()))?;
        pool.install(|| (0..plan.len()).into_par_iter().map(run).collect::<Result<_, _>>())?
    };
    let reports: Vec<MetricsReport> = folds.iter().map(|f| f.report.clone()).collect();
    let mean = MeanMetrics::from_reports(&reports)?;
    Ok(CvOutcome { folds, mean })
}

// ---------------------------------------------------------------------------
// correlation

/// Sample Pearson coefficient and the t statistic `r * sqrt((n-2)/(1-r^2))`.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<(f64, f64), PipelineError> {
    if a.len() != b.len() {
        return Err(PipelineError::Invalid(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let n = a.len();
    if n < 3 {
        return Err(PipelineError::TooFew(format!("correlation needs at least 3 pairs, got {n}")));
    }
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(PipelineError::Degenerate("constant input".into()));
    }
    let r = (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0);
    let t = if r.abs() == 1.0 {
        f64::INFINITY.copysign(r)
    } else {
        r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt()
    };
    Ok((r, t))
}

// ---------------------------------------------------------------------------
// linear SVM baseline

pub const SVM_DEFAULT_C: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    pub c: f64,
    pub epochs: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: SVM_DEFAULT_C,
            epochs: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearSvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b
    }

    /// Class 1 iff the score is strictly positive.
    pub fn predict(&self, x: &[f64]) -> usize {
        usize::from(self.score(x) > 0.0)
    }
}

fn svm_objective(model: &LinearSvm, xs: &[Vec<f64>], ys: &[f64], c: f64) -> f64 {
    let reg = 0.5 * model.w.iter().map(|w| w * w).sum::<f64>();
    let hinge: f64 = xs.iter().zip(ys).map(|(x, y)| (1.0 - y * model.score(x)).max(0.0)).sum();
    reg + c * hinge
}

/// Minimizes `0.5 |w|^2 + C * sum hinge` by full-batch subgradient descent
/// with a `1/(lambda t)` step, keeping the best iterate. The procedure is
/// deterministic and symmetric under label flips.
pub fn train_svm(xs: &[Vec<f64>], labels: &[usize], cfg: &SvmConfig) -> Result<LinearSvm, PipelineError> {
    if xs.is_empty() {
        return Err(PipelineError::EmptySet("empty SVM training set".into()));
    }
    if !(cfg.c > 0.0) {
        return Err(PipelineError::Invalid(format!("C must be positive, got {}", cfg.c)));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) || labels.len() != xs.len() {
        return Err(PipelineError::Invalid("SVM inputs have inconsistent shapes".into()));
    }
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let n = xs.len() as f64;
    // scaled objective: lambda/2 |w|^2 + mean hinge, lambda = 1/(C n)
    let lambda = 1.0 / (cfg.c * n);
    let mut model = LinearSvm { w: vec![0.0; dim], b: 0.0 };
    let mut best = model.clone();
    let mut best_obj = svm_objective(&model, xs, &ys, cfg.c);
    let mut gw = vec![0.0; dim];
    for t in 1..=cfg.epochs.max(1) {
        let eta = 1.0 / (lambda * t as f64);
        gw.iter_mut().zip(&model.w).for_each(|(g, w)| *g = lambda * w);
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            if y * model.score(x) < 1.0 {
                for (g, v) in gw.iter_mut().zip(x) {
                    *g -= y * v / n;
                }
                gb -= y / n;
            }
        }
        for (w, g) in model.w.iter_mut().zip(&gw) {
            *w -= eta * g;
        }
        model.b -= eta * gb;
        let obj = svm_objective(&model, xs, &ys, cfg.c);
        if obj < best_obj {
            best_obj = obj;
            best = model.clone();
        }
    }
    Ok(best)
}

/// Flattens origin, phasic and tonic rows into one feature vector.
pub fn mixed_features(e: &LabeledExample) -> Vec<f64> {
    e.channels.iter().flatten().copied().collect()
}

pub fn svm_baseline(
    train_set: &[&LabeledExample],
    test_set: &[&LabeledExample],
    dim: AffectDim,
    cfg: &SvmConfig,
) -> Result<MetricsReport, PipelineError> {
    if test_set.is_empty() {
        return Err(PipelineError::EmptySet("empty test set".into()));
    }
    let xs: Vec<Vec<f64>> = train_set.iter().map(|e| mixed_features(e)).collect();
    let ys: Vec<usize> = train_set.iter().map(|e| e.labels.get(dim)).collect();
    let svm = train_svm(&xs, &ys, cfg)?;
    let pred: Vec<usize> = test_set.iter().map(|e| svm.predict(&mixed_features(e))).collect();
    let truth: Vec<usize> = test_set.iter().map(|e| e.labels.get(dim)).collect();
    MetricsReport::from_predictions(&pred, &truth)
}

/// Per-fold SVM baseline over the same subject-independent plan.
pub fn svm_cross_validate(
    examples: &[LabeledExample],
    plan: &FoldPlan,
    dim: AffectDim,
    cfg: &SvmConfig,
) -> Result<(Vec<MetricsReport>, MeanMetrics), PipelineError> {
    let reports = (0..plan.len())
        .map(|fold| {
            let (train_set, test_set) = split_fold(examples, plan, fold)?;
            svm_baseline(&train_set, &test_set, dim, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = MeanMetrics::from_reports(&reports)?;
    Ok((reports, mean))
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold: usize,
    pub test_subjects: Vec<String>,
    pub test_examples: usize,
    pub metrics: MetricsReport,
    pub loss_history: Vec<f64>,
    pub checkpoint: Option<String>,
}

/// Everything needed to reproduce a run. Only `wall_clock_s` varies between
/// identical invocations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub dim: AffectDim,
    pub seed: u64,
    pub config: RtcanConfig,
    pub schedule: TrainSchedule,
    pub prep: PrepConfig,
    pub svm: Option<SvmConfig>,
    pub inputs: BTreeMap<String, String>,
    pub fold_plan: FoldPlan,
    pub folds: Vec<FoldEntry>,
    pub mean: MeanMetrics,
    pub wall_clock_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(s: &str, m: &str, v: f64, a: f64) -> AnnotationRecord {
        AnnotationRecord::new(s, m, v, a).unwrap()
    }

    fn recs(points: &[(f64, f64)]) -> Vec<AnnotationRecord> {
        points
            .iter()
            .enumerate()
            .map(|(i, &(v, a))| rec("S1", &format!("M{i}"), v, a))
            .collect()
    }

    fn classes(labels: &IndexMap<String, BinaryLabels>) -> (Vec<u8>, Vec<u8>) {
        (
            labels.values().map(|l| l.valence_class).collect(),
            labels.values().map(|l| l.arousal_class).collect(),
        )
    }

    #[test]
    fn relabel_bimodal() {
        let (labels, thr) = relabel_subject(&recs(&[(1., 1.), (1., 1.), (9., 9.), (9., 9.)]), ClusterMode::Joint2d).unwrap();
        assert_eq!((thr.valence, thr.arousal), (5.0, 5.0));
        assert_eq!(classes(&labels), (vec![0, 0, 1, 1], vec![0, 0, 1, 1]));
    }

    #[test]
    fn relabel_degenerate_falls_back() {
        let (labels, thr) = relabel_subject(&recs(&[(4., 4.); 4]), ClusterMode::Joint2d).unwrap();
        assert_eq!((thr.valence, thr.arousal), (5.0, 5.0));
        assert!(thr.valence_fallback && thr.arousal_fallback);
        assert_eq!(classes(&labels), (vec![0; 4], vec![0; 4]));
    }

    /// Best 2-partition by within-cluster sum of squares, by enumeration.
    fn exhaustive_thresholds(points: &[(f64, f64)]) -> (f64, f64) {
        let n = points.len();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for mask in 1..(1u32 << n) - 1 {
            let mut groups = [Vec::new(), Vec::new()];
            for (i, p) in points.iter().enumerate() {
                groups[((mask >> i) & 1) as usize].push(*p);
            }
            let centers: Vec<(f64, f64)> = groups
                .iter()
                .map(|g| {
                    let k = g.len() as f64;
                    (g.iter().map(|p| p.0).sum::<f64>() / k, g.iter().map(|p| p.1).sum::<f64>() / k)
                })
                .collect();
            let cost: f64 = groups
                .iter()
                .zip(&centers)
                .flat_map(|(g, c)| g.iter().map(move |p| (p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)))
                .sum();
            if cost < best.0 {
                best = (cost, (centers[0].0 + centers[1].0) / 2.0, (centers[0].1 + centers[1].1) / 2.0);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn relabel_matches_exhaustive_partition() {
        let pts = [(2., 8.), (3., 7.), (8., 2.), (7., 3.)];
        assert_eq!(exhaustive_thresholds(&pts), (5.0, 5.0));
        let (labels, thr) = relabel_subject(&recs(&pts), ClusterMode::Joint2d).unwrap();
        assert_eq!((thr.valence, thr.arousal), (5.0, 5.0));
        assert_eq!(classes(&labels), (vec![0, 0, 1, 1], vec![1, 1, 0, 0]));
    }

    #[test]
    fn relabel_needs_two_records() {
        assert!(matches!(
            relabel_subject(&recs(&[(3., 3.)]), ClusterMode::Joint2d),
            Err(PipelineError::TooFew(_))
        ));
    }

    #[test]
    fn per_dimension_mode_clusters_each_axis() {
        let pts = [(1., 5.), (2., 6.), (8., 5.5), (9., 9.)];
        let (_, thr) = relabel_subject(&recs(&pts), ClusterMode::PerDimension).unwrap();
        assert_eq!(thr.valence, 5.0);
        // arousal clusters {5, 5.5, 6} and {9}
        assert_eq!(thr.arousal, (5.5 + 9.0) / 2.0);
    }

    fn bimodal_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        let low = (1.5f64..3.5, 1.5f64..3.5);
        let high = (6.5f64..8.5, 6.5f64..8.5);
        (prop::collection::vec(low, 2..6), prop::collection::vec(high, 2..6)).prop_map(|(mut a, b)| {
            a.extend(b);
            a
        })
    }

    proptest! {
        #[test]
        fn relabel_order_invariant(pts in bimodal_points(), seed in 0u64..1000) {
            let base = recs(&pts);
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (la, ta) = relabel_subject(&base, ClusterMode::Joint2d).unwrap();
            let (lb, tb) = relabel_subject(&shuffled, ClusterMode::Joint2d).unwrap();
            prop_assert!((ta.valence - tb.valence).abs() < 1e-12);
            prop_assert!((ta.arousal - tb.arousal).abs() < 1e-12);
            for (k, v) in &la {
                prop_assert_eq!(lb[k], *v);
            }
        }

        #[test]
        fn relabel_shift_moves_thresholds(pts in bimodal_points(), delta in -0.4f64..0.4) {
            let base = recs(&pts);
            let moved: Vec<(f64, f64)> = pts.iter().map(|(v, a)| (v + delta, a + delta)).collect();
            let (la, ta) = relabel_subject(&base, ClusterMode::Joint2d).unwrap();
            let (lb, tb) = relabel_subject(&recs(&moved), ClusterMode::Joint2d).unwrap();
            prop_assert!((tb.valence - ta.valence - delta).abs() < 1e-9);
            prop_assert!((tb.arousal - ta.arousal - delta).abs() < 1e-9);
            prop_assert_eq!(la, lb);
        }

        #[test]
        fn fold_plan_invariants(n in 10usize..60, k in 2usize..11, seed in 0u64..50) {
            let subjects: Vec<String> = (0..n).map(|i| format!("S{i}")).collect();
            let plan = make_fold_plan(&subjects, k, seed).unwrap();
            prop_assert_eq!(plan.len(), k);
            prop_assert!(plan.validate(&subjects).is_ok());
        }

        #[test]
        fn lr_closed_form(e in 0usize..500) {
            let s = TrainSchedule::default();
            prop_assert_eq!(s.lr_at(e), 0.001 * 0.9f64.powi((e / 15) as i32));
        }

        #[test]
        fn metrics_consistent(pred in prop::collection::vec(0usize..2, 1..40), seed in 0u64..100) {
            let mut truth = pred.clone();
            truth.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let r = MetricsReport::from_predictions(&pred, &truth).unwrap();
            prop_assert!(r.is_consistent());
        }
    }

    #[test]
    fn fold_sizes() {
        let subjects: Vec<String> = (0..20).map(|i| format!("S{i}")).collect();
        let plan = make_fold_plan(&subjects, 10, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));

        let subjects: Vec<String> = (0..23).map(|i| format!("S{i}")).collect();
        let plan = make_fold_plan(&subjects, 10, 1).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(plan, make_fold_plan(&subjects, 10, 1).unwrap());
        assert_ne!(plan, make_fold_plan(&subjects, 10, 2).unwrap());
        assert!(matches!(make_fold_plan(&subjects[..5], 10, 0), Err(PipelineError::TooFew(_))));
    }

    #[test]
    fn lr_schedule_values() {
        let s = TrainSchedule::default();
        assert_eq!(s.lr_at(0), 0.001);
        assert!((s.lr_at(14) - 0.001).abs() < 1e-18);
        assert!((s.lr_at(15) - 0.0009).abs() < 1e-15);
        assert!((s.lr_at(30) - 0.00081).abs() < 1e-15);
        assert_eq!(s.batch_size, 256);
    }

    #[test]
    fn metrics_examples() {
        let r = MetricsReport::from_predictions(&[1, 0, 1, 1], &[1, 0, 1, 1]).unwrap();
        assert_eq!((r.accuracy, r.f1), (1.0, 1.0));

        // TP=2, FP=1, FN=1, TN=0
        let r = MetricsReport::from_confusion([[0, 1], [1, 2]]);
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.is_consistent());

        let r = MetricsReport::from_predictions(&[1, 1, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        let r = MetricsReport::from_predictions(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap();
        assert_eq!((r.accuracy, r.precision, r.f1), (0.5, 0.0, 0.0));
        assert!(matches!(MetricsReport::from_predictions(&[], &[]), Err(PipelineError::EmptySet(_))));
    }

    #[test]
    fn argmax_ties_go_to_class_zero() {
        assert_eq!(argmax_rows(&[0.5, 0.5, 0.2, 0.8, 0.9, 0.1], 2), vec![0, 1, 0]);
    }

    #[test]
    fn pearson_examples() {
        let a = [1.0, 2.0, 3.0, 4.5];
        assert!((pearson_r(&a, &a).unwrap().0 - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_r(&a, &neg).unwrap().0 + 1.0).abs() < 1e-15);
        let (r, t) = pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        // r = 1.5 / sqrt(2 * 4.6667)
        assert!((r - 0.981_980_506_061_965_7).abs() < 1e-12, "{r}");
        assert!((t - r * (1.0 / (1.0 - r * r)).sqrt()).abs() < 1e-12);
        assert!(matches!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(PipelineError::Degenerate(_))));
        assert!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    fn clouds(n: usize, seed: u64, flip: bool) -> (Vec<Vec<f64>>, Vec<usize>) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 1 { 2.0 } else { -2.0 };
            xs.push((0..4).map(|_| centre + rng.gen_range(-0.5..0.5)).collect());
            ys.push(if flip { 1 - y } else { y });
        }
        (xs, ys)
    }

    #[test]
    fn svm_separates_margin_clouds() {
        let (xs, ys) = clouds(40, 1, false);
        let svm = train_svm(&xs, &ys, &SvmConfig::default()).unwrap();
        let (tx, ty) = clouds(40, 2, false);
        let pred: Vec<usize> = tx.iter().map(|x| svm.predict(x)).collect();
        assert_eq!(MetricsReport::from_predictions(&pred, &ty).unwrap().accuracy, 1.0);
        assert_eq!(SvmConfig::default().c, 0.25);
    }

    #[test]
    fn svm_label_flip_complements_predictions() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<usize> = xs.iter().map(|x| usize::from(x[0] + 0.3 * x[1] + rng.gen_range(-0.4..0.4) > 0.0)).collect();
        let flipped: Vec<usize> = ys.iter().map(|y| 1 - y).collect();
        let a = train_svm(&xs, &ys, &SvmConfig::default()).unwrap();
        let b = train_svm(&xs, &flipped, &SvmConfig::default()).unwrap();
        let test: Vec<Vec<f64>> = (0..50).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        for x in &test {
            assert_eq!(a.predict(x), 1 - b.predict(x));
        }
    }

    fn example(subject: &str, label: u8) -> LabeledExample {
        LabeledExample {
            channels: [vec![0.0; 6], vec![0.0; 6], vec![0.0; 6]],
            music: None,
            labels: BinaryLabels {
                valence_class: label,
                arousal_class: label,
            },
            subject_id: subject.into(),
            stimulus_id: "M0".into(),
        }
    }

    #[test]
    fn split_detects_leakage_and_covers_examples() {
        let subjects: Vec<String> = (0..10).map(|i| format!("S{i}")).collect();
        let examples: Vec<LabeledExample> = subjects.iter().flat_map(|s| [example(s, 0), example(s, 1)]).collect();
        let plan = make_fold_plan(&subjects, 5, 0).unwrap();
        let mut seen = 0;
        for f in 0..plan.len() {
            let (train, test) = split_fold(&examples, &plan, f).unwrap();
            assert_eq!(train.len() + test.len(), examples.len());
            seen += test.len();
        }
        assert_eq!(seen, examples.len());

        let mut bad = plan.clone();
        let moved = bad.folds[0][0].clone();
        bad.folds[1].push(moved);
        assert!(matches!(split_fold(&examples, &bad, 0), Err(PipelineError::LeakageDetected { .. })));
        assert!(matches!(bad.validate(&subjects), Err(PipelineError::LeakageDetected { .. })));
    }
}
