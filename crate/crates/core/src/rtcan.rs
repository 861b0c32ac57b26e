//! The RTCAN-1D network: convolutional stem, temporal clipping, shared channel
//! (SCA) and non-local temporal (RNTA) attention, a small residual feature
//! extractor and the fusion classifier.
//!
//! Parameters live in a [`ParamSet`]; batchnorm running statistics live in a
//! separate buffer map. A forward pass runs through a [`Ctx`] that borrows the
//! tape, the attached parameter handles and the buffers.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::tensor::{
    BatchNormMode, ParamSet, ParamVars, RunningStats, Tape, Tensor, TensorError, TensorRecord, Var,
    CHECKPOINT_FORMAT,
};

pub const NUM_CLIPS: usize = 3;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const INIT_STD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RtcanError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length {len} is not divisible into {parts} clips")]
    NotDivisible { len: usize, parts: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionOrder {
    ScaThenRnta,
    RntaThenSca,
    Parallel,
    ScaOnly,
    RntaOnly,
    None,
}

impl AttentionOrder {
    pub const ALL: [AttentionOrder; 6] = [
        AttentionOrder::None,
        AttentionOrder::ScaOnly,
        AttentionOrder::RntaOnly,
        AttentionOrder::ScaThenRnta,
        AttentionOrder::RntaThenSca,
        AttentionOrder::Parallel,
    ];

    pub fn uses_sca(self) -> bool {
        !matches!(self, AttentionOrder::RntaOnly | AttentionOrder::None)
    }

    pub fn uses_rnta(self) -> bool {
        !matches!(self, AttentionOrder::ScaOnly | AttentionOrder::None)
    }
}

/// The two dataset regimes: music-annotated corpora use SCA gates inside the
/// residual blocks plus stimulus fusion, the small corpora are EDA-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    LargeScale,
    SmallScale,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "large-scale" | "large" => Ok(Profile::LargeScale),
            "small-scale" | "small" => Ok(Profile::SmallScale),
            other => Err(format!("unknown profile '{other}' (expected large-scale or small-scale)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RtcanConfig {
    pub input_len: usize,
    pub stem_out_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub num_clips: usize,
    pub reduction_ratio: usize,
    pub attention_order: AttentionOrder,
    pub rnta_pool_stride: usize,
    pub rfe_depth: usize,
    pub rfe_channels: Vec<usize>,
    pub sca_in_resblock: bool,
    pub music_dim: usize,
    pub classifier_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for RtcanConfig {
    fn default() -> Self {
        Self {
            input_len: 1200,
            stem_out_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            num_clips: NUM_CLIPS,
            reduction_ratio: 4,
            attention_order: AttentionOrder::ScaThenRnta,
            rnta_pool_stride: 2,
            rfe_depth: 1,
            rfe_channels: vec![64, 64, 64, 64],
            sca_in_resblock: true,
            music_dim: 0,
            classifier_hidden: vec![256, 128],
            num_classes: 2,
        }
    }
}

impl RtcanConfig {
    /// Full-size configuration for a profile.
    pub fn for_profile(profile: Profile, music_dim: usize) -> Self {
        let mut cfg = Self::default();
        cfg.apply_profile(profile, music_dim);
        cfg
    }

    /// A reduced configuration that trains in minutes on one CPU core.
    pub fn desk(profile: Profile, music_dim: usize) -> Self {
        let mut cfg = Self {
            input_len: 192,
            stem_out_channels: 8,
            rfe_channels: vec![8, 8, 8, 8],
            ..Self::default()
        };
        cfg.apply_profile(profile, music_dim);
        cfg
    }

    pub fn apply_profile(&mut self, profile: Profile, music_dim: usize) {
        match profile {
            Profile::LargeScale => {
                self.sca_in_resblock = true;
                self.music_dim = music_dim;
            }
            Profile::SmallScale => {
                self.sca_in_resblock = false;
                self.music_dim = 0;
            }
        }
    }

    pub fn pad(&self) -> usize {
        self.stem_kernel / 2
    }

    /// Length after the stem convolution.
    pub fn stem_len(&self) -> usize {
        let padded = self.input_len + 2 * self.pad();
        if padded < self.stem_kernel || self.stem_stride == 0 {
            return 0;
        }
        (padded - self.stem_kernel) / self.stem_stride + 1
    }

    pub fn clip_len(&self) -> usize {
        self.stem_len() / self.num_clips.max(1)
    }

    pub fn feature_dim(&self) -> usize {
        self.rfe_channels.last().copied().unwrap_or(0)
    }

    /// Time lengths entering each residual level and after the last one.
    pub fn rfe_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.stem_len()];
        for level in 1..4 {
            let prev = lens[level - 1];
            lens.push(prev.div_ceil(2));
        }
        lens
    }

    pub fn validate(&self) -> Result<(), RtcanError> {
        let bad = |m: String| Err(RtcanError::Config(m));
        if self.num_clips != NUM_CLIPS {
            return bad(format!("num_clips must be {NUM_CLIPS}, got {}", self.num_clips));
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.stem_out_channels == 0 {
            return bad("stem kernel, stride and channels must be positive".into());
        }
        if self.rfe_channels.len() != 4 || self.rfe_channels.contains(&0) {
            return bad(format!("rfe_channels must be 4 positive ints, got {:?}", self.rfe_channels));
        }
        if self.rfe_depth == 0 {
            return bad("rfe_depth must be at least 1".into());
        }
        if self.classifier_hidden.len() != 2 || self.classifier_hidden.contains(&0) {
            return bad(format!("classifier_hidden must be 2 positive ints, got {:?}", self.classifier_hidden));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.reduction_ratio == 0 || self.rnta_pool_stride == 0 {
            return bad("reduction_ratio and rnta_pool_stride must be positive".into());
        }
        let l1 = self.stem_len();
        if l1 == 0 || !l1.is_multiple_of(self.num_clips) {
            return bad(format!(
                "stem output length {l1} (input_len {}) is not divisible by {}",
                self.input_len, self.num_clips
            ));
        }
        let c = self.stem_out_channels;
        let r = self.reduction_ratio;
        if self.attention_order.uses_sca() && (!c.is_multiple_of(r) || c < r) {
            return bad(format!("stem channels {c} not divisible by reduction ratio {r}"));
        }
        if self.attention_order.uses_rnta() {
            if c < 2 || !c.is_multiple_of(2) {
                return bad(format!("RNTA needs an even channel count, got {c}"));
            }
            if self.clip_len() < self.rnta_pool_stride {
                return bad(format!(
                    "clip length {} shorter than pool stride {}",
                    self.clip_len(),
                    self.rnta_pool_stride
                ));
            }
        }
        if self.sca_in_resblock {
            for (level, cin) in self.rfe_inputs().into_iter().enumerate() {
                for ch in cin {
                    if ch % r != 0 || ch < r {
                        return bad(format!("level {level} gate channels {ch} not divisible by {r}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Input channel count of every repetition, per level.
    fn rfe_inputs(&self) -> Vec<Vec<usize>> {
        (0..4)
            .map(|level| {
                let cin = if level == 0 { self.stem_out_channels } else { self.rfe_channels[level - 1] };
                (0..self.rfe_depth)
                    .map(|rep| if rep == 0 { cin } else { self.rfe_channels[level] })
                    .collect()
            })
            .collect()
    }
}

pub type Buffers = IndexMap<String, RunningStats>;

#[derive(Debug, Clone)]
pub struct RtcanModel {
    pub config: RtcanConfig,
    pub params: ParamSet,
    pub buffers: Buffers,
}

struct Init<'a> {
    params: &'a mut ParamSet,
    buffers: &'a mut Buffers,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn gaussian(&mut self, name: String, shape: &[usize]) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.params.insert(name, Tensor::new(shape.to_vec(), data).expect("shape matches"));
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) {
        self.params.insert(name, Tensor::full(shape, value));
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.gaussian(format!("{name}.w"), &[cout, cin, k]);
        self.constant(format!("{name}.b"), &[cout], 0.0);
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) {
        self.gaussian(format!("{name}.w"), &[fin, fout]);
        self.constant(format!("{name}.b"), &[fout], 0.0);
    }

    fn bn(&mut self, name: &str, c: usize, gamma: f64) {
        self.constant(format!("{name}.gamma"), &[c], gamma);
        self.constant(format!("{name}.beta"), &[c], 0.0);
        self.buffers.insert(name.to_string(), RunningStats::new(c));
    }

    fn sca(&mut self, name: &str, c: usize, r: usize) {
        self.dense(&format!("{name}.w0"), c, c / r);
        self.dense(&format!("{name}.w1"), c / r, c);
    }
}

impl RtcanModel {
    /// Gaussian weights (std 0.01), zero biases, unit batchnorm scales except
    /// the RNTA output batchnorm, whose scale starts at 0.
    pub fn new(config: RtcanConfig, seed: u64) -> Result<Self, RtcanError> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut buffers = Buffers::new();
        let mut init = Init {
            params: &mut params,
            buffers: &mut buffers,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let c = config.stem_out_channels;
        let r = config.reduction_ratio;
        init.conv("stem.conv", c, 3, config.stem_kernel);
        init.bn("stem.bn", c, 1.0);
        if config.attention_order.uses_sca() {
            init.sca("sca", c, r);
        }
        if config.attention_order.uses_rnta() {
            let h = c / 2;
            init.conv("rnta.theta", h, c, 1);
            init.conv("rnta.phi", h, c, 1);
            init.conv("rnta.g", h, c, 1);
            init.conv("rnta.ww", c, h, 1);
            init.bn("rnta.bn", c, 0.0);
        }
        for (level, reps) in config.rfe_inputs().into_iter().enumerate() {
            let cout = config.rfe_channels[level];
            for (rep, cin) in reps.into_iter().enumerate() {
                let p = format!("rfe.{level}.{rep}");
                if config.sca_in_resblock {
                    init.sca(&format!("{p}.sca"), cin, r);
                }
                init.conv(&format!("{p}.conv"), cout, cin, 3);
                init.bn(&format!("{p}.bn"), cout, 1.0);
            }
            let cin = if level == 0 { c } else { config.rfe_channels[level - 1] };
            if cin != cout || level > 0 {
                init.conv(&format!("rfe.{level}.skip"), cout, cin, 1);
            }
        }
        let mut fin = config.feature_dim() + config.music_dim;
        for (i, &h) in config.classifier_hidden.iter().enumerate() {
            init.dense(&format!("cls.{i}"), fin, h);
            fin = h;
        }
        init.dense(&format!("cls.{}", config.classifier_hidden.len()), fin, config.num_classes);
        Ok(Self { config, params, buffers })
    }

    /// Sets the shared SCA gate so every channel weight is exactly 1.
    pub fn sca_identity_init(&mut self) {
        for name in ["sca.w0.w", "sca.w0.b", "sca.w1.w"] {
            if let Some(t) = self.params.get_mut(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if let Some(t) = self.params.get_mut("sca.w1.b") {
            // sigmoid(40) rounds to 1.0 in f64
            t.data_mut().iter_mut().for_each(|v| *v = 40.0);
        }
    }

    pub fn train_ctx<'a>(&'a mut self, tape: &'a mut Tape, vars: &'a ParamVars) -> Ctx<'a> {
        Ctx {
            tape,
            cfg: &self.config,
            vars,
            phase: Phase::Train(&mut self.buffers),
        }
    }

    pub fn eval_ctx<'a>(&'a self, tape: &'a mut Tape, vars: &'a ParamVars) -> Ctx<'a> {
        Ctx {
            tape,
            cfg: &self.config,
            vars,
            phase: Phase::Eval(&self.buffers),
        }
    }

    /// Eval-mode class probabilities for a batch, `[B, num_classes]` row-major.
    pub fn predict(&self, x: Tensor, music: Option<Tensor>) -> Result<Vec<f64>, RtcanError> {
        let mut tape = Tape::new();
        let vars = self.params.attach(&mut tape);
        let mut ctx = self.eval_ctx(&mut tape, &vars);
        let x = ctx.tape.constant(x);
        let music = music.map(|m| ctx.tape.constant(m));
        let out = ctx.model_forward(x, music)?;
        Ok(tape.data(out.probs).to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            params: self.params.to_records(),
            buffers: self.buffers.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, RtcanError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(RtcanError::Checkpoint(format!("unsupported format '{}'", ck.format)));
        }
        let mut model = Self::new(ck.config, 0)?;
        model.params.load_records(&ck.params)?;
        for (name, stats) in model.buffers.iter_mut() {
            let saved = ck
                .buffers
                .get(name)
                .ok_or_else(|| RtcanError::Checkpoint(format!("missing buffer '{name}'")))?;
            if saved.mean.len() != stats.mean.len() || saved.var.len() != stats.var.len() {
                return Err(RtcanError::Checkpoint(format!("buffer '{name}' has the wrong size")));
            }
            *stats = saved.clone();
        }
        if let Some(extra) = ck.buffers.keys().find(|k| !model.buffers.contains_key(*k)) {
            return Err(RtcanError::Checkpoint(format!("unexpected buffer '{extra}'")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), RtcanError> {
        let file = io::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_checkpoint())
            .map_err(|e| RtcanError::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, RtcanError> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            RtcanError::Io(IoError::File {
                path: path.display().to_string(),
                source,
            })
        })?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| RtcanError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }
}

/// Self-describing model file: parameter tensors plus the config and the
/// batchnorm running statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: RtcanConfig,
    pub params: IndexMap<String, TensorRecord>,
    pub buffers: Buffers,
}

pub enum Phase<'a> {
    Train(&'a mut Buffers),
    Eval(&'a Buffers),
}

/// Intermediate outputs recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Taps {
    /// Shared SCA output, one entry per clip.
    pub sca_out: Vec<Var>,
    /// Shared RNTA output, one entry per clip.
    pub rnta_out: Vec<Var>,
    /// RNTA affinity matrices `[B, T, T']`, one per clip.
    pub affinity: Vec<Var>,
    pub attention_out: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    pub probs: Var,
    pub features: Var,
    pub taps: Taps,
}

pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    cfg: &'a RtcanConfig,
    vars: &'a ParamVars,
    phase: Phase<'a>,
}

impl Ctx<'_> {
    pub fn config(&self) -> &RtcanConfig {
        self.cfg
    }

    fn p(&self, name: &str) -> Result<Var, RtcanError> {
        Ok(self.vars.get(name)?)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var, RtcanError> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.tape.conv1d(x, w, b, stride, pad)?)
    }

    fn dense(&mut self, name: &str, x: Var) -> Result<Var, RtcanError> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        Ok(self.tape.dense(x, w, b)?)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var, RtcanError> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let missing = || RtcanError::Checkpoint(format!("missing batchnorm buffer '{name}'"));
        let mode = match &mut self.phase {
            Phase::Train(buf) => BatchNormMode::Train {
                stats: buf.get_mut(name).ok_or_else(missing)?,
                momentum: BN_MOMENTUM,
            },
            Phase::Eval(buf) => BatchNormMode::Eval {
                stats: buf.get(name).ok_or_else(missing)?,
            },
        };
        Ok(self.tape.batchnorm1d(x, gamma, beta, mode, BN_EPS)?)
    }

    fn dims3(&self, x: Var, what: &str) -> Result<(usize, usize, usize), RtcanError> {
        match self.tape.shape(x) {
            &[a, b, c] => Ok((a, b, c)),
            s => Err(RtcanError::ShapeMismatch(format!("{what} expects [B,C,T], got {s:?}"))),
        }
    }

    /// Stem: conv1d + batchnorm + relu, `[B,3,L] -> [B,C,L1]`.
    pub fn shallow_feature(&mut self, x: Var) -> Result<Var, RtcanError> {
        let (_, c, l) = self.dims3(x, "shallow_feature")?;
        if c != 3 || l != self.cfg.input_len {
            return Err(RtcanError::ShapeMismatch(format!(
                "input must be [B,3,{}], got {:?}",
                self.cfg.input_len,
                self.tape.shape(x)
            )));
        }
        let h = self.conv("stem.conv", x, self.cfg.stem_stride, self.cfg.pad())?;
        let h = self.bn("stem.bn", h)?;
        Ok(self.tape.relu(h)?)
    }

    pub fn clip_temporal(&mut self, f: Var) -> Result<Vec<Var>, RtcanError> {
        let (_, _, len) = self.dims3(f, "clip_temporal")?;
        clip_temporal(self.tape, f, len, self.cfg.num_clips)
    }

    /// Squeeze-and-excitation gate with the shared block parameters.
    pub fn sca_forward(&mut self, clip: Var) -> Result<Var, RtcanError> {
        self.sca_with("sca", clip)
    }

    /// Channel weights in (0, 1), shape `[B, C]`.
    pub fn sca_weights(&mut self, prefix: &str, x: Var) -> Result<Var, RtcanError> {
        let (b, c, t) = self.dims3(x, "sca")?;
        let r = self.cfg.reduction_ratio;
        if c % r != 0 || c < r {
            return Err(RtcanError::ShapeMismatch(format!("sca: {c} channels with reduction ratio {r}")));
        }
        let pooled = self.tape.avgpool1d(x, t, t)?;
        let squeeze = self.tape.reshape(pooled, &[b, c])?;
        let h = self.dense(&format!("{prefix}.w0"), squeeze)?;
        let h = self.tape.relu(h)?;
        let h = self.dense(&format!("{prefix}.w1"), h)?;
        Ok(self.tape.sigmoid(h)?)
    }

    fn sca_with(&mut self, prefix: &str, x: Var) -> Result<Var, RtcanError> {
        let w = self.sca_weights(prefix, x)?;
        Ok(self.tape.channel_scale(x, w)?)
    }

    /// Non-local block with a residual connection. Returns the output and the
    /// affinity matrix.
    pub fn rnta_forward(&mut self, clip: Var) -> Result<(Var, Var), RtcanError> {
        let (_, c, t) = self.dims3(clip, "rnta")?;
        let s = self.cfg.rnta_pool_stride;
        if t < s || c < 2 || c % 2 != 0 {
            return Err(RtcanError::ShapeMismatch(format!("rnta: {c} channels, length {t}, pool stride {s}")));
        }
        let theta = self.conv("rnta.theta", clip, 1, 0)?;
        let phi = self.conv("rnta.phi", clip, 1, 0)?;
        let g = self.conv("rnta.g", clip, 1, 0)?;
        let phi = self.tape.avgpool1d(phi, s, s)?;
        let g = self.tape.avgpool1d(g, s, s)?;
        let theta_t = self.tape.swap_last(theta)?;
        let scores = self.tape.matmul_batched(theta_t, phi)?;
        let affinity = self.tape.softmax(scores)?;
        let g_t = self.tape.swap_last(g)?;
        let attended = self.tape.matmul_batched(affinity, g_t)?;
        let attended = self.tape.swap_last(attended)?;
        let proj = self.conv("rnta.ww", attended, 1, 0)?;
        let proj = self.bn("rnta.bn", proj)?;
        Ok((self.tape.add(proj, clip)?, affinity))
    }

    /// Applies the configured attention arrangement to every clip and
    /// re-concatenates them in order.
    pub fn attention_block(&mut self, clips: &[Var], taps: &mut Taps) -> Result<Var, RtcanError> {
        let mut outs = Vec::with_capacity(clips.len());
        for &clip in clips {
            let out = match self.cfg.attention_order {
                AttentionOrder::None => clip,
                AttentionOrder::ScaOnly => {
                    let s = self.sca_forward(clip)?;
                    taps.sca_out.push(s);
                    s
                }
                AttentionOrder::RntaOnly => {
                    let (r, a) = self.rnta_forward(clip)?;
                    taps.rnta_out.push(r);
                    taps.affinity.push(a);
                    r
                }
                AttentionOrder::ScaThenRnta => {
                    let s = self.sca_forward(clip)?;
                    let (r, a) = self.rnta_forward(s)?;
                    taps.sca_out.push(s);
                    taps.rnta_out.push(r);
                    taps.affinity.push(a);
                    r
                }
                AttentionOrder::RntaThenSca => {
                    let (r, a) = self.rnta_forward(clip)?;
                    let s = self.sca_forward(r)?;
                    taps.rnta_out.push(r);
                    taps.affinity.push(a);
                    taps.sca_out.push(s);
                    s
                }
                AttentionOrder::Parallel => {
                    let s = self.sca_forward(clip)?;
                    let (r, a) = self.rnta_forward(clip)?;
                    taps.sca_out.push(s);
                    taps.rnta_out.push(r);
                    taps.affinity.push(a);
                    let sum = self.tape.add(s, r)?;
                    let gate = self.tape.sigmoid(sum)?;
                    self.tape.mul(clip, gate)?
                }
            };
            outs.push(out);
        }
        let joined = if outs.len() == 1 { outs[0] } else { self.tape.concat(&outs, 2)? };
        taps.attention_out = Some(joined);
        Ok(joined)
    }

    /// Residual feature extractor followed by global average pooling, `[B,C,L1] -> [B,F]`.
    pub fn rfe_forward(&mut self, f: Var) -> Result<Var, RtcanError> {
        let (_, c, _) = self.dims3(f, "rfe")?;
        if c != self.cfg.stem_out_channels {
            return Err(RtcanError::ShapeMismatch(format!(
                "rfe expects {} channels, got {c}",
                self.cfg.stem_out_channels
            )));
        }
        let mut x = f;
        for level in 0..4 {
            let stride = if level == 0 { 1 } else { 2 };
            let mut h = x;
            for rep in 0..self.cfg.rfe_depth {
                let p = format!("rfe.{level}.{rep}");
                if self.cfg.sca_in_resblock {
                    h = self.sca_with(&format!("{p}.sca"), h)?;
                }
                h = self.conv(&format!("{p}.conv"), h, if rep == 0 { stride } else { 1 }, 1)?;
                h = self.bn(&format!("{p}.bn"), h)?;
                h = self.tape.relu(h)?;
            }
            let skip_name = format!("rfe.{level}.skip");
            let skip = if self.vars.get(&format!("{skip_name}.w")).is_ok() {
                self.conv(&skip_name, x, stride, 0)?
            } else {
                x
            };
            x = self.tape.add(h, skip)?;
        }
        let (b, c, t) = self.dims3(x, "rfe output")?;
        let pooled = self.tape.avgpool1d(x, t, t)?;
        Ok(self.tape.reshape(pooled, &[b, c])?)
    }

    /// Concatenates stimulus features and runs the dense head. Returns logits.
    pub fn classify_logits(&mut self, f_ef: Var, f_mf: Option<Var>) -> Result<Var, RtcanError> {
        let b = match self.tape.shape(f_ef) {
            &[b, f] if f == self.cfg.feature_dim() => b,
            s => return Err(RtcanError::ShapeMismatch(format!("classifier expects [B,{}], got {s:?}", self.cfg.feature_dim()))),
        };
        let fused = match (f_mf, self.cfg.music_dim) {
            (None, 0) => f_ef,
            (Some(m), d) if d > 0 && self.tape.shape(m) == [b, d] => self.tape.concat(&[f_ef, m], 1)?,
            (m, d) => {
                return Err(RtcanError::ShapeMismatch(format!(
                    "stimulus features {:?} for music_dim {d}",
                    m.map(|m| self.tape.shape(m).to_vec())
                )))
            }
        };
        let mut h = fused;
        let hidden = self.cfg.classifier_hidden.len();
        for i in 0..hidden {
            h = self.dense(&format!("cls.{i}"), h)?;
            h = self.tape.relu(h)?;
        }
        self.dense(&format!("cls.{hidden}"), h)
    }

    /// Softmax class probabilities from the fused features.
    pub fn classify_fused(&mut self, f_ef: Var, f_mf: Option<Var>) -> Result<Var, RtcanError> {
        let logits = self.classify_logits(f_ef, f_mf)?;
        Ok(self.tape.softmax(logits)?)
    }

    pub fn model_forward(&mut self, x: Var, f_mf: Option<Var>) -> Result<Forward, RtcanError> {
        let f = self.shallow_feature(x)?;
        let clips = self.clip_temporal(f)?;
        let mut taps = Taps::default();
        let a = self.attention_block(&clips, &mut taps)?;
        let features = self.rfe_forward(a)?;
        let logits = self.classify_logits(features, f_mf)?;
        let probs = self.tape.softmax(logits)?;
        Ok(Forward {
            logits,
            probs,
            features,
            taps,
        })
    }
}

/// Splits `[B,C,L]` into `parts` contiguous equal segments along time.
pub fn clip_temporal(tape: &mut Tape, f: Var, len: usize, parts: usize) -> Result<Vec<Var>, RtcanError> {
    if parts == 0 || !len.is_multiple_of(parts) || len == 0 {
        return Err(RtcanError::NotDivisible { len, parts });
    }
    let seg = len / parts;
    (0..parts)
        .map(|i| Ok(tape.narrow(f, 2, i * seg, seg)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_multi;
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny(order: AttentionOrder) -> RtcanConfig {
        RtcanConfig {
            input_len: 24,
            stem_out_channels: 4,
            stem_kernel: 3,
            stem_stride: 1,
            reduction_ratio: 2,
            attention_order: order,
            rfe_channels: vec![4, 4, 4, 4],
            classifier_hidden: vec![6, 5],
            ..RtcanConfig::default()
        }
    }

    #[test]
    fn default_config_lengths() {
        let cfg = RtcanConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stem_len(), 600);
        assert_eq!(cfg.clip_len(), 200);
        assert_eq!(cfg.rfe_lengths(), vec![600, 300, 150, 75]);
        assert_eq!(cfg.stem_out_channels, 64);
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = RtcanConfig {
            input_len: 1202,
            ..RtcanConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(RtcanError::Config(_))));
        let cfg = RtcanConfig {
            rfe_channels: vec![64, 64, 64],
            ..RtcanConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = RtcanConfig {
            num_clips: 4,
            ..RtcanConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(serde_json::from_str::<RtcanConfig>(r#"{"input_len": 24, "bogus": 1}"#).is_err());
        let cfg: RtcanConfig = serde_json::from_str(r#"{"attention_order": "rnta_then_sca"}"#).unwrap();
        assert_eq!(cfg.attention_order, AttentionOrder::RntaThenSca);
    }

    #[test]
    fn stem_output_shape_and_zero_case() {
        let mut model = RtcanModel::new(RtcanConfig::default(), 1).unwrap();
        for name in ["stem.conv.b", "stem.bn.beta"] {
            assert!(model.params.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
        let mut tape = Tape::new();
        let vars = model.params.attach(&mut tape);
        let mut ctx = model.train_ctx(&mut tape, &vars);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 3, 1200]));
        let f = ctx.shallow_feature(x).unwrap();
        assert_eq!(ctx.tape.shape(f), &[1, 64, 600]);
        assert!(ctx.tape.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clips_partition_exactly() {
        let mut tape = Tape::new();
        let f = tape.constant(random(&[2, 4, 600], 3));
        let clips = clip_temporal(&mut tape, f, 600, 3).unwrap();
        assert!(clips.iter().all(|c| tape.shape(*c) == [2, 4, 200]));
        let joined = tape.concat(&clips, 2).unwrap();
        assert_eq!(tape.data(joined), tape.data(f));

        let g = tape.constant(Tensor::zeros(&[1, 1, 601]));
        assert!(matches!(
            clip_temporal(&mut tape, g, 601, 3),
            Err(RtcanError::NotDivisible { len: 601, parts: 3 })
        ));
    }

    fn ctx_for(model: &RtcanModel) -> (Tape, ParamVars) {
        let mut tape = Tape::new();
        let vars = model.params.attach(&mut tape);
        (tape, vars)
    }

    #[test]
    fn sca_zero_weights_halve_input() {
        let mut model = RtcanModel::new(tiny(AttentionOrder::ScaOnly), 0).unwrap();
        for name in ["sca.w0.w", "sca.w1.w"] {
            model.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let xt = random(&[2, 4, 8], 5);
        let x = ctx.tape.constant(xt.clone());
        let y = ctx.sca_forward(x).unwrap();
        for (a, b) in ctx.tape.data(y).iter().zip(xt.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn sca_weights_bounded_and_squeeze_of_constants() {
        let model = RtcanModel::new(tiny(AttentionOrder::ScaOnly), 9).unwrap();
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let x = ctx.tape.constant(random(&[3, 4, 8], 2).with_grad(false));
        let w = ctx.sca_weights("sca", x).unwrap();
        assert!(ctx.tape.data(w).iter().all(|&v| v > 0.0 && v < 1.0));

        let consts = [0.5, -2.0, 3.0, 1.25];
        let data: Vec<f64> = consts.iter().flat_map(|&c| std::iter::repeat_n(c, 6)).collect();
        let x = ctx.tape.constant(Tensor::new(vec![1, 4, 6], data).unwrap());
        let pooled = ctx.tape.avgpool1d(x, 6, 6).unwrap();
        assert_eq!(ctx.tape.data(pooled), &consts);
    }

    #[test]
    fn rnta_identity_at_init_and_affinity_rows() {
        let model = RtcanModel::new(tiny(AttentionOrder::RntaOnly), 4).unwrap();
        assert!(model.params.get("rnta.bn.gamma").unwrap().data().iter().all(|&v| v == 0.0));
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let xt = random(&[2, 4, 8], 11);
        let x = ctx.tape.constant(xt.clone());
        let (y, a) = ctx.rnta_forward(x).unwrap();
        assert_eq!(ctx.tape.data(y), xt.data());
        assert_eq!(ctx.tape.shape(a), &[2, 8, 4]);
        for row in ctx.tape.data(a).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rnta_constant_in_time_stays_constant() {
        let mut model = RtcanModel::new(tiny(AttentionOrder::RntaOnly), 4).unwrap();
        model.params.get_mut("rnta.bn.gamma").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.7);
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let data: Vec<f64> = [0.3, -1.0, 2.0, 0.1].iter().flat_map(|&c| std::iter::repeat_n(c, 8)).collect();
        let x = ctx.tape.constant(Tensor::new(vec![1, 4, 8], data).unwrap());
        let (y, _) = ctx.rnta_forward(x).unwrap();
        for row in ctx.tape.data(y).chunks(8) {
            assert!(row.iter().all(|v| (v - row[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn attention_orders_preserve_shape() {
        for order in AttentionOrder::ALL {
            let model = RtcanModel::new(tiny(order), 8).unwrap();
            let (mut tape, vars) = ctx_for(&model);
            let mut ctx = model.eval_ctx(&mut tape, &vars);
            let xt = random(&[2, 4, 24], 1);
            let x = ctx.tape.constant(xt.clone());
            let clips = ctx.clip_temporal(x).unwrap();
            let mut taps = Taps::default();
            let y = ctx.attention_block(&clips, &mut taps).unwrap();
            assert_eq!(ctx.tape.shape(y), &[2, 4, 24]);
            if order == AttentionOrder::None {
                assert_eq!(ctx.tape.data(y), xt.data());
            }
        }
    }

    #[test]
    fn sca_then_rnta_identity_init_is_identity() {
        let mut model = RtcanModel::new(tiny(AttentionOrder::ScaThenRnta), 8).unwrap();
        model.sca_identity_init();
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let xt = random(&[2, 4, 24], 1);
        let x = ctx.tape.constant(xt.clone());
        let clips = ctx.clip_temporal(x).unwrap();
        let y = ctx.attention_block(&clips, &mut Taps::default()).unwrap();
        assert_eq!(ctx.tape.data(y), xt.data());
    }

    #[test]
    fn rfe_default_lengths_and_zero_case() {
        let cfg = RtcanConfig::default();
        let model = RtcanModel::new(cfg, 2).unwrap();
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let x = ctx.tape.constant(Tensor::zeros(&[1, 64, 600]));
        let f = ctx.rfe_forward(x).unwrap();
        assert_eq!(ctx.tape.shape(f), &[1, 64]);
        assert!(ctx.tape.data(f).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_profile_has_no_resblock_gates() {
        let small = RtcanModel::new(RtcanConfig::for_profile(Profile::SmallScale, 5), 0).unwrap();
        assert!(small.params.names().all(|n| !(n.starts_with("rfe.") && n.contains(".sca."))));
        assert_eq!(small.config.music_dim, 0);
        let large = RtcanModel::new(RtcanConfig::for_profile(Profile::LargeScale, 5), 0).unwrap();
        assert!(large.params.names().any(|n| n.starts_with("rfe.0.0.sca.")));
        assert_eq!(large.params.get("cls.0.w").unwrap().shape(), &[69, 256]);
        assert_eq!(small.params.get("cls.0.w").unwrap().shape(), &[64, 256]);
    }

    #[test]
    fn classifier_softmax_and_zero_weights() {
        let cfg = tiny(AttentionOrder::None);
        let mut model = RtcanModel::new(cfg, 0).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name.starts_with("cls.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let f = ctx.tape.constant(random(&[3, 4], 6));
        let p = ctx.classify_fused(f, None).unwrap();
        assert_eq!(ctx.tape.data(p), &[0.5; 6]);

        let m = ctx.tape.constant(random(&[3, 2], 6));
        assert!(matches!(ctx.classify_fused(f, Some(m)), Err(RtcanError::ShapeMismatch(_))));
    }

    #[test]
    fn forward_shape_and_eval_determinism() {
        let cfg = RtcanConfig::for_profile(Profile::LargeScale, 5);
        let model = RtcanModel::new(cfg, 3).unwrap();
        let x = random(&[2, 3, 1200], 1);
        let m = random(&[2, 5], 2);
        let a = model.predict(x.clone(), Some(m.clone())).unwrap();
        let b = model.predict(x, Some(m)).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        for row in a.chunks(2) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn perturb_batchnorm(model: &mut RtcanModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (name, t) in model.params.iter_mut() {
            if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        for stats in model.buffers.values_mut() {
            stats.mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.2));
            stats.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        for order in [AttentionOrder::ScaThenRnta, AttentionOrder::Parallel] {
            let mut cfg = tiny(order);
            cfg.music_dim = 2;
            let mut model = RtcanModel::new(cfg, 21).unwrap();
            // larger weights so the check is not dominated by tiny activations
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for (_, t) in model.params.iter_mut() {
                t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
            }
            perturb_batchnorm(&mut model);
            let x = random(&[2, 3, 24], 8);
            let m = random(&[2, 2], 9);
            let model = &model;
            let err = finite_diff_check_multi(
                |tape, inputs| {
                    let vars = model.params.attach(tape);
                    let mut ctx = model.eval_ctx(tape, &vars);
                    let out = ctx.model_forward(inputs[0], Some(inputs[1])).map_err(|e| match e {
                        RtcanError::Tensor(t) => t,
                        other => TensorError::ShapeMismatch(other.to_string()),
                    })?;
                    ctx.tape.cross_entropy(out.probs, &[0, 1])
                },
                &[x, m],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-3, "{order:?}: {err}");
        }
    }

    #[test]
    fn shared_blocks_receive_summed_clip_gradients() {
        let mut model = RtcanModel::new(tiny(AttentionOrder::ScaThenRnta), 13).unwrap();
        model.params.get_mut("rnta.bn.gamma").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.5);
        let xt = random(&[2, 4, 24], 4);

        // full pass over all clips
        let (mut tape, vars) = ctx_for(&model);
        let mut ctx = model.eval_ctx(&mut tape, &vars);
        let x = ctx.tape.constant(xt.clone());
        let clips = ctx.clip_temporal(x).unwrap();
        let y = ctx.attention_block(&clips, &mut Taps::default()).unwrap();
        let s = ctx.tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        let total = tape.grad(vars.get("sca.w0.w").unwrap()).unwrap().to_vec();
        let total_rnta = tape.grad(vars.get("rnta.theta.w").unwrap()).unwrap().to_vec();

        let mut summed = vec![0.0; total.len()];
        let mut summed_rnta = vec![0.0; total_rnta.len()];
        for k in 0..3 {
            let (mut tape, vars) = ctx_for(&model);
            let mut ctx = model.eval_ctx(&mut tape, &vars);
            let x = ctx.tape.constant(xt.clone());
            let clips = ctx.clip_temporal(x).unwrap();
            let s = ctx.sca_forward(clips[k]).unwrap();
            let (r, _) = ctx.rnta_forward(s).unwrap();
            let loss = ctx.tape.sum(r).unwrap();
            tape.backward(loss).unwrap();
            for (a, g) in summed.iter_mut().zip(tape.grad(vars.get("sca.w0.w").unwrap()).unwrap()) {
                *a += g;
            }
            for (a, g) in summed_rnta.iter_mut().zip(tape.grad(vars.get("rnta.theta.w").unwrap()).unwrap()) {
                *a += g;
            }
        }
        for (a, b) in total.iter().zip(&summed).chain(total_rnta.iter().zip(&summed_rnta)) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
        assert_eq!(model.params.iter().filter(|(n, _)| n.starts_with("sca.w0.w")).count(), 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = RtcanModel::new(tiny(AttentionOrder::Parallel), 3).unwrap();
        perturb_batchnorm(&mut model);
        model.save(&path).unwrap();
        let back = RtcanModel::load(&path).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.buffers, model.buffers);
        let x = random(&[1, 3, 24], 0);
        assert_eq!(model.predict(x.clone(), None).unwrap(), back.predict(x, None).unwrap());
    }
}
