use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use rtcan_core::cvxeda::{self, CvxedaError};
use rtcan_core::gradcam::{self, Layer};
use rtcan_core::io;
use rtcan_core::pipeline::{
    self, CvSettings, FoldEntry, MeanMetrics, PrepConfig, RunManifest, SvmConfig, TrainSchedule,
};
use rtcan_core::rtcan::{Profile, RtcanConfig, RtcanModel};
use rtcan_core::synth::{self, DatasetSpec};
use rtcan_core::{AffectDim, BinaryLabels, EdaTrace, LabeledExample};

use crate::{
    BaselineArgs, CorrelateArgs, CvxedaFlags, DecomposeArgs, EvalArgs, ExplainArgs, Failure, SynthArgs,
    TrainArgs,
};

type CliResult<T = ()> = Result<T, Failure>;

const SEED_ENV: &str = "RTCAN_SEED";

fn file_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let file = io::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| file_err(path, e))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| file_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[(&str, Option<&PathBuf>)]) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, path) in paths {
        if let Some(p) = path {
            out.insert((*name).to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn parse_dim(s: &str) -> CliResult<AffectDim> {
    s.parse().map_err(|_| Failure::usage(format!("unknown dimension '{s}' (expected valence or arousal)")))
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn layered<T: Serialize + for<'de> Deserialize<'de>>(base: &T, file: Option<&Path>) -> CliResult<T> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializable"))
            .expect("round-trips"));
    };
    let mut value = serde_json::to_value(base).expect("serializable");
    merge(&mut value, read_json(path)?);
    serde_json::from_value(value).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn prep_from(file: Option<&Path>, flags: Option<&CvxedaFlags>) -> CliResult<PrepConfig> {
    let mut prep = layered(&PrepConfig::default(), file)?;
    if let Some(f) = flags {
        if let Some(v) = f.alpha {
            prep.cvxeda.alpha = v;
        }
        if let Some(v) = f.gamma {
            prep.cvxeda.gamma = v;
        }
        if let Some(v) = f.tau0 {
            prep.irf.tau0 = v;
        }
        if let Some(v) = f.tau1 {
            prep.irf.tau1 = v;
        }
        if let Some(v) = f.knot_spacing {
            prep.cvxeda.knot_spacing_s = v;
        }
    }
    prep.irf.validate()?;
    prep.cvxeda.validate()?;
    Ok(prep)
}

// ---------------------------------------------------------------------------
// decompose

#[derive(Serialize)]
struct TraceEntry {
    subject_id: String,
    stimulus_id: String,
    file: String,
    samples: usize,
    iterations: usize,
    residual: f64,
    converged: bool,
    reconstruction_error: f64,
}

#[derive(Serialize)]
struct DecomposeManifest {
    tool_version: String,
    command: String,
    prep: PrepConfig,
    inputs: BTreeMap<String, String>,
    traces: Vec<TraceEntry>,
    wall_clock_s: f64,
}

pub fn decompose(a: DecomposeArgs) -> CliResult {
    let started = Instant::now();
    let prep = prep_from(a.cvx.prep_config.as_deref(), Some(&a.cvx))?;
    let traces = io::read_eda(&a.input)?;
    if traces.is_empty() {
        return Err(Failure::data(format!("{}: no traces", a.input.display())));
    }
    ensure_dir(&a.out)?;
    let mut entries = Vec::with_capacity(traces.len());
    for trace in &traces {
        let (d, iterations, residual, converged) =
            match cvxeda::decompose_detailed(trace, &prep.irf, &prep.cvxeda) {
                Ok((d, sol)) => (d, sol.iterations, sol.residual, true),
                Err(CvxedaError::NoConvergence(u)) if a.lenient => {
                    log::warn!(
                        "{}/{}: no convergence, keeping best iterate",
                        trace.subject_id,
                        trace.stimulus_id
                    );
                    let d = u.decomposition.clone().expect("decomposition attached");
                    (d, u.solution.iterations, u.solution.residual, false)
                }
                Err(e) => {
                    return Err(Failure::from(e).with_context(&format!(
                        "{}/{}",
                        trace.subject_id, trace.stimulus_id
                    )))
                }
            };
        let name = format!("{}_{}.csv", trace.subject_id, trace.stimulus_id);
        io::write_decomposition(io::create(&a.out.join(&name))?, &d, trace.sampling_hz)?;
        entries.push(TraceEntry {
            subject_id: trace.subject_id.clone(),
            stimulus_id: trace.stimulus_id.clone(),
            file: name,
            samples: trace.len(),
            iterations,
            residual,
            converged,
            reconstruction_error: d.reconstruction_error(),
        });
    }
    let manifest = DecomposeManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "decompose".into(),
        prep,
        inputs: digests(&[("eda", Some(&a.input))])?,
        traces: entries,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!("decomposed {} traces into {}", manifest.traces.len(), a.out.display());
    Ok(())
}

impl Failure {
    fn with_context(mut self, ctx: &str) -> Self {
        self.message = format!("{ctx}: {}", self.message);
        self
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Serialize)]
struct SynthManifest {
    tool_version: String,
    command: String,
    spec: DatasetSpec,
    traces: usize,
    spikes: usize,
    /// Over traces with at least one spike.
    min_snr_db: f64,
    files: Vec<String>,
}

pub fn synth(a: SynthArgs) -> CliResult {
    let mut spec = layered(&DatasetSpec::default(), a.spec.as_deref())?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = synth::gen_dataset_from_spec(&spec)?;
    ensure_dir(&a.out)?;
    let truth_dir = a.out.join("truth");
    ensure_dir(&truth_dir)?;

    io::write_eda(io::create(&a.out.join("eda.csv"))?, &data.traces)?;
    io::write_annotations(io::create(&a.out.join("annotations.csv"))?, &data.annotations)?;
    let mut files = vec!["eda.csv".to_string(), "annotations.csv".into()];
    if spec.music_dim > 0 {
        io::write_stimulus_features(io::create(&a.out.join("stimuli.csv"))?, &data.stimuli)?;
        files.push("stimuli.csv".into());
    }

    let mut spikes = csv_writer(&truth_dir.join("spikes.csv"))?;
    spikes
        .write_all(b"subject_id,stimulus_id,t_s,amplitude\n")
        .map_err(|e| file_err(&truth_dir, e))?;
    let mut n_spikes = 0;
    let mut min_snr = f64::INFINITY;
    for (trace, truth) in data.traces.iter().zip(&data.truth) {
        let t: Vec<f64> = (0..trace.len()).map(|i| i as f64 / trace.sampling_hz).collect();
        io::write_columns(
            io::create(&truth_dir.join(format!("{}_{}.csv", trace.subject_id, trace.stimulus_id)))?,
            &["t_s", "true_phasic", "true_tonic", "noise"],
            &[&t, &truth.true_phasic, &truth.true_tonic, &truth.noise],
        )?;
        for (ts, amp) in truth.spike_times_s.iter().zip(&truth.spike_amps) {
            writeln!(spikes, "{},{},{ts},{amp}", trace.subject_id, trace.stimulus_id)
                .map_err(|e| file_err(&truth_dir, e))?;
        }
        n_spikes += truth.spike_times_s.len();
        if !truth.spike_times_s.is_empty() {
            min_snr = min_snr.min(truth.snr_db());
        }
    }
    spikes.flush().map_err(|e| file_err(&truth_dir, e))?;
    files.push("truth/".into());

    let manifest = SynthManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "synth".into(),
        spec,
        traces: data.traces.len(),
        spikes: n_spikes,
        min_snr_db: min_snr,
        files,
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} traces ({} spikes, min SNR {:.1} dB) to {}",
        manifest.traces,
        n_spikes,
        min_snr,
        a.out.display()
    );
    Ok(())
}

fn csv_writer(path: &Path) -> CliResult<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(io::create(path)?))
}

// ---------------------------------------------------------------------------
// train

/// On-disk run configuration; every key is optional and overlays the base.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    model: RtcanConfig,
    schedule: TrainSchedule,
    prep: PrepConfig,
    folds: usize,
    dim: AffectDim,
    seed: Option<u64>,
    profile: Profile,
}

impl RunConfig {
    fn base(desk: bool) -> Self {
        let (model, schedule) = if desk {
            (RtcanConfig::desk(Profile::LargeScale, 0), TrainSchedule::desk())
        } else {
            (RtcanConfig::for_profile(Profile::LargeScale, 0), TrainSchedule::default())
        };
        Self {
            model,
            schedule,
            prep: PrepConfig::default(),
            folds: 10,
            dim: AffectDim::Arousal,
            seed: None,
            profile: Profile::LargeScale,
        }
    }
}

struct Corpus {
    examples: Vec<LabeledExample>,
    music_dim: usize,
}

fn load_corpus(
    eda: &Path,
    annotations: &Path,
    music: Option<&Path>,
    prep: &PrepConfig,
    input_len: usize,
) -> CliResult<Corpus> {
    let traces = io::read_eda(eda)?;
    let annotations = io::read_annotations(annotations)?;
    let stimuli = music.map(io::read_stimulus_features).transpose()?;
    let music_dim = stimuli
        .as_ref()
        .and_then(|s| s.first())
        .map_or(0, |s| s.vector.len());
    let examples = pipeline::build_examples(&traces, &annotations, stimuli.as_deref(), prep, input_len)?;
    Ok(Corpus { examples, music_dim })
}

pub fn train(a: TrainArgs) -> CliResult {
    let started = Instant::now();
    let mut run = layered(&RunConfig::base(a.desk), a.config.as_deref())?;
    if let Some(p) = &a.profile {
        run.profile = p.parse().map_err(Failure::usage)?;
    }
    if let Some(d) = &a.dim {
        run.dim = parse_dim(d)?;
    }
    if let Some(e) = a.epochs {
        run.schedule.epochs = e;
    }
    if let Some(k) = a.folds {
        run.folds = k;
    }
    if a.jobs == 0 {
        return Err(Failure::usage("--jobs must be at least 1"));
    }
    let seed = match a.seed.or(run.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    run.seed = Some(seed);
    run.schedule.seed = seed;
    if run.profile == Profile::LargeScale && a.data.music.is_none() {
        return Err(Failure::data("the large-scale profile needs --music stimulus features"));
    }
    let music_path = match run.profile {
        Profile::LargeScale => a.data.music.as_deref(),
        Profile::SmallScale => None,
    };

    let corpus = load_corpus(
        &a.data.eda,
        &a.data.annotations,
        music_path,
        &run.prep,
        run.model.input_len,
    )?;
    run.model.apply_profile(run.profile, corpus.music_dim);
    run.model.validate()?;
    run.schedule.validate()?;

    let mut subjects: Vec<String> = corpus.examples.iter().map(|e| e.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let plan = pipeline::make_fold_plan(&subjects, run.folds, seed)?;
    let settings = CvSettings {
        config: run.model.clone(),
        schedule: run.schedule.clone(),
        dim: run.dim,
        init_seed: seed,
        jobs: a.jobs,
    };
    log::info!(
        "training {} folds on {} examples ({} subjects)",
        plan.len(),
        corpus.examples.len(),
        subjects.len()
    );
    let outcome = pipeline::cross_validate(&corpus.examples, &settings, &plan)?;

    ensure_dir(&a.out)?;
    let mut folds = Vec::with_capacity(outcome.folds.len());
    for f in &outcome.folds {
        let name = format!("fold_{:02}.ckpt", f.fold);
        f.model.save(&a.out.join(&name))?;
        folds.push(FoldEntry {
            fold: f.fold,
            test_subjects: f.test_subjects.clone(),
            test_examples: f.test_examples,
            metrics: f.report.clone(),
            loss_history: f.train.loss_history.clone(),
            checkpoint: Some(name),
        });
    }
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: "train".into(),
        dim: run.dim,
        seed,
        config: run.model,
        schedule: run.schedule,
        prep: run.prep,
        svm: None,
        inputs: digests(&[
            ("eda", Some(&a.data.eda)),
            ("annotations", Some(&a.data.annotations)),
            ("music", music_path.map(Path::to_path_buf).as_ref()),
            ("config", a.config.as_ref()),
        ])?,
        fold_plan: plan,
        folds,
        mean: outcome.mean.clone(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    write_json(&a.out.join("manifest.json"), &manifest)?;
    print_summary(run.dim, &outcome.mean);
    Ok(())
}

fn print_summary(dim: AffectDim, m: &MeanMetrics) {
    println!(
        "dim={} accuracy={:.4} precision={:.4} recall={:.4} f1={:.4}",
        dim.as_str(),
        m.accuracy,
        m.precision,
        m.recall,
        m.f1
    );
}

// ---------------------------------------------------------------------------
// eval

pub fn eval(a: EvalArgs) -> CliResult {
    let dim = parse_dim(&a.dim)?;
    let model = RtcanModel::load(&a.checkpoint)?;
    let prep = prep_from(a.prep_config.as_deref(), None)?;
    let music = if model.config.music_dim > 0 {
        Some(a.data.music.as_deref().ok_or_else(|| {
            Failure::data(format!(
                "checkpoint expects {} stimulus features; pass --music",
                model.config.music_dim
            ))
        })?)
    } else {
        None
    };
    let corpus = load_corpus(&a.data.eda, &a.data.annotations, music, &prep, model.config.input_len)?;
    if music.is_some() && corpus.music_dim != model.config.music_dim {
        return Err(Failure::data(format!(
            "stimulus features have {} dimensions, checkpoint expects {}",
            corpus.music_dim, model.config.music_dim
        )));
    }
    let refs: Vec<&LabeledExample> = corpus.examples.iter().collect();
    let report = pipeline::evaluate(&model, &refs, dim)?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(())
}

// ---------------------------------------------------------------------------
// baseline

pub fn baseline(a: BaselineArgs) -> CliResult {
    let started = Instant::now();
    let dim = parse_dim(&a.dim)?;
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let prep = prep_from(a.prep_config.as_deref(), None)?;
    let svm = SvmConfig {
        c: a.c,
        ..SvmConfig::default()
    };
    let corpus = load_corpus(&a.data.eda, &a.data.annotations, None, &prep, a.input_len)?;
    let mut subjects: Vec<String> = corpus.examples.iter().map(|e| e.subject_id.clone()).collect();
    subjects.sort();
    subjects.dedup();
    let plan = pipeline::make_fold_plan(&subjects, a.folds, seed)?;
    let (reports, mean) = pipeline::svm_cross_validate(&corpus.examples, &plan, dim, &svm)?;
    if let Some(out) = &a.out {
        ensure_dir(out)?;
        let folds = reports
            .iter()
            .enumerate()
            .map(|(i, r)| FoldEntry {
                fold: i,
                test_subjects: plan.folds[i].clone(),
                test_examples: (r.confusion.iter().flatten().sum::<u64>()) as usize,
                metrics: r.clone(),
                loss_history: Vec::new(),
                checkpoint: None,
            })
            .collect();
        let config = RtcanConfig {
            input_len: a.input_len,
            ..RtcanConfig::for_profile(Profile::SmallScale, 0)
        };
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: "baseline".into(),
            dim,
            seed,
            config,
            schedule: TrainSchedule::default(),
            prep,
            svm: Some(svm),
            inputs: digests(&[("eda", Some(&a.data.eda)), ("annotations", Some(&a.data.annotations))])?,
            fold_plan: plan,
            folds,
            mean: mean.clone(),
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        write_json(&out.join("manifest.json"), &manifest)?;
    }
    print_summary(dim, &mean);
    Ok(())
}

// ---------------------------------------------------------------------------
// explain

fn parse_layers(spec: &str, model: &RtcanModel) -> CliResult<Vec<Layer>> {
    let order = model.config.attention_order;
    if spec == "all" {
        let mut layers = Vec::new();
        if order.uses_sca() {
            layers.push(Layer::ScaOut);
        }
        if order.uses_rnta() {
            layers.push(Layer::RntaOut);
        }
        layers.push(Layer::AttentionOut);
        return Ok(layers);
    }
    spec.split(',')
        .map(|s| s.trim().parse::<Layer>().map_err(|e| Failure::usage(e.to_string())))
        .collect()
}

fn find_trace(traces: Vec<EdaTrace>, subject: &str, stimulus: &str) -> CliResult<EdaTrace> {
    traces
        .into_iter()
        .find(|t| t.subject_id == subject && t.stimulus_id == stimulus)
        .ok_or_else(|| Failure::data(format!("no trace for {subject}/{stimulus}")))
}

pub fn explain(a: ExplainArgs) -> CliResult {
    let dim = parse_dim(&a.dim)?;
    let model = RtcanModel::load(&a.checkpoint)?;
    let layers = parse_layers(&a.layer, &model)?;
    let prep = prep_from(a.prep_config.as_deref(), None)?;
    let trace = find_trace(io::read_eda(&a.eda)?, &a.subject, &a.stimulus)?;
    let channels = pipeline::preprocess(&trace, &prep.irf, &prep.cvxeda, model.config.input_len)?;
    let music = if model.config.music_dim > 0 {
        let path = a.music.as_deref().ok_or_else(|| {
            Failure::data(format!(
                "checkpoint expects {} stimulus features; pass --music",
                model.config.music_dim
            ))
        })?;
        let table = pipeline::standardize_stimuli(&io::read_stimulus_features(path)?)?;
        Some(
            table
                .get(&a.stimulus)
                .cloned()
                .ok_or_else(|| Failure::data(format!("no stimulus features for {}", a.stimulus)))?,
        )
    } else {
        None
    };
    let example = LabeledExample {
        channels,
        music,
        labels: BinaryLabels {
            valence_class: 0,
            arousal_class: 0,
        },
        subject_id: trace.subject_id.clone(),
        stimulus_id: trace.stimulus_id.clone(),
    };
    let target = match a.class {
        Some(c) => c,
        None => pipeline::predict_classes(&model, &[&example])?[0],
    };
    let maps = layers
        .iter()
        .map(|&l| gradcam::gradcam_1d(&model, &example, l, target))
        .collect::<Result<Vec<_>, _>>()?;
    ensure_dir(&a.out)?;
    let (csv, svg) = gradcam::emit_plot(&example, &maps, dim, &a.out)?;
    println!("class={target} csv={} svg={}", csv.display(), svg.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// correlate

pub fn correlate(a: CorrelateArgs) -> CliResult {
    let records = io::read_annotations(&a.annotations)?;
    let v: Vec<f64> = records.iter().map(|r| r.valence).collect();
    let ar: Vec<f64> = records.iter().map(|r| r.arousal).collect();
    let (r, t) = pipeline::pearson_r(&v, &ar)?;
    println!("r={r:.3} t={t:.3} n={}", records.len());
    Ok(())
}
