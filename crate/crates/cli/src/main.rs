//! `rtcan` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 decomposition did not converge.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "rtcan", version, about = "EDA decomposition and emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split every trace of an EDA CSV into phasic, tonic and driver.
    Decompose(DecomposeArgs),
    /// Generate a synthetic corpus with ground truth.
    Synth(SynthArgs),
    /// Subject-independent cross-validation of the network.
    Train(TrainArgs),
    /// Score a saved checkpoint on a labeled corpus.
    Eval(EvalArgs),
    /// Cross-validated linear SVM on the raw decomposed channels.
    Baseline(BaselineArgs),
    /// Grad-CAM saliency for one trace.
    Explain(ExplainArgs),
    /// Pearson correlation between valence and arousal annotations.
    Correlate(CorrelateArgs),
}

#[derive(Debug, Args)]
struct CvxedaFlags {
    /// JSON file with decomposition settings (`irf`, `cvxeda` sections)
    #[arg(long)]
    prep_config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau0: Option<f64>,
    #[arg(long)]
    tau1: Option<f64>,
    #[arg(long = "knot-spacing")]
    knot_spacing: Option<f64>,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cvx: CvxedaFlags,
    /// Accept the best iterate instead of failing when the solver budget runs out
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset spec JSON; defaults are used for missing keys
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    eda: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    /// Stimulus feature CSV (header `stimulus_id,f0,...`)
    #[arg(long)]
    music: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Run configuration JSON (`model`, `schedule`, `prep`, `folds`, `dim`, `seed`, `profile`)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// large-scale (resblock gates + stimulus fusion) or small-scale (EDA only)
    #[arg(long)]
    profile: Option<String>,
    /// Start from the reduced single-core configuration instead of the full-size one
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Folds trained concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "arousal")]
    dim: String,
    #[arg(long)]
    prep_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "C", default_value_t = rtcan_core::pipeline::SVM_DEFAULT_C)]
    c: f64,
    #[arg(long, default_value = "arousal")]
    dim: String,
    #[arg(long, default_value_t = 1200)]
    input_len: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prep_config: Option<PathBuf>,
    /// Directory for the run manifest
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    eda: PathBuf,
    #[arg(long)]
    music: Option<PathBuf>,
    #[arg(long)]
    subject: String,
    #[arg(long)]
    stimulus: String,
    #[arg(long, default_value = "arousal")]
    dim: String,
    /// Comma-separated list of sca_out, rnta_out, attention_out
    #[arg(long, default_value = "sca_out,rnta_out")]
    layer: String,
    /// Target class; defaults to the predicted class
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    prep_config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    #[arg(long)]
    annotations: PathBuf,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "data",
            message: message.into(),
        }
    }
}

impl From<rtcan_core::Error> for Failure {
    fn from(e: rtcan_core::Error) -> Self {
        use rtcan_core::cvxeda::CvxedaError;
        use rtcan_core::pipeline::PipelineError;
        let no_convergence = matches!(
            &e,
            rtcan_core::Error::Cvxeda(CvxedaError::NoConvergence(_))
                | rtcan_core::Error::Pipeline(PipelineError::Cvxeda(CvxedaError::NoConvergence(_)))
        );
        if no_convergence {
            Self {
                code: 3,
                kind: "no_convergence",
                message: e.to_string(),
            }
        } else {
            Self::data(e.to_string())
        }
    }
}

macro_rules! impl_from_core {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                rtcan_core::Error::from(e).into()
            }
        }
    )*};
}

impl_from_core!(
    rtcan_core::cvxeda::CvxedaError,
    rtcan_core::pipeline::PipelineError,
    rtcan_core::rtcan::RtcanError,
    rtcan_core::synth::SynthError,
    rtcan_core::gradcam::GradcamError,
    rtcan_core::io::IoError,
    rtcan_core::model::SignalError
);

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            let reason = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("rtcan: error kind=usage code=1 reason=\"{}\"", one_line(reason.trim_start_matches("error: ")));
            eprintln!("{rendered}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Decompose(a) => commands::decompose(a),
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Explain(a) => commands::explain(a),
        Command::Correlate(a) => commands::correlate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!(
                "rtcan: error kind={} code={} reason=\"{}\"",
                f.kind,
                f.code,
                one_line(&f.message).replace('"', "'")
            );
            ExitCode::from(f.code)
        }
    }
}
