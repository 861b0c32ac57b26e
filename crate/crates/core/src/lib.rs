//! Multimodal EDA emotion recognition: convex phasic/tonic decomposition of
//! skin conductance, a 1-D residual network with channel and non-local
//! temporal attention, subject-independent evaluation and 1-D Grad-CAM.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cvxeda;
pub mod gradcam;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod rtcan;
pub mod synth;
pub mod tensor;

pub use model::{
    AffectDim, AnnotationRecord, BinaryLabels, DecomposedEda, EdaTrace, LabeledExample,
    StimulusFeatures,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Signal(#[from] model::SignalError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Cvxeda(#[from] cvxeda::CvxedaError),
    #[error(transparent)]
    Rtcan(#[from] rtcan::RtcanError),
    #[error(transparent)]
    Pipeline(#[from] pipeline::PipelineError),
    #[error(transparent)]
    Synth(#[from] synth::SynthError),
    #[error(transparent)]
    Gradcam(#[from] gradcam::GradcamError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
