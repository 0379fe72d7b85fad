//! Pluggable model backends and their deterministic test doubles.

pub mod clip;
pub mod controller;
pub mod pose;
pub mod segment;
pub mod text;
pub mod unet;
pub mod vit;

pub use clip::{ClipVisionConfig, ClipVisionEncoder};
pub use controller::{ControlResidual, ControllerHandle, ControllerKind};
pub use pose::{
    marker_color, Joint, PoseExtractor, PoseRequest, PoseSkeleton, StickFigureDetector, StoredPoseOracle,
    JOINT_COUNT, JOINT_NAMES, LIMBS,
};
pub use segment::{OracleSegmenter, Segmenter, SegmenterRequest, ThresholdSegmenter};
pub use text::{SurrogateText, TextEncoder};
pub use unet::{DenoiserOutput, Injection, RefInjection, SurrogateUnet, UnetCache, UnetConfig, UnetGrads};
pub use vit::SurrogateVit;
