//! Adaptive tokens for monocular 3D detection features.
//!
//! A dense backbone feature map is scored with a ground-plane depth prior and
//! a small semantic network, clustered over several stages into irregular
//! tokens that are finest where scores are highest, refined with
//! score-biased cross attention, and finally unwound back into a dense
//! feature map.
//!
//! * [`fmcore`]: feature maps, token sets, stage traces, configuration
//! * [`cce`]: depth/semantic scoring, center ranking, focal loss
//! * [`att`]: grouping, merging, biased attention, stage loop
//! * [`mfr`]: reconstruction from stage traces
//! * [`numerics`]: analytic gradients, finite-difference checks, oracles

pub mod att;
pub mod cce;
pub mod error;
pub mod fmcore;
pub mod linalg;
pub mod mfr;
pub mod numerics;
pub mod pipeline;
pub mod weights;

pub use error::{Error, Result};
pub use fmcore::{
    slice_to_tokens, token_centroids, CameraIntrinsics, FeatureMap, PipelineConfig, StageTrace,
    TokenSet,
};
pub use linalg::Matrix;
pub use pipeline::{run_pipeline, Model, PipelineOutput};
