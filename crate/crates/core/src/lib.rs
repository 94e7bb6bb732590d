//! Pose-aligned patches for part-based fine-grained recognition.
//!
//! The crate covers everything around the neural networks: keypoint schemas
//! and the patch classes they induce ([`schema`]), the rectangle and
//! similarity transform for a keypoint pair plus image warping
//! ([`geometry`]), pose-tensor decoding ([`posetensor`]), keypoint and patch
//! evaluation ([`evaluation`]), score aggregation ([`aggregate`]), and
//! dataset ingestion and batch patch extraction ([`dataset`], [`extract`]).

pub mod aggregate;
mod binio;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod extract;
pub mod geometry;
pub mod keypoints_json;
pub mod posetensor;
pub mod schema;
pub mod scores;

pub use error::{Error, Result};
pub use geometry::{PatchSize, PatchSpec, Point2};
pub use schema::{KeypointSchema, PatchClass, PatchKind};
pub use scores::{ScoreTensor, Split};
