//! Person search: joint pedestrian detection and re-identification in one
//! small convolutional network.
//!
//! The pipeline runs a convolutional backbone over a whole scene, proposes
//! person boxes with an identity-aware region proposal network, pools each
//! proposal, and feeds the pooled features to a detection head and a
//! re-identification head that embeds every detection on the unit sphere.
//! Queries are answered by ranking gallery detections by Euclidean distance
//! to the query embedding.
//!
//! Everything is implemented from first principles in double precision with
//! hand-written backward passes, so the whole model can be finite-difference
//! checked.

pub mod data;
pub mod error;
pub mod evalsearch;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{BBox, Detection};
pub use numerics::{Rng, Tensor};
