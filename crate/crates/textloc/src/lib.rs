//! Coarse-to-fine text-to-point-cloud localization on a procedurally
//! generated city.
//!
//! The pipeline has two stages. The coarse stage encodes 30 m point-cloud
//! cells and templated hint descriptions into a shared embedding space and
//! retrieves candidate cells for a text query by cosine similarity. The fine
//! stage fuses instance queries extracted from a candidate cell with the hint
//! features through relative position-aware attention and regresses the 2D
//! target position inside the cell.

pub mod attention;
pub mod autodiff;
pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod fine;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod scene;
pub mod text;

pub use error::{Result, TextLocError};
