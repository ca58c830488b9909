//! Instance-oriented video text question answering.
//!
//! The pipeline runs in two stages. Per-frame OCR sightings are grouped into
//! text instances ([`association`]), and each instance's readings are fused
//! into one transcription ([`gather`]). A question is then answered over the
//! unique instances with attention biased by their trajectory geometry
//! ([`trace`]). [`corpus`] synthesizes the data, [`metrics`] scores it, and
//! [`harness`] wires training, evaluation and ablations together.

pub mod association;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gather;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod trace;
pub mod vocab;

pub use candle_core;
pub use corpus::{
    BBox, CorpusConfig, EntityObservation, QAPair, Quality, Template, TextInstance, VideoSample,
};
pub use error::{Error, Result};
