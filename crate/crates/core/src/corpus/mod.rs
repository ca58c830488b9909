//! Synthetic video-text worlds.
//!
//! A [`VideoSample`] holds moving text instances, each observed once per frame
//! with a (possibly corrupted) OCR reading, plus templated question/answer
//! pairs. Everything is a pure function of `(CorpusConfig, seed)`.

mod config;
mod generate;
mod io;
mod qa;
mod types;

pub use config::CorpusConfig;
pub use generate::{
    corrupt_observation, generate_corpus, generate_video, visual_feature, ClipSide,
    CorruptionParams,
};
pub use io::{read_corpus, write_corpus};
pub use qa::{make_qa, normalize_answer, verify_qa};
pub use types::{
    BBox, EntityObservation, QAPair, Quality, Sightings, Template, TextInstance, VideoSample,
};
