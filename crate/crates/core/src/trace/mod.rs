//! Question answering over instances with trajectory-biased attention.

pub mod geometry;
mod loss;
mod model;

use serde::{Deserialize, Serialize};

use crate::corpus::EntityObservation;
use crate::error::{Error, Result};
use crate::vocab::{Special, Vocab};
use geometry::{
    appearance_order, central_frame, nearest_frames, temporal_intersection, FrameRange, Trajectory,
};

pub use loss::{answer_loss, answer_targets, AnswerLossMode, AnswerTargets};
pub use model::{TraceBatch, TraceExample, TraceModel, TraceModelConfig, TrajectoryBias};

/// The tracer reads the same character vocabulary as the gatherer.
pub type TraceVocab = Vocab;

/// Longest within-word offset with its own embedding row.
pub const MAX_WORD_OFFSET: usize = 16;

/// One instance as the tracer sees it: a transcription and where it moved.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceInput {
    pub text: String,
    pub trajectory: Trajectory,
}

impl InstanceInput {
    pub fn new(text: impl Into<String>, trajectory: Trajectory) -> Self {
        Self {
            text: text.into(),
            trajectory,
        }
    }

    pub fn from_observations(text: impl Into<String>, observations: &[EntityObservation]) -> Self {
        Self::new(text, Trajectory::from_observations(observations))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenType {
    Question,
    InstanceMarker,
    InstanceText,
}

impl TokenType {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub token_ids: Vec<u32>,
    pub token_types: Vec<TokenType>,
    pub instance_of_token: Vec<Option<usize>>,
    /// Characters since the last non-alphanumeric one, starting at 1; 0 on separators.
    pub word_offsets: Vec<usize>,
    /// Retained instances, in appearance order.
    pub trajectories: Vec<Trajectory>,
    pub texts: Vec<String>,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Indices of the instances kept under `cap`: longest trajectories first,
/// ties to the earlier start frame, then to the earlier index.
pub fn select_instances(trajectories: &[&Trajectory], cap: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..trajectories.len()).collect();
    if idx.len() > cap {
        idx.sort_by_key(|&i| {
            let t = trajectories[i];
            (
                std::cmp::Reverse(t.len()),
                t.span().map_or(u32::MAX, |s| s.start),
                i,
            )
        });
        idx.truncate(cap);
        idx.sort_unstable();
    }
    idx
}

fn push_word(input: &mut EncoderInput, text: &str, vocab: &Vocab, kind: TokenType, instance: Option<usize>) {
    let mut offset = 0;
    for c in text.chars() {
        offset = if c.is_alphanumeric() { offset + 1 } else { 0 };
        input.token_ids.push(vocab.char_id(c));
        input.token_types.push(kind);
        input.instance_of_token.push(instance);
        input.word_offsets.push(offset.min(MAX_WORD_OFFSET));
    }
}

/// Lays out `[BOS] question [SEP]` followed by `[INST] text` per instance.
///
/// Instance texts are lowercased to match normalized questions and answers.
pub fn build_encoder_input(
    question: &str,
    instances: Vec<InstanceInput>,
    cap: usize,
    vocab: &Vocab,
) -> Result<EncoderInput> {
    if question.is_empty() {
        return Err(Error::Contract("empty question".into()));
    }
    let keep = select_instances(&instances.iter().map(|i| &i.trajectory).collect::<Vec<_>>(), cap);
    let mut kept: Vec<InstanceInput> = Vec::with_capacity(keep.len());
    let mut instances: Vec<Option<InstanceInput>> = instances.into_iter().map(Some).collect();
    for i in keep {
        kept.push(instances[i].take().expect("indices are unique"));
    }
    let order = appearance_order(&kept.iter().map(|i| &i.trajectory).collect::<Vec<_>>());

    let mut input = EncoderInput {
        token_ids: vec![Special::Bos.id()],
        token_types: vec![TokenType::Question],
        instance_of_token: vec![None],
        word_offsets: vec![0],
        trajectories: Vec::with_capacity(kept.len()),
        texts: Vec::with_capacity(kept.len()),
    };
    push_word(&mut input, question, vocab, TokenType::Question, None);
    input.token_ids.push(Special::Sep.id());
    input.token_types.push(TokenType::Question);
    input.instance_of_token.push(None);
    input.word_offsets.push(0);

    for (slot, &k) in order.iter().enumerate() {
        let inst = &kept[k];
        let text = inst.text.to_lowercase();
        input.token_ids.push(Special::Inst.id());
        input.token_types.push(TokenType::InstanceMarker);
        input.instance_of_token.push(Some(slot));
        input.word_offsets.push(0);
        push_word(&mut input, &text, vocab, TokenType::InstanceText, Some(slot));
        input.trajectories.push(inst.trajectory.clone());
        input.texts.push(text);
    }
    Ok(input)
}

/// How instance-pair geometry enters the encoder's attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Plain attention with no learned bias of any kind.
    Off,
    /// Relative position at the temporally nearest frames, ignoring co-occurrence.
    SpatialOnly,
    /// Relative position at the central co-occurring frame; disjoint pairs get a sentinel.
    Full,
}

impl BiasMode {
    pub const ALL: [BiasMode; 3] = [BiasMode::Off, BiasMode::SpatialOnly, BiasMode::Full];

    pub fn name(self) -> &'static str {
        match self {
            BiasMode::Off => "off",
            BiasMode::SpatialOnly => "spatial_only",
            BiasMode::Full => "full",
        }
    }
}

/// Geometry of an ordered instance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairGeometry {
    Offset { dx: f64, dy: f64 },
    Disjoint,
}

/// Intersection and central frame of a pair, when they co-occur.
pub fn pair_timing(a: &Trajectory, b: &Trajectory) -> Option<(FrameRange, u32)> {
    let range = temporal_intersection(a, b)?;
    Some((range, central_frame(range)))
}

/// Relative position of `a` with respect to `b` under `mode`.
///
/// Tracks may skip frames, so a missing sighting falls back to the
/// temporally nearest one.
pub fn pair_geometry(a: &Trajectory, b: &Trajectory, mode: BiasMode) -> PairGeometry {
    let frames = match mode {
        BiasMode::Full => pair_timing(a, b).map(|(_, f)| (f, f)),
        BiasMode::SpatialOnly | BiasMode::Off => nearest_frames(a, b),
    };
    let offset = frames.and_then(|(fa, fb)| {
        let (xa, ya) = a.at_or_nearest(fa)?;
        let (xb, yb) = b.at_or_nearest(fb)?;
        Some((xa - xb, ya - yb))
    });
    match offset {
        Some((dx, dy)) => PairGeometry::Offset { dx, dy },
        None => PairGeometry::Disjoint,
    }
}
