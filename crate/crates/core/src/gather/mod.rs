//! Fusing an instance's per-frame readings into one transcription.

mod model;

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntityObservation, Sightings};
use crate::error::{Error, Result};
use crate::vocab::{Special, Vocab};

pub use model::{gather_loss, GatherExample, GatherModel, GatherModelConfig, GatherOutput};

/// Answer substituted for an empty transcription.
pub const UNREADABLE: &str = "<unreadable>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatherTokenType {
    Special,
    Text,
    Layout,
    Visual,
}

impl GatherTokenType {
    pub fn index(self) -> usize {
        self as usize
    }
}

/// One instance's sightings flattened into a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherSequence {
    pub token_ids: Vec<u32>,
    pub token_types: Vec<GatherTokenType>,
    pub layout_values: Vec<[f32; 4]>,
    pub visual_values: Vec<Vec<f32>>,
    pub frame_index: Vec<u32>,
    /// Which kept sighting a position belongs to; `None` on the outer wrapper.
    pub observation_index: Vec<Option<usize>>,
}

impl GatherSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_observations(&self) -> usize {
        self.observation_index.iter().flatten().max().map_or(0, |k| k + 1)
    }

    /// Position of each sighting's frame marker, by observation index.
    pub fn frame_positions(&self) -> Vec<usize> {
        let mut out = vec![0; self.num_observations()];
        for (p, (&id, k)) in self.token_ids.iter().zip(&self.observation_index).enumerate() {
            if let (true, Some(k)) = (id == Special::Frame.id(), k) {
                out[*k] = p;
            }
        }
        out
    }
}

/// Evenly spaced subset of `0..n` of size `cap`, keeping both ends.
pub fn subsample_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    if cap == 1 {
        return vec![0];
    }
    (0..cap)
        .map(|i| (i as f64 * (n - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect()
}

/// The sightings a sequence is built from after subsampling.
pub fn kept_observations<'a>(observations: &'a [EntityObservation], cap: usize) -> Vec<&'a EntityObservation> {
    subsample_indices(observations.len(), cap)
        .into_iter()
        .map(|i| &observations[i])
        .collect()
}

/// Lays out `[BOS] ([FRAME] [BOX] chars [VIS])* [EOS]` over frame-sorted sightings.
///
/// Readings longer than `max_text_len` are cut to that length.
pub fn build_sequence(
    instance: &impl Sightings,
    max_observations: usize,
    max_text_len: usize,
    visual_dim: usize,
    vocab: &Vocab,
) -> Result<GatherSequence> {
    let observations = instance.sightings();
    if observations.is_empty() {
        return Err(Error::Contract("cannot build a sequence without observations".into()));
    }
    let mut sorted: Vec<&EntityObservation> = observations.iter().collect();
    sorted.sort_by_key(|o| o.frame);
    let kept: Vec<&EntityObservation> = subsample_indices(sorted.len(), max_observations)
        .into_iter()
        .map(|i| sorted[i])
        .collect();

    let zero_vis = vec![0.0f32; visual_dim];
    let mut seq = GatherSequence {
        token_ids: Vec::new(),
        token_types: Vec::new(),
        layout_values: Vec::new(),
        visual_values: Vec::new(),
        frame_index: Vec::new(),
        observation_index: Vec::new(),
    };
    let push = |seq: &mut GatherSequence, id: u32, kind, layout, vis: &[f32], frame, obs| {
        seq.token_ids.push(id);
        seq.token_types.push(kind);
        seq.layout_values.push(layout);
        seq.visual_values.push(vis.to_vec());
        seq.frame_index.push(frame);
        seq.observation_index.push(obs);
    };
    use GatherTokenType as K;
    push(&mut seq, Special::Bos.id(), K::Special, [0.0; 4], &zero_vis, 0, None);
    for (k, o) in kept.iter().enumerate() {
        if o.visual_feat.len() != visual_dim {
            return Err(Error::Contract(format!(
                "visual feature of length {} where {visual_dim} was configured",
                o.visual_feat.len()
            )));
        }
        let b = &o.bbox;
        let layout = [b.cx as f32, b.cy as f32, b.w as f32, b.h as f32];
        let (f, obs) = (o.frame, Some(k));
        push(&mut seq, Special::Frame.id(), K::Special, [0.0; 4], &zero_vis, f, obs);
        push(&mut seq, Special::Box.id(), K::Layout, layout, &zero_vis, f, obs);
        for c in o.ocr_text.chars().take(max_text_len) {
            push(&mut seq, vocab.char_id(c), K::Text, [0.0; 4], &zero_vis, f, obs);
        }
        push(&mut seq, Special::Vis.id(), K::Visual, [0.0; 4], &o.visual_feat, f, obs);
    }
    let last = kept.last().map_or(0, |o| o.frame);
    push(&mut seq, Special::Eos.id(), K::Special, [0.0; 4], &zero_vis, last, None);
    Ok(seq)
}

/// Per kept sighting: does its reading equal the ground truth exactly?
pub fn aux_targets(kept: &[&EntityObservation], gt_text: &str) -> Vec<bool> {
    kept.iter().map(|o| o.ocr_text == gt_text).collect()
}

/// A uniformly chosen reading.
pub fn heuristic_random<R: Rng + ?Sized>(instance: &impl Sightings, rng: &mut R) -> Result<String> {
    let obs = instance.sightings();
    if obs.is_empty() {
        return Err(Error::Contract("no observations to choose from".into()));
    }
    Ok(obs[rng.random_range(0..obs.len())].ocr_text.clone())
}

/// The most frequent reading; ties go to the one seen first.
pub fn heuristic_max(instance: &impl Sightings) -> Result<String> {
    let mut obs: Vec<&EntityObservation> = instance.sightings().iter().collect();
    if obs.is_empty() {
        return Err(Error::Contract("no observations to vote over".into()));
    }
    obs.sort_by_key(|o| o.frame);
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    for (rank, o) in obs.iter().enumerate() {
        counts.entry(o.ocr_text.as_str()).or_insert((0, rank)).0 += 1;
    }
    let (best, _) = counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .expect("nonempty");
    Ok(best.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BBox, Quality, TextInstance};
    use crate::vocab::default_charset;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn obs(frame: u32, text: &str) -> EntityObservation {
        EntityObservation {
            frame,
            bbox: BBox::new(0.5, 0.5, 0.2, 0.06).unwrap(),
            ocr_text: text.into(),
            visual_feat: vec![0.0; 3],
            quality: Quality::Clean,
            instance_id_gt: 0,
        }
    }

    fn inst(texts: &[&str]) -> TextInstance {
        TextInstance {
            id: 0,
            canonical_text: texts[0].into(),
            observations: texts.iter().enumerate().map(|(f, t)| obs(f as u32, t)).collect(),
        }
    }

    fn vocab() -> Vocab {
        Vocab::new(&default_charset()).unwrap()
    }

    #[test]
    fn one_observation_layout() {
        let v = vocab();
        let s = build_sequence(&inst(&["AB"]), 16, 12, 3, &v).unwrap();
        let expected = [
            Special::Bos.id(),
            Special::Frame.id(),
            Special::Box.id(),
            v.char_id('A'),
            v.char_id('B'),
            Special::Vis.id(),
            Special::Eos.id(),
        ];
        assert_eq!(s.token_ids, expected);
        assert_eq!(s.layout_values[2], [0.5, 0.5, 0.2, 0.06]);
        assert!(s.layout_values.iter().enumerate().all(|(p, l)| p == 2 || *l == [0.0; 4]));
        assert_eq!(s.frame_positions(), vec![1]);
    }

    #[test]
    fn frames_ascend_even_if_input_unsorted() {
        let v = vocab();
        let mut i = inst(&["A", "B"]);
        i.observations.reverse();
        let s = build_sequence(&i, 16, 12, 3, &v).unwrap();
        let frames: Vec<u32> = s.frame_positions().iter().map(|&p| s.frame_index[p]).collect();
        assert_eq!(frames, vec![0, 1]);
        assert_eq!(s.token_ids[3], v.char_id('A'));
    }

    #[test]
    fn empty_instance_rejected() {
        let i = TextInstance {
            id: 0,
            canonical_text: "A".into(),
            observations: vec![],
        };
        assert!(build_sequence(&i, 16, 12, 3, &vocab()).is_err());
    }

    #[test]
    fn subsample_forty_to_sixteen() {
        let got = subsample_indices(40, 16);
        // independent recomputation in exact integer arithmetic: round(i*39/15)
        let expected: Vec<usize> = (0..16).map(|i| (2 * i * 39 + 15) / 30).collect();
        assert_eq!(got, expected);
        assert_eq!((got[0], got[15]), (0, 39));
    }

    #[test]
    fn heuristics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let all = inst(&["CARS", "CARS", "CARS"]);
        assert_eq!(heuristic_max(&all).unwrap(), "CARS");
        assert_eq!(heuristic_random(&all, &mut rng).unwrap(), "CARS");
        assert_eq!(heuristic_max(&inst(&["CAR5", "CARS", "CARS"])).unwrap(), "CARS");
        assert_eq!(heuristic_max(&inst(&["A", "B"])).unwrap(), "A");
        assert_eq!(heuristic_max(&inst(&["B", "A", "A", "B"])).unwrap(), "B");
    }

    #[test]
    fn aux_targets_exact_equality() {
        let i = inst(&["CARS", "CAR5", "", "CARS"]);
        let kept: Vec<&EntityObservation> = i.observations.iter().collect();
        assert_eq!(aux_targets(&kept, "CARS"), vec![true, false, false, true]);
        assert_eq!(aux_targets(&kept[2..3], ""), vec![true]);
    }

    proptest! {
        #[test]
        fn subsample_is_increasing_and_keeps_ends(n in 1usize..200, cap in 1usize..40) {
            let idx = subsample_indices(n, cap);
            prop_assert_eq!(idx.len(), n.min(cap));
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(idx[0], 0);
            if cap > 1 || n == 1 {
                prop_assert_eq!(*idx.last().unwrap(), n - 1);
            }
        }

        #[test]
        fn sequence_round_trip(texts in proptest::collection::vec("[A-Z0-9]{0,6}", 1..20)) {
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let s = build_sequence(&inst(&refs), 16, 12, 3, &vocab()).unwrap();
            // recover per-observation character counts from the type sequence alone
            let mut counts = Vec::new();
            for t in &s.token_types {
                match t {
                    GatherTokenType::Layout => counts.push(0),
                    GatherTokenType::Text => *counts.last_mut().unwrap() += 1,
                    _ => {}
                }
            }
            let source = inst(&refs);
            let kept = kept_observations(&source.observations, 16);
            let expected: Vec<usize> = kept.iter().map(|o| o.ocr_text.len()).collect();
            prop_assert_eq!(counts, expected);
            prop_assert_eq!(s.num_observations(), kept.len());
        }
    }
}
