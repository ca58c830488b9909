//! Grouping per-frame sightings into tracks, and scoring the result.
//!
//! The tracker is a greedy frame-to-frame IoU matcher: cheap, deterministic,
//! and adequate for well-separated text.

mod assignment;
mod score;

use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, EntityObservation, Sightings};
use crate::error::{Error, Result};

pub use assignment::max_weight_assignment;
pub use score::{score_tracking, score_tracking_corpus, TrackingCounts, TrackingReport};

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u32,
    pub observations: Vec<EntityObservation>,
}

impl Sightings for Track {
    fn sightings(&self) -> &[EntityObservation] {
        &self.observations
    }
}

impl Track {
    /// Ground-truth instance most of this track's sightings came from (lowest id on ties).
    pub fn majority_instance(&self) -> Option<u32> {
        let mut counts = std::collections::BTreeMap::new();
        for o in &self.observations {
            *counts.entry(o.instance_id_gt).or_insert(0usize) += 1;
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    pub iou_threshold: f64,
    /// Frames a track may skip and still be extended.
    pub max_frame_gap: u32,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            max_frame_gap: 1,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// Links detections frame by frame.
///
/// For each frame, every (live track, detection) pair with IoU at or above the
/// threshold is a candidate; candidates are taken greedily by descending IoU,
/// ties going to the lower track id and then the lower detection index.
/// Unmatched detections open new tracks. A track is live if its last sighting
/// is at most `max_frame_gap` frames before the previous frame.
pub fn associate(frames: &[Vec<EntityObservation>], config: &AssociationConfig) -> Vec<Track> {
    let mut tracks: Vec<Track> = Vec::new();
    for detections in frames {
        let Some(frame) = detections.first().map(|d| d.frame) else {
            continue;
        };
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (t, track) in tracks.iter().enumerate() {
            let last = track.observations.last().expect("tracks are nonempty");
            if last.frame >= frame || frame - last.frame - 1 > config.max_frame_gap {
                continue;
            }
            for (d, det) in detections.iter().enumerate() {
                let overlap = iou(&last.bbox, &det.bbox);
                if overlap >= config.iou_threshold {
                    pairs.push((overlap, t, d));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut det_taken = vec![false; detections.len()];
        let mut track_taken = vec![false; tracks.len()];
        for (_, t, d) in pairs {
            if det_taken[d] || track_taken[t] {
                continue;
            }
            det_taken[d] = true;
            track_taken[t] = true;
            tracks[t].observations.push(detections[d].clone());
        }
        for (d, det) in detections.iter().enumerate() {
            if !det_taken[d] {
                tracks.push(Track {
                    track_id: tracks.len() as u32,
                    observations: vec![det.clone()],
                });
            }
        }
    }
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Quality;
    use proptest::prelude::*;

    fn obs(frame: u32, cx: f64, cy: f64, id: u32) -> EntityObservation {
        EntityObservation {
            frame,
            bbox: BBox::new(cx, cy, 0.2, 0.2).unwrap(),
            ocr_text: String::new(),
            visual_feat: vec![],
            quality: Quality::Clean,
            instance_id_gt: id,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BBox::new(0.6, 0.5, 0.2, 0.2).unwrap();
        let far = BBox::new(0.1, 0.1, 0.05, 0.05).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &far), 0.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_raster_estimate() {
        // midpoint raster over the union's bounding box
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let b = BBox::new(0.6, 0.5, 0.2, 0.2).unwrap();
        let n = 600;
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..n {
            for j in 0..n {
                let x = 0.35 + 0.4 * (i as f64 + 0.5) / n as f64;
                let y = 0.35 + 0.3 * (j as f64 + 0.5) / n as f64;
                let ina = x >= a.x0() && x <= a.x1() && y >= a.y0() && y <= a.y1();
                let inb = x >= b.x0() && x <= b.x1() && y >= b.y0() && y <= b.y1();
                inter += usize::from(ina && inb);
                union += usize::from(ina || inb);
            }
        }
        assert!((inter as f64 / union as f64 - iou(&a, &b)).abs() < 5e-3);
    }

    #[test]
    fn slow_mover_is_one_track() {
        // consecutive boxes shifted by 0.02 (IoU 0.82)
        let frames: Vec<_> = (0..6).map(|f| vec![obs(f, 0.3 + 0.02 * f as f64, 0.5, 0)]).collect();
        let tracks = associate(&frames, &AssociationConfig::default());
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].observations.len(), 6);
    }

    #[test]
    fn stationary_disjoint_pair_is_two_tracks() {
        let frames: Vec<_> = (0..5)
            .map(|f| vec![obs(f, 0.2, 0.2, 0), obs(f, 0.8, 0.8, 1)])
            .collect();
        let tracks = associate(&frames, &AssociationConfig::default());
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.observations.len(), 5);
            assert!(t.observations.iter().all(|o| o.instance_id_gt == t.observations[0].instance_id_gt));
        }
    }

    #[test]
    fn gap_tolerance() {
        let frames = vec![vec![obs(0, 0.5, 0.5, 0)], vec![], vec![obs(2, 0.5, 0.5, 0)]];
        let strict = AssociationConfig {
            max_frame_gap: 0,
            ..AssociationConfig::default()
        };
        assert_eq!(associate(&frames, &strict).len(), 2);
        assert_eq!(associate(&frames, &AssociationConfig::default()).len(), 1);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.01..0.5f64, 0.01..0.5f64)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_in_range(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
        }

        #[test]
        fn associate_partitions_input(
            dets in proptest::collection::vec(
                proptest::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..4), 1..8)
        ) {
            let frames: Vec<Vec<EntityObservation>> = dets
                .iter()
                .enumerate()
                .map(|(f, ds)| ds.iter().enumerate().map(|(k, &(x, y))| obs(f as u32, x, y, k as u32)).collect())
                .collect();
            let tracks = associate(&frames, &AssociationConfig::default());
            let total: usize = tracks.iter().map(|t| t.observations.len()).sum();
            prop_assert_eq!(total, dets.iter().map(Vec::len).sum::<usize>());
            for t in &tracks {
                prop_assert!(!t.observations.is_empty());
                prop_assert!(t.observations.windows(2).all(|w| w[0].frame < w[1].frame));
            }
        }
    }
}
