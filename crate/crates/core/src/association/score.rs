use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{iou, max_weight_assignment, AssociationConfig, Track};
use crate::corpus::{BBox, TextInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrackingCounts {
    pub false_negatives: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub gt_observations: usize,
    pub pred_observations: usize,
    pub matches: usize,
    /// Identity-consistent matches under the best global id mapping.
    pub id_true_positives: usize,
}

impl std::ops::AddAssign for TrackingCounts {
    fn add_assign(&mut self, o: Self) {
        self.false_negatives += o.false_negatives;
        self.false_positives += o.false_positives;
        self.id_switches += o.id_switches;
        self.gt_observations += o.gt_observations;
        self.pred_observations += o.pred_observations;
        self.matches += o.matches;
        self.id_true_positives += o.id_true_positives;
    }
}

/// CLEAR-MOT accuracy and identity F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub mota: f64,
    pub idf1: f64,
    pub counts: TrackingCounts,
}

impl TrackingReport {
    fn from_counts(counts: TrackingCounts) -> Result<Self> {
        if counts.gt_observations == 0 {
            if counts.pred_observations > 0 {
                return Err(Error::UndefinedMota {
                    predicted: counts.pred_observations,
                });
            }
            return Ok(Self {
                mota: 1.0,
                idf1: 1.0,
                counts,
            });
        }
        let errors = counts.false_negatives + counts.false_positives + counts.id_switches;
        let mota = 1.0 - errors as f64 / counts.gt_observations as f64;
        let idf1 = 2.0 * counts.id_true_positives as f64
            / (counts.gt_observations + counts.pred_observations) as f64;
        Ok(Self { mota, idf1, counts })
    }
}

type FrameBoxes = BTreeMap<u32, Vec<(u32, BBox)>>;

fn by_frame<'a>(items: impl Iterator<Item = (u32, u32, &'a BBox)>) -> FrameBoxes {
    let mut out: FrameBoxes = BTreeMap::new();
    for (frame, id, bbox) in items {
        out.entry(frame).or_default().push((id, *bbox));
    }
    out
}

fn count_video(pred: &[Track], gt: &[TextInstance], cfg: &AssociationConfig) -> TrackingCounts {
    let gt_frames = by_frame(
        gt.iter()
            .flat_map(|i| i.observations.iter().map(move |o| (o.frame, i.id, &o.bbox))),
    );
    let pred_frames = by_frame(
        pred.iter()
            .flat_map(|t| t.observations.iter().map(move |o| (o.frame, t.track_id, &o.bbox))),
    );
    let mut frames: Vec<u32> = gt_frames.keys().chain(pred_frames.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let empty = Vec::new();
    let mut counts = TrackingCounts::default();
    let mut last_match: HashMap<u32, u32> = HashMap::new();
    let mut prev_frame_match: HashMap<u32, u32> = HashMap::new();
    let mut id_overlap: BTreeMap<(u32, u32), i64> = BTreeMap::new();

    for f in frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let p = pred_frames.get(&f).unwrap_or(&empty);
        counts.gt_observations += g.len();
        counts.pred_observations += p.len();

        for (gid, gbox) in g {
            for (tid, pbox) in p {
                if iou(gbox, pbox) >= cfg.iou_threshold {
                    *id_overlap.entry((*gid, *tid)).or_default() += 1;
                }
            }
        }

        let mut g_taken = vec![false; g.len()];
        let mut p_taken = vec![false; p.len()];
        let mut frame_match = HashMap::new();
        // keep last frame's correspondences while they remain valid
        for (gi, (gid, gbox)) in g.iter().enumerate() {
            let Some(&tid) = prev_frame_match.get(gid) else {
                continue;
            };
            if let Some(pi) = p.iter().position(|(t, b)| *t == tid && iou(gbox, b) >= cfg.iou_threshold) {
                if !p_taken[pi] {
                    g_taken[gi] = true;
                    p_taken[pi] = true;
                    frame_match.insert(*gid, tid);
                }
            }
        }
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, (_, gbox)) in g.iter().enumerate() {
            for (pi, (_, pbox)) in p.iter().enumerate() {
                let overlap = iou(gbox, pbox);
                if !g_taken[gi] && !p_taken[pi] && overlap >= cfg.iou_threshold {
                    pairs.push((overlap, gi, pi));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for (_, gi, pi) in pairs {
            if g_taken[gi] || p_taken[pi] {
                continue;
            }
            g_taken[gi] = true;
            p_taken[pi] = true;
            frame_match.insert(g[gi].0, p[pi].0);
        }

        for (gid, tid) in &frame_match {
            if last_match.get(gid).is_some_and(|prev| prev != tid) {
                counts.id_switches += 1;
            }
            last_match.insert(*gid, *tid);
        }
        counts.matches += frame_match.len();
        counts.false_negatives += g.len() - frame_match.len();
        counts.false_positives += p.len() - frame_match.len();
        prev_frame_match = frame_match;
    }

    let gids: Vec<u32> = gt.iter().map(|i| i.id).collect();
    let tids: Vec<u32> = pred.iter().map(|t| t.track_id).collect();
    let weights: Vec<Vec<i64>> = gids
        .iter()
        .map(|g| tids.iter().map(|t| *id_overlap.get(&(*g, *t)).unwrap_or(&0)).collect())
        .collect();
    counts.id_true_positives = max_weight_assignment(&weights).1 as usize;
    counts
}

/// Scores one video's tracks against its ground-truth instances.
pub fn score_tracking(
    pred: &[Track],
    gt: &[TextInstance],
    config: &AssociationConfig,
) -> Result<TrackingReport> {
    TrackingReport::from_counts(count_video(pred, gt, config))
}

/// Pools counts over many videos before computing the rates.
pub fn score_tracking_corpus<'a>(
    videos: impl IntoIterator<Item = (&'a [Track], &'a [TextInstance])>,
    config: &AssociationConfig,
) -> Result<TrackingReport> {
    let mut total = TrackingCounts::default();
    for (pred, gt) in videos {
        total += count_video(pred, gt, config);
    }
    TrackingReport::from_counts(total)
}
