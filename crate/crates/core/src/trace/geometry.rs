//! Pairwise trajectory geometry: temporal intersection, central frame,
//! relative position and its sinusoidal embedding.

use serde::{Deserialize, Serialize};

use crate::corpus::EntityObservation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub frame: u32,
    pub cx: f64,
    pub cy: f64,
}

/// Frame-sorted box centers of one instance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajPoint>,
}

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRange {
    pub start: u32,
    pub end: u32,
}

impl FrameRange {
    pub fn len(&self) -> u32 {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, frame: u32) -> bool {
        (self.start..=self.end).contains(&frame)
    }
}

impl Trajectory {
    pub fn new(mut points: Vec<TrajPoint>) -> Self {
        points.sort_by_key(|p| p.frame);
        Self { points }
    }

    pub fn from_observations(observations: &[EntityObservation]) -> Self {
        Self::new(
            observations
                .iter()
                .map(|o| TrajPoint {
                    frame: o.frame,
                    cx: o.bbox.cx,
                    cy: o.bbox.cy,
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn span(&self) -> Option<FrameRange> {
        Some(FrameRange {
            start: self.points.first()?.frame,
            end: self.points.last()?.frame,
        })
    }

    pub fn at(&self, frame: u32) -> Option<(f64, f64)> {
        self.points
            .binary_search_by_key(&frame, |p| p.frame)
            .ok()
            .map(|i| (self.points[i].cx, self.points[i].cy))
    }

    /// Center at `frame`, or at the temporally closest recorded frame (earlier wins ties).
    pub fn at_or_nearest(&self, frame: u32) -> Option<(f64, f64)> {
        self.points
            .iter()
            .min_by_key(|p| (p.frame.abs_diff(frame), p.frame))
            .map(|p| (p.cx, p.cy))
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| TrajPoint {
                    frame: p.frame,
                    cx: p.cx + dx,
                    cy: p.cy + dy,
                })
                .collect(),
        }
    }
}

/// Frames where both instances exist, as the overlap of their spans.
pub fn temporal_intersection(a: &Trajectory, b: &Trajectory) -> Option<FrameRange> {
    let (sa, sb) = (a.span()?, b.span()?);
    let start = sa.start.max(sb.start);
    let end = sa.end.min(sb.end);
    (start <= end).then_some(FrameRange { start, end })
}

/// Midpoint of a range; even-length ranges take the lower median.
pub fn central_frame(range: FrameRange) -> u32 {
    range.start + (range.end - range.start) / 2
}

/// Relative position `(x_i - x_j, y_i - y_j)` at `frame`.
pub fn traj_pos(a: &Trajectory, b: &Trajectory, frame: u32) -> Result<(f64, f64)> {
    let missing = |which: &str| {
        Error::Contract(format!("trajectory {which} has no observation at frame {frame}"))
    };
    let (xa, ya) = a.at(frame).ok_or_else(|| missing("i"))?;
    let (xb, yb) = b.at(frame).ok_or_else(|| missing("j"))?;
    Ok((xa - xb, ya - yb))
}

/// Frame pair used when temporal overlap is ignored: the pair of recorded
/// frames with the smallest gap, taking the lower median among ties.
///
/// For overlapping gap-free trajectories this is the central frame of the
/// intersection in both trajectories.
pub fn nearest_frames(a: &Trajectory, b: &Trajectory) -> Option<(u32, u32)> {
    let best = a
        .points
        .iter()
        .flat_map(|p| b.points.iter().map(move |q| p.frame.abs_diff(q.frame)))
        .min()?;
    let ties: Vec<(u32, u32)> = a
        .points
        .iter()
        .flat_map(|p| b.points.iter().map(move |q| (p.frame, q.frame)))
        .filter(|(fa, fb)| fa.abs_diff(*fb) == best)
        .collect();
    Some(ties[(ties.len() - 1) / 2])
}

/// Sinusoidal embedding parameters for relative positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajEmbedConfig {
    pub bands: usize,
    pub max_frequency: f64,
    /// Encode each axis with both sine and cosine instead of sine-x / cosine-y.
    pub symmetric: bool,
}

impl TrajEmbedConfig {
    pub fn dim(&self) -> usize {
        if self.symmetric {
            4 * self.bands
        } else {
            2 * self.bands
        }
    }

    /// Geometric frequency ladder from 1 to `max_frequency`.
    pub fn frequencies(&self) -> Vec<f64> {
        let b = self.bands;
        (0..b)
            .map(|i| {
                if b == 1 {
                    1.0
                } else {
                    self.max_frequency.powf(i as f64 / (b - 1) as f64)
                }
            })
            .collect()
    }
}

/// `[sin(w_b * dx)]_b ++ [cos(w_b * dy)]_b`, or all four blocks when symmetric.
pub fn traj_embed(dx: f64, dy: f64, cfg: &TrajEmbedConfig) -> Vec<f64> {
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(cfg.dim());
    out.extend(freqs.iter().map(|w| (w * dx).sin()));
    if cfg.symmetric {
        out.extend(freqs.iter().map(|w| (w * dx).cos()));
        out.extend(freqs.iter().map(|w| (w * dy).sin()));
    }
    out.extend(freqs.iter().map(|w| (w * dy).cos()));
    out
}

/// Display order of instances: by first frame, then left-to-right, then top-to-bottom.
pub fn appearance_order(trajectories: &[&Trajectory]) -> Vec<usize> {
    let key = |t: &Trajectory| {
        t.points
            .first()
            .map_or((u32::MAX, f64::INFINITY, f64::INFINITY), |p| (p.frame, p.cx, p.cy))
    };
    let mut idx: Vec<usize> = (0..trajectories.len()).collect();
    idx.sort_by(|&i, &j| {
        let (fi, xi, yi) = key(trajectories[i]);
        let (fj, xj, yj) = key(trajectories[j]);
        fi.cmp(&fj)
            .then(xi.total_cmp(&xj))
            .then(yi.total_cmp(&yj))
            .then(i.cmp(&j))
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(start: u32, end: u32) -> Trajectory {
        Trajectory::new(
            (start..=end)
                .map(|f| TrajPoint {
                    frame: f,
                    cx: 0.1 * f as f64,
                    cy: 0.5,
                })
                .collect(),
        )
    }

    #[test]
    fn intersections() {
        assert_eq!(
            temporal_intersection(&span(2, 8), &span(4, 12)),
            Some(FrameRange { start: 4, end: 8 })
        );
        assert_eq!(temporal_intersection(&span(0, 3), &span(5, 9)), None);
        assert_eq!(
            temporal_intersection(&span(3, 6), &span(3, 6)),
            Some(FrameRange { start: 3, end: 6 })
        );
    }

    #[test]
    fn central_frames() {
        assert_eq!(central_frame(FrameRange { start: 4, end: 8 }), 6);
        assert_eq!(central_frame(FrameRange { start: 4, end: 7 }), 5);
        assert_eq!(central_frame(FrameRange { start: 3, end: 3 }), 3);
    }

    #[test]
    fn positions() {
        let a = Trajectory::new(vec![TrajPoint { frame: 2, cx: 0.8, cy: 0.3 }]);
        let b = Trajectory::new(vec![TrajPoint { frame: 2, cx: 0.2, cy: 0.3 }]);
        let (dx, dy) = traj_pos(&a, &b, 2).unwrap();
        assert!((dx - 0.6).abs() < 1e-15);
        assert_eq!(dy, 0.0);
        assert_eq!(traj_pos(&a, &a, 2).unwrap(), (0.0, 0.0));
        assert!(traj_pos(&a, &b, 3).is_err());
    }

    #[test]
    fn embed_at_origin() {
        let cfg = TrajEmbedConfig {
            bands: 4,
            max_frequency: 32.0,
            symmetric: false,
        };
        let e = traj_embed(0.0, 0.0, &cfg);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let f = cfg.frequencies();
        assert_eq!(f[0], 1.0);
        assert!((f[3] - 32.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_frames_disjoint_and_overlapping() {
        assert_eq!(nearest_frames(&span(0, 3), &span(6, 9)), Some((3, 6)));
        // overlap [4, 8] -> central frame 6 in both
        assert_eq!(nearest_frames(&span(2, 8), &span(4, 12)), Some((6, 6)));
    }

    #[test]
    fn appearance_order_breaks_ties_by_position() {
        let a = Trajectory::new(vec![TrajPoint { frame: 0, cx: 0.7, cy: 0.1 }]);
        let b = Trajectory::new(vec![TrajPoint { frame: 0, cx: 0.2, cy: 0.9 }]);
        let c = Trajectory::new(vec![TrajPoint { frame: 1, cx: 0.0, cy: 0.0 }]);
        assert_eq!(appearance_order(&[&c, &a, &b]), vec![2, 1, 0]);
    }
}
