use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized frame coordinates, stored as center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Contract(format!(
                "box needs positive finite size, got w={w} h={h} at ({cx}, {cy})"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Fraction of the box area that lies inside the unit square.
    pub fn visible_fraction(&self) -> f64 {
        if self.is_inside_unit_square() {
            return 1.0;
        }
        let fx = (self.x1().min(1.0) - self.x0().max(0.0)).max(0.0) / self.w;
        let fy = (self.y1().min(1.0) - self.y0().max(0.0)).max(0.0) / self.h;
        (fx * fy).clamp(0.0, 1.0)
    }

    pub fn is_inside_unit_square(&self) -> bool {
        self.x0() >= 0.0 && self.x1() <= 1.0 && self.y0() >= 0.0 && self.y1() <= 1.0
    }
}

/// Recognition quality of one sighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Clean,
    Blurred,
    Truncated,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Clean, Quality::Blurred, Quality::Truncated];

    pub fn index(self) -> usize {
        match self {
            Quality::Clean => 0,
            Quality::Blurred => 1,
            Quality::Truncated => 2,
        }
    }
}

/// One per-frame sighting of a text instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityObservation {
    pub frame: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub ocr_text: String,
    pub visual_feat: Vec<f32>,
    pub quality: Quality,
    /// Ground-truth identity; models never read it.
    pub instance_id_gt: u32,
}

/// A text instance: one continuous occurrence of a piece of scene text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: u32,
    pub canonical_text: String,
    pub observations: Vec<EntityObservation>,
}

impl TextInstance {
    pub fn start_frame(&self) -> u32 {
        self.observations.first().map_or(0, |o| o.frame)
    }

    pub fn end_frame(&self) -> u32 {
        self.observations.last().map_or(0, |o| o.frame)
    }

    /// True if at least one observation reads differently from the canonical text.
    pub fn is_corrupted(&self) -> bool {
        self.observations
            .iter()
            .any(|o| o.ocr_text != self.canonical_text)
    }
}

/// Anything carrying a frame-sorted list of sightings of one text.
pub trait Sightings {
    fn sightings(&self) -> &[EntityObservation];
}

impl Sightings for TextInstance {
    fn sightings(&self) -> &[EntityObservation] {
        &self.observations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Read,
    SpatialLeft,
    SpatialRight,
    SpatialAbove,
    SpatialBelow,
    Concat,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::Read,
        Template::SpatialLeft,
        Template::SpatialRight,
        Template::SpatialAbove,
        Template::SpatialBelow,
        Template::Concat,
    ];

    pub fn is_spatial(self) -> bool {
        matches!(
            self,
            Template::SpatialLeft
                | Template::SpatialRight
                | Template::SpatialAbove
                | Template::SpatialBelow
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::Read => "read",
            Template::SpatialLeft => "spatial_left",
            Template::SpatialRight => "spatial_right",
            Template::SpatialAbove => "spatial_above",
            Template::SpatialBelow => "spatial_below",
            Template::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    /// Acceptable answers, normalized, sorted and deduplicated.
    pub answers: Vec<String>,
    pub template: Template,
}

/// One synthetic video: the unit of serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSample {
    pub id: u64,
    pub num_frames: u32,
    pub instances: Vec<TextInstance>,
    pub qa: Vec<QAPair>,
    pub seed: u64,
}

impl VideoSample {
    /// The flat entity list grouped by frame, as a detector would emit it.
    ///
    /// Within a frame, entities are ordered by instance position in `instances`.
    pub fn entities_by_frame(&self) -> Vec<Vec<EntityObservation>> {
        let mut frames = vec![Vec::new(); self.num_frames as usize];
        for inst in &self.instances {
            for obs in &inst.observations {
                frames[obs.frame as usize].push(obs.clone());
            }
        }
        frames
    }

    pub fn num_observations(&self) -> usize {
        self.instances.iter().map(|i| i.observations.len()).sum()
    }

    pub fn instance(&self, id: u32) -> Option<&TextInstance> {
        self.instances.iter().find(|i| i.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn visible_fraction_inside_and_clipped() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.1).unwrap();
        assert_eq!(b.visible_fraction(), 1.0);
        let half = BBox::new(0.0, 0.5, 0.2, 0.1).unwrap();
        assert!((half.visible_fraction() - 0.5).abs() < 1e-12);
        let gone = BBox::new(-0.5, 0.5, 0.2, 0.1).unwrap();
        assert_eq!(gone.visible_fraction(), 0.0);
    }

    #[test]
    fn rejects_degenerate_box() {
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.1, -1.0).is_err());
    }

    #[test]
    fn serializes_box_field_name() {
        let obs = EntityObservation {
            frame: 3,
            bbox: BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
            ocr_text: "AB".into(),
            visual_feat: vec![0.5],
            quality: Quality::Truncated,
            instance_id_gt: 1,
        };
        let s = serde_json::to_string(&obs).unwrap();
        assert!(s.contains("\"box\":"));
        assert!(s.contains("\"quality\":\"truncated\""));
    }
}
