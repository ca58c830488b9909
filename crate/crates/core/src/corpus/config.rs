use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the synthetic world generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_frames: u32,
    pub max_frames: u32,
    pub min_instances: u32,
    pub max_instances: u32,
    pub alphabet: String,
    pub min_text_len: usize,
    pub max_text_len: usize,
    /// Box width per character.
    pub char_width: f64,
    pub box_height: f64,
    /// Per-frame displacement of the box center, in normalized units.
    pub min_speed: f64,
    pub max_speed: f64,
    /// Per-frame probability that a degraded instance is blurred.
    pub blur_prob: f64,
    /// Per-character substitution probability for a blurred reading.
    pub substitution_prob: f64,
    /// Target fraction of instances with at least one corrupted observation.
    pub corrupted_fraction: f64,
    /// Probability that a degraded instance enters or exits through a frame edge.
    pub edge_prob: f64,
    /// Probability that an instance is placed on the same text line as an earlier one.
    pub same_line_prob: f64,
    /// Shortest lifespan as a fraction of the video length.
    pub min_lifespan: f64,
    pub visual_dim: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_frames: 6,
            max_frames: 12,
            min_instances: 2,
            max_instances: 5,
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".to_string(),
            min_text_len: 3,
            max_text_len: 6,
            char_width: 0.04,
            box_height: 0.06,
            min_speed: 0.0,
            max_speed: 0.04,
            blur_prob: 0.7,
            substitution_prob: 0.3,
            corrupted_fraction: 0.65,
            edge_prob: 0.4,
            same_line_prob: 0.2,
            min_lifespan: 0.35,
            visual_dim: 16,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn alphabet_chars(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, p) in [
            ("blur_prob", self.blur_prob),
            ("substitution_prob", self.substitution_prob),
            ("corrupted_fraction", self.corrupted_fraction),
            ("edge_prob", self.edge_prob),
            ("same_line_prob", self.same_line_prob),
            ("min_lifespan", self.min_lifespan),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range [{}, {}] is empty or starts at 0",
                self.min_frames, self.max_frames
            ));
        }
        if self.min_instances > self.max_instances {
            return bad(format!(
                "instance range [{}, {}] is empty",
                self.min_instances, self.max_instances
            ));
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return bad(format!(
                "text length range [{}, {}] is empty or starts at 0",
                self.min_text_len, self.max_text_len
            ));
        }
        let chars = self.alphabet_chars();
        if chars.len() < 2 {
            return bad("alphabet needs at least two characters".into());
        }
        let mut dedup = chars.clone();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != chars.len() || chars.iter().any(|c| c.is_whitespace()) {
            return bad("alphabet must hold distinct non-whitespace characters".into());
        }
        if !(self.char_width > 0.0 && self.box_height > 0.0) {
            return bad("char_width and box_height must be positive".into());
        }
        let widest = self.max_text_len as f64 * self.char_width;
        if widest >= 1.0 || self.box_height >= 1.0 {
            return bad(format!(
                "a {}-character box ({widest:.3} x {:.3}) does not fit in the unit square",
                self.max_text_len, self.box_height
            ));
        }
        if self.min_speed < 0.0 || self.min_speed > self.max_speed {
            return bad(format!(
                "speed range [{}, {}] is invalid",
                self.min_speed, self.max_speed
            ));
        }
        if self.visual_dim < 3 {
            return bad("visual_dim must be at least 3 (quality indicator slots)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        CorpusConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_text_wider_than_frame() {
        let cfg = CorpusConfig {
            max_text_len: 30,
            char_width: 0.05,
            ..CorpusConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_probability_out_of_range() {
        let cfg = CorpusConfig {
            blur_prob: 1.5,
            ..CorpusConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_key_is_error() {
        let err = crate::config::parse::<CorpusConfig>(
            "blur_prob = 0.5\nbogus = 1\n",
            std::path::Path::new("x.toml"),
        )
        .unwrap_err();
        assert!(err.is_config());
    }
}
