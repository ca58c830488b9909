use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::CorpusConfig;
use super::qa::make_qa;
use super::types::{BBox, EntityObservation, Quality, TextInstance, VideoSample};
use crate::error::Result;

/// Keeps fully-visible boxes strictly inside the frame despite rounding.
const EDGE_MARGIN: f64 = 1e-6;
/// Rejection-sampling budget when drawing corruption for a degraded instance.
const CORRUPTION_ATTEMPTS: usize = 64;
const PLACEMENT_ATTEMPTS: usize = 24;

/// Which frame edge clips a box, deciding which end of the text survives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipSide {
    /// Clipped by the left edge: the right part (suffix) stays visible.
    Left,
    /// Clipped by the right edge: the left part (prefix) stays visible.
    Right,
    None,
}

impl ClipSide {
    pub fn of(bbox: &BBox) -> Self {
        if bbox.x0() < 0.0 {
            ClipSide::Left
        } else if bbox.x1() > 1.0 {
            ClipSide::Right
        } else {
            ClipSide::None
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorruptionParams {
    pub alphabet: Vec<char>,
    pub substitution_prob: f64,
}

impl CorruptionParams {
    pub fn from_config(cfg: &CorpusConfig) -> Self {
        Self {
            alphabet: cfg.alphabet_chars(),
            substitution_prob: cfg.substitution_prob,
        }
    }
}

fn substitute<R: Rng + ?Sized>(c: char, alphabet: &[char], rng: &mut R) -> char {
    let others: Vec<char> = alphabet.iter().copied().filter(|&a| a != c).collect();
    others[rng.random_range(0..others.len())]
}

/// Produces the OCR reading of one sighting.
///
/// Blurred readings draw one uniform per character (and one index per
/// substituted character); truncated readings keep `round(len * visible)`
/// characters from the side that is still inside the frame.
pub fn corrupt_observation<R: Rng + ?Sized>(
    canonical: &str,
    quality: Quality,
    visible_fraction: f64,
    side: ClipSide,
    params: &CorruptionParams,
    rng: &mut R,
) -> String {
    match quality {
        Quality::Clean => canonical.to_string(),
        Quality::Blurred => canonical
            .chars()
            .map(|c| {
                if rng.random::<f64>() < params.substitution_prob {
                    substitute(c, &params.alphabet, rng)
                } else {
                    c
                }
            })
            .collect(),
        Quality::Truncated => {
            let chars: Vec<char> = canonical.chars().collect();
            let keep = ((chars.len() as f64) * visible_fraction.clamp(0.0, 1.0)).round() as usize;
            let keep = keep.min(chars.len());
            match side {
                ClipSide::Left => chars[chars.len() - keep..].iter().collect(),
                ClipSide::Right | ClipSide::None => chars[..keep].iter().collect(),
            }
        }
    }
}

fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Feature-level stand-in for pooled appearance features.
///
/// A text-dependent base vector, a quality indicator in the first three slots,
/// and Gaussian noise whose spread grows with degradation.
pub fn visual_feature<R: Rng + ?Sized>(
    canonical: &str,
    quality: Quality,
    dim: usize,
    rng: &mut R,
) -> Vec<f32> {
    let mut base_rng = ChaCha8Rng::seed_from_u64(fnv1a(canonical));
    let unit = Normal::new(0.0, 0.5).expect("valid normal");
    let sigma = match quality {
        Quality::Clean => 0.05,
        Quality::Blurred => 0.35,
        Quality::Truncated => 0.2,
    };
    let noise = Normal::new(0.0, sigma).expect("valid normal");
    (0..dim)
        .map(|d| {
            let mut v: f64 = unit.sample(&mut base_rng);
            if d < 3 && d == quality.index() {
                v += 1.0;
            }
            (v + noise.sample(rng)) as f32
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Plan {
    start: u32,
    end: u32,
    cx0: f64,
    cy0: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
    degraded: bool,
    edge: bool,
}

impl Plan {
    fn bbox_at(&self, frame: u32) -> BBox {
        let dt = f64::from(frame - self.start);
        BBox {
            cx: self.cx0 + self.vx * dt,
            cy: self.cy0 + self.vy * dt,
            w: self.w,
            h: self.h,
        }
    }

    fn touches(&self, other: &Plan) -> bool {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        (lo..=hi).any(|f| {
            let a = self.bbox_at(f);
            let b = other.bbox_at(f);
            // a small pad so neighbours never share pixels
            a.x0() < b.x1() + 0.01
                && b.x0() < a.x1() + 0.01
                && a.y0() < b.y1() + 0.01
                && b.y0() < a.y1() + 0.01
        })
    }
}

fn random_text<R: Rng + ?Sized>(cfg: &CorpusConfig, taken: &[String], rng: &mut R) -> String {
    let alphabet = cfg.alphabet_chars();
    loop {
        let len = rng.random_range(cfg.min_text_len..=cfg.max_text_len);
        let text: String = (0..len)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect();
        if !taken.contains(&text) {
            return text;
        }
    }
}

/// Range of the starting coordinate that keeps a box of extent `size`
/// inside [0, 1] while travelling `travel` along the axis.
fn start_range(size: f64, travel: f64) -> (f64, f64) {
    let lo = size / 2.0 + EDGE_MARGIN - travel.min(0.0);
    let hi = 1.0 - size / 2.0 - EDGE_MARGIN - travel.max(0.0);
    (lo, hi)
}

fn uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn free_plan<R: Rng + ?Sized>(
    cfg: &CorpusConfig,
    start: u32,
    end: u32,
    w: f64,
    h: f64,
    degraded: bool,
    rng: &mut R,
) -> Plan {
    let span = f64::from(end - start);
    let speed = uniform(cfg.min_speed, cfg.max_speed, rng);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let mut vx = speed * angle.cos();
    let mut vy = speed * angle.sin();
    let room_x = 1.0 - w - 2.0 * EDGE_MARGIN;
    let room_y = 1.0 - h - 2.0 * EDGE_MARGIN;
    if span > 0.0 {
        if (vx * span).abs() > room_x {
            vx = vx.signum() * room_x / span;
        }
        if (vy * span).abs() > room_y {
            vy = vy.signum() * room_y / span;
        }
    }
    let (xlo, xhi) = start_range(w, vx * span);
    let (ylo, yhi) = start_range(h, vy * span);
    Plan {
        start,
        end,
        cx0: uniform(xlo, xhi, rng),
        cy0: uniform(ylo, yhi, rng),
        vx,
        vy,
        w,
        h,
        degraded,
        edge: false,
    }
}

/// A degraded instance that enters or leaves through the left or right edge.
fn edge_plan<R: Rng + ?Sized>(
    cfg: &CorpusConfig,
    start: u32,
    end: u32,
    w: f64,
    h: f64,
    rng: &mut R,
) -> Plan {
    let span = f64::from(end - start);
    let entering = rng.random_bool(0.5);
    let from_left = rng.random_bool(0.5);
    let visible = rng.random_range(0.15..=0.85);
    let speed = uniform(cfg.min_speed.max(0.01), cfg.max_speed.max(0.02), rng);
    // never cross the opposite edge
    let max_travel = (1.0 - w - EDGE_MARGIN - visible * w).max(0.0);
    let travel = (speed * span).min(max_travel);
    let clipped_cx = visible * w - w / 2.0;
    // position at the clipped extreme and at the other extreme, left-edge frame of reference
    let (first, last) = if entering {
        (clipped_cx, clipped_cx + travel)
    } else {
        (clipped_cx + travel, clipped_cx)
    };
    let (first, last) = if from_left {
        (first, last)
    } else {
        (1.0 - first, 1.0 - last)
    };
    let vx = if span > 0.0 { (last - first) / span } else { 0.0 };
    let cy = uniform(h / 2.0 + EDGE_MARGIN, 1.0 - h / 2.0 - EDGE_MARGIN, rng);
    Plan {
        start,
        end,
        cx0: first,
        cy0: cy,
        vx,
        vy: 0.0,
        w,
        h,
        degraded: true,
        edge: true,
    }
}

/// Places a word on the same text line as `anchor`, moving with it.
fn same_line_plan<R: Rng + ?Sized>(anchor: &Plan, w: f64, degraded: bool, rng: &mut R) -> Option<Plan> {
    let gap = rng.random_range(0.02..=0.08);
    let offset = anchor.w / 2.0 + w / 2.0 + gap;
    let right_first = rng.random_bool(0.5);
    for dir in [right_first, !right_first] {
        let sign = if dir { 1.0 } else { -1.0 };
        let plan = Plan {
            cx0: anchor.cx0 + sign * offset,
            w,
            degraded,
            edge: false,
            ..anchor.clone()
        };
        let fits = [plan.start, plan.end]
            .iter()
            .all(|&f| plan.bbox_at(f).is_inside_unit_square());
        if fits {
            return Some(plan);
        }
    }
    None
}

fn observe<R: Rng + ?Sized>(
    plan: &Plan,
    id: u32,
    text: &str,
    cfg: &CorpusConfig,
    params: &CorruptionParams,
    rng: &mut R,
) -> Vec<EntityObservation> {
    let mut observations = Vec::new();
    for frame in plan.start..=plan.end {
        let bbox = plan.bbox_at(frame);
        let visible = bbox.visible_fraction();
        if visible <= 0.0 {
            continue;
        }
        let quality = if visible < 1.0 {
            Quality::Truncated
        } else if plan.degraded && rng.random_bool(cfg.blur_prob) {
            Quality::Blurred
        } else {
            Quality::Clean
        };
        let ocr_text = corrupt_observation(text, quality, visible, ClipSide::of(&bbox), params, rng);
        observations.push(EntityObservation {
            frame,
            bbox,
            ocr_text,
            visual_feat: visual_feature(text, quality, cfg.visual_dim, rng),
            quality,
            instance_id_gt: id,
        });
    }
    observations
}

/// Forces one visible reading of a degraded instance to differ from its text.
fn force_corruption<R: Rng + ?Sized>(
    observations: &mut [EntityObservation],
    text: &str,
    cfg: &CorpusConfig,
    params: &CorruptionParams,
    rng: &mut R,
) {
    let Some(obs) = observations
        .iter_mut()
        .find(|o| o.quality != Quality::Truncated)
    else {
        return;
    };
    let mut chars: Vec<char> = text.chars().collect();
    let pos = rng.random_range(0..chars.len());
    chars[pos] = substitute(chars[pos], &params.alphabet, rng);
    obs.quality = Quality::Blurred;
    obs.ocr_text = chars.into_iter().collect();
    obs.visual_feat = visual_feature(text, Quality::Blurred, cfg.visual_dim, rng);
}

/// Generates one video deterministically from `(config, seed)`.
pub fn generate_video(config: &CorpusConfig, seed: u64) -> Result<VideoSample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = CorruptionParams::from_config(config);
    let num_frames = rng.random_range(config.min_frames..=config.max_frames);
    let count = rng.random_range(config.min_instances..=config.max_instances);
    let min_life = ((config.min_lifespan * f64::from(num_frames)).ceil() as u32).clamp(1, num_frames);

    let mut texts: Vec<String> = Vec::new();
    let mut plans: Vec<Plan> = Vec::new();
    for _ in 0..count {
        let text = random_text(config, &texts, &mut rng);
        let w = text.chars().count() as f64 * config.char_width;
        let h = config.box_height;
        let degraded = rng.random_bool(config.corrupted_fraction);
        let edge = degraded && rng.random_bool(config.edge_prob);
        let anchors: Vec<&Plan> = plans.iter().filter(|p| !p.edge).collect();

        let mut chosen = None;
        if !edge && !anchors.is_empty() && rng.random_bool(config.same_line_prob) {
            let anchor = anchors[rng.random_range(0..anchors.len())];
            chosen = same_line_plan(anchor, w, degraded, &mut rng)
                .filter(|p| plans.iter().all(|q| !p.touches(q)));
        }
        if chosen.is_none() {
            let mut last = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let life = rng.random_range(min_life..=num_frames);
                let start = rng.random_range(0..=num_frames - life);
                let end = start + life - 1;
                let plan = if edge {
                    edge_plan(config, start, end, w, h, &mut rng)
                } else {
                    free_plan(config, start, end, w, h, degraded, &mut rng)
                };
                let clear = plans.iter().all(|q| !plan.touches(q));
                last = Some(plan);
                if clear {
                    break;
                }
            }
            chosen = last;
        }
        plans.push(chosen.expect("at least one placement attempt"));
        texts.push(text);
    }

    let mut instances = Vec::with_capacity(plans.len());
    for (idx, (plan, text)) in plans.iter().zip(&texts).enumerate() {
        let id = idx as u32;
        let mut observations = Vec::new();
        for _ in 0..CORRUPTION_ATTEMPTS {
            observations = observe(plan, id, text, config, &params, &mut rng);
            if !plan.degraded || observations.iter().any(|o| &o.ocr_text != text) {
                break;
            }
        }
        if plan.degraded && observations.iter().all(|o| &o.ocr_text == text) {
            force_corruption(&mut observations, text, config, &params, &mut rng);
        }
        instances.push(TextInstance {
            id,
            canonical_text: text.clone(),
            observations,
        });
    }
    instances.retain(|inst| !inst.observations.is_empty());

    let mut sample = VideoSample {
        id: seed,
        num_frames,
        instances,
        qa: Vec::new(),
        seed,
    };
    sample.qa = make_qa(&sample, &mut rng);
    Ok(sample)
}

/// Generates `count` videos; video `i` uses seed `config.seed + i`.
pub fn generate_corpus(config: &CorpusConfig, count: usize) -> Result<Vec<VideoSample>> {
    (0..count as u64)
        .map(|i| {
            let mut sample = generate_video(config, config.seed.wrapping_add(i))?;
            sample.id = i;
            Ok(sample)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(p: f64) -> CorruptionParams {
        CorruptionParams {
            alphabet: "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789".chars().collect(),
            substitution_prob: p,
        }
    }

    #[test]
    fn clean_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt_observation("CARS", Quality::Clean, 1.0, ClipSide::None, &params(0.9), &mut rng);
        assert_eq!(out, "CARS");
    }

    #[test]
    fn zero_visibility_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = corrupt_observation("CARS", Quality::Truncated, 0.0, ClipSide::Left, &params(0.0), &mut rng);
        assert_eq!(out, "");
    }

    #[test]
    fn truncation_keeps_the_visible_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(0.0);
        assert_eq!(
            corrupt_observation("ABCDEF", Quality::Truncated, 0.5, ClipSide::Left, &p, &mut rng),
            "DEF"
        );
        assert_eq!(
            corrupt_observation("ABCDEF", Quality::Truncated, 0.5, ClipSide::Right, &p, &mut rng),
            "ABC"
        );
        // round(6 * 0.75) = round(4.5) = 5
        assert_eq!(
            corrupt_observation("ABCDEF", Quality::Truncated, 0.75, ClipSide::Right, &p, &mut rng),
            "ABCDE"
        );
    }

    #[test]
    fn blur_replays_the_seeded_rng() {
        let p = params(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let out = corrupt_observation("DRDG8A", Quality::Blurred, 1.0, ClipSide::None, &p, &mut rng);

        // independent replay: one uniform per character, then an index among the others
        let mut replay = ChaCha8Rng::seed_from_u64(42);
        let mut substituted = Vec::new();
        for (i, c) in "DRDG8A".chars().enumerate() {
            if replay.random::<f64>() < 0.5 {
                let others: Vec<char> = p.alphabet.iter().copied().filter(|&a| a != c).collect();
                let _ = others[replay.random_range(0..others.len())];
                substituted.push(i);
            }
        }
        assert_eq!(out.chars().count(), 6);
        for (i, (a, b)) in out.chars().zip("DRDG8A".chars()).enumerate() {
            assert_eq!(a != b, substituted.contains(&i), "position {i}");
        }
    }

    #[test]
    fn single_centered_clean_instance() {
        let cfg = CorpusConfig {
            min_frames: 1,
            max_frames: 1,
            min_instances: 1,
            max_instances: 1,
            blur_prob: 0.0,
            corrupted_fraction: 0.0,
            max_speed: 0.0,
            ..CorpusConfig::default()
        };
        let s = generate_video(&cfg, 7).unwrap();
        assert_eq!(s.instances.len(), 1);
        let inst = &s.instances[0];
        assert_eq!(inst.observations.len(), 1);
        assert_eq!(inst.observations[0].quality, Quality::Clean);
        assert_eq!(inst.observations[0].ocr_text, inst.canonical_text);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = CorpusConfig::default();
        let a = serde_json::to_string(&generate_video(&cfg, 99).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_video(&cfg, 99).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = CorpusConfig {
            max_text_len: 40,
            ..CorpusConfig::default()
        };
        assert!(generate_video(&cfg, 0).is_err());
    }
}
