//! Templated questions over a generated video.
//!
//! Spatial relations are measured at the central frame of the two instances'
//! temporal intersection; instance order for `read` questions is the order of
//! first appearance.

use rand::seq::SliceRandom;
use rand::Rng;

use super::types::{QAPair, Template, VideoSample};
use crate::trace::geometry::{
    appearance_order, central_frame, temporal_intersection, Trajectory,
};

/// Minimum separation along the queried axis for a spatial answer.
pub const RELATION_MARGIN: f64 = 0.1;
/// Maximum vertical offset for two words to count as one text line.
pub const LINE_TOLERANCE: f64 = 0.03;
const MAX_SPATIAL_PER_VIDEO: usize = 4;

/// Lowercase and collapse runs of whitespace.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn read_question(rank: usize) -> String {
    format!("what does text {rank} say?")
}

fn spatial_question(template: Template, subject: &str) -> String {
    let relation = match template {
        Template::SpatialLeft => "to the left of",
        Template::SpatialRight => "to the right of",
        Template::SpatialAbove => "above",
        Template::SpatialBelow => "below",
        _ => unreachable!("not a spatial template"),
    };
    format!("what is the text {relation} '{subject}'?")
}

fn concat_question(subject: &str) -> String {
    format!("what does the line with '{subject}' say?")
}

fn quoted(question: &str) -> Option<&str> {
    let start = question.find('\'')? + 1;
    let len = question[start..].find('\'')?;
    Some(&question[start..start + len])
}

/// Offset of `other` relative to `subject` at the central frame of their overlap.
fn relative(subject: &Trajectory, other: &Trajectory) -> Option<(f64, f64)> {
    let frame = central_frame(temporal_intersection(subject, other)?);
    let (xs, ys) = subject.at_or_nearest(frame)?;
    let (xo, yo) = other.at_or_nearest(frame)?;
    Some((xo - xs, yo - ys))
}

/// Index of the unique co-occurring instance on the queried side of `subject`.
fn spatial_answer(trajs: &[Trajectory], subject: usize, template: Template) -> Option<usize> {
    let side: Vec<(usize, f64)> = (0..trajs.len())
        .filter(|&j| j != subject)
        .filter_map(|j| {
            let (dx, dy) = relative(&trajs[subject], &trajs[j])?;
            let signed = match template {
                Template::SpatialLeft => -dx,
                Template::SpatialRight => dx,
                Template::SpatialAbove => -dy,
                Template::SpatialBelow => dy,
                _ => return None,
            };
            (signed > 0.0).then_some((j, signed))
        })
        .collect();
    match side.as_slice() {
        [(j, d)] if *d > RELATION_MARGIN => Some(*j),
        _ => None,
    }
}

/// The unique same-line partner of `subject`, with the pair in reading order.
fn line_partner(trajs: &[Trajectory], subject: usize) -> Option<(usize, usize)> {
    let partners: Vec<(usize, f64)> = (0..trajs.len())
        .filter(|&j| j != subject)
        .filter_map(|j| {
            let (dx, dy) = relative(&trajs[subject], &trajs[j])?;
            (dy.abs() <= LINE_TOLERANCE && dx.abs() > RELATION_MARGIN).then_some((j, dx))
        })
        .collect();
    match partners.as_slice() {
        [(j, dx)] if *dx > 0.0 => Some((subject, *j)),
        [(j, _)] => Some((*j, subject)),
        _ => None,
    }
}

/// Builds the QA pairs for a sample.
///
/// One `read` question about a random instance, up to four spatial questions
/// with unambiguous answers, and one `concat` question per two-word line.
pub fn make_qa<R: Rng + ?Sized>(sample: &VideoSample, rng: &mut R) -> Vec<QAPair> {
    if sample.instances.is_empty() {
        return Vec::new();
    }
    let trajs: Vec<Trajectory> = sample
        .instances
        .iter()
        .map(|i| Trajectory::from_observations(&i.observations))
        .collect();
    let order = appearance_order(&trajs.iter().collect::<Vec<_>>());
    let text = |i: usize| normalize_answer(&sample.instances[i].canonical_text);
    let mut out = Vec::new();

    let rank = rng.random_range(0..order.len());
    out.push(QAPair {
        question: read_question(rank + 1),
        answers: vec![text(order[rank])],
        template: Template::Read,
    });

    let mut spatial = Vec::new();
    for &subject in &order {
        for template in [
            Template::SpatialLeft,
            Template::SpatialRight,
            Template::SpatialAbove,
            Template::SpatialBelow,
        ] {
            if let Some(answer) = spatial_answer(&trajs, subject, template) {
                spatial.push(QAPair {
                    question: spatial_question(template, &text(subject)),
                    answers: vec![text(answer)],
                    template,
                });
            }
        }
    }
    spatial.shuffle(rng);
    spatial.truncate(MAX_SPATIAL_PER_VIDEO);
    out.extend(spatial);

    for &subject in &order {
        let Some((left, right)) = line_partner(&trajs, subject) else {
            continue;
        };
        let other = if left == subject { right } else { left };
        // emit each mutual pair once, from its left word
        if subject != left || line_partner(&trajs, other) != Some((left, right)) {
            continue;
        }
        let mentioned = if rng.random_bool(0.5) { left } else { right };
        out.push(QAPair {
            question: concat_question(&text(mentioned)),
            answers: vec![format!("{} {}", text(left), text(right))],
            template: Template::Concat,
        });
    }
    out
}

/// Re-derives a stored QA pair from the sample's trajectories.
pub fn verify_qa(sample: &VideoSample, qa: &QAPair) -> bool {
    let trajs: Vec<Trajectory> = sample
        .instances
        .iter()
        .map(|i| Trajectory::from_observations(&i.observations))
        .collect();
    let text = |i: usize| normalize_answer(&sample.instances[i].canonical_text);
    let find = |t: &str| (0..trajs.len()).find(|&i| text(i) == t);
    let expected = match qa.template {
        Template::Read => {
            let order = appearance_order(&trajs.iter().collect::<Vec<_>>());
            let rank: Option<usize> = qa
                .question
                .strip_prefix("what does text ")
                .and_then(|r| r.strip_suffix(" say?"))
                .and_then(|r| r.parse().ok());
            rank.and_then(|r| order.get(r.checked_sub(1)?).map(|&i| text(i)))
        }
        Template::Concat => quoted(&qa.question)
            .and_then(find)
            .and_then(|s| line_partner(&trajs, s))
            .map(|(l, r)| format!("{} {}", text(l), text(r))),
        spatial => quoted(&qa.question)
            .and_then(find)
            .and_then(|s| spatial_answer(&trajs, s, spatial))
            .map(text),
    };
    expected.is_some_and(|e| qa.answers == vec![e])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BBox, EntityObservation, Quality, TextInstance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(id: u32, text: &str, frames: std::ops::RangeInclusive<u32>, cx: f64, cy: f64) -> TextInstance {
        TextInstance {
            id,
            canonical_text: text.into(),
            observations: frames
                .map(|frame| EntityObservation {
                    frame,
                    bbox: BBox::new(cx, cy, 0.1, 0.05).unwrap(),
                    ocr_text: text.into(),
                    visual_feat: vec![0.0; 3],
                    quality: Quality::Clean,
                    instance_id_gt: id,
                })
                .collect(),
        }
    }

    fn sample(instances: Vec<TextInstance>) -> VideoSample {
        VideoSample {
            id: 0,
            num_frames: 10,
            instances,
            qa: vec![],
            seed: 0,
        }
    }

    #[test]
    fn single_instance_gets_read_question() {
        let s = sample(vec![instance(0, "STOP", 0..=3, 0.5, 0.5)]);
        let qa = make_qa(&s, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(qa.len(), 1);
        assert_eq!(qa[0].template, Template::Read);
        assert_eq!(qa[0].answers, vec!["stop".to_string()]);
        assert!(verify_qa(&s, &qa[0]));
    }

    #[test]
    fn no_spatial_without_cooccurrence() {
        let s = sample(vec![
            instance(0, "AAA", 0..=3, 0.2, 0.5),
            instance(1, "BBB", 5..=9, 0.8, 0.5),
        ]);
        for seed in 0..20 {
            let qa = make_qa(&s, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(qa.iter().all(|q| !q.template.is_spatial()));
        }
    }

    #[test]
    fn left_of_resolved_at_central_frame() {
        let s = sample(vec![
            instance(0, "AAA", 0..=6, 0.2, 0.5),
            instance(1, "BBB", 2..=9, 0.8, 0.5),
        ]);
        let qa = make_qa(&s, &mut ChaCha8Rng::seed_from_u64(3));
        let left = qa
            .iter()
            .find(|q| q.template == Template::SpatialLeft)
            .expect("left-of question");
        assert_eq!(left.question, "what is the text to the left of 'bbb'?");
        assert_eq!(left.answers, vec!["aaa".to_string()]);
        // same line, far apart: one concat question in reading order
        let concat: Vec<_> = qa.iter().filter(|q| q.template == Template::Concat).collect();
        assert_eq!(concat.len(), 1);
        assert_eq!(concat[0].answers, vec!["aaa bbb".to_string()]);
        assert!(qa.iter().all(|q| verify_qa(&s, q)));
    }

    #[test]
    fn ambiguous_side_is_skipped() {
        // two instances to the left of C: no left-of question about C
        let s = sample(vec![
            instance(0, "AAA", 0..=5, 0.1, 0.2),
            instance(1, "BBB", 0..=5, 0.3, 0.8),
            instance(2, "CCC", 0..=5, 0.8, 0.5),
        ]);
        for seed in 0..10 {
            let qa = make_qa(&s, &mut ChaCha8Rng::seed_from_u64(seed));
            assert!(!qa.iter().any(|q| q.question.contains("left of 'ccc'")));
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  Spring \t & SUMMER "), "spring & summer");
    }
}
