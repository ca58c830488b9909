#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vtqa_core::gather::{GatherModel, GatherModelConfig};
use vtqa_core::trace::geometry::{TrajPoint, Trajectory};
use vtqa_core::trace::{
    answer_targets, build_encoder_input, BiasMode, InstanceInput, TraceExample, TraceModel, TraceModelConfig,
};
use vtqa_core::{BBox, EntityObservation, Quality, TextInstance};

/// Full-table edit distance, written independently of the library.
pub fn edit_distance_table(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in t.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        t[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let c = usize::from(a[i - 1] != b[j - 1]);
            t[i][j] = (t[i - 1][j] + 1).min(t[i][j - 1] + 1).min(t[i - 1][j - 1] + c);
        }
    }
    t[a.len()][b.len()]
}

pub fn random_string(rng: &mut ChaCha8Rng, max_len: usize, alphabet: &[char]) -> String {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

/// A gap-free trajectory over `[start, end]` drifting from a random point.
pub fn random_trajectory(rng: &mut ChaCha8Rng, frames: u32) -> Trajectory {
    let start = rng.random_range(0..frames);
    let end = rng.random_range(start..frames);
    let (mut x, mut y) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let (vx, vy) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    Trajectory::new(
        (start..=end)
            .map(|frame| {
                let p = TrajPoint { frame, cx: x, cy: y };
                x += vx;
                y += vy;
                p
            })
            .collect(),
    )
}

pub fn instance(id: u32, readings: &[(u32, &str, Quality)], canonical: &str, visual_dim: usize) -> TextInstance {
    TextInstance {
        id,
        canonical_text: canonical.into(),
        observations: readings
            .iter()
            .map(|&(frame, text, quality)| EntityObservation {
                frame,
                bbox: BBox::new(0.3 + 0.02 * frame as f64, 0.4, 0.2, 0.06).unwrap(),
                ocr_text: text.into(),
                visual_feat: (0..visual_dim).map(|d| 0.1 * d as f32 - 0.2).collect(),
                quality,
                instance_id_gt: id,
            })
            .collect(),
    }
}

/// Overwrites every parameter with fresh normal draws so no gradient path sits at an exact zero.
pub fn randomize(vars: &[Var], rng: &mut ChaCha8Rng, std: f64) {
    let normal = rand_distr::Normal::new(0.0, std).unwrap();
    for v in vars {
        let shape = v.as_tensor().dims().to_vec();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
        let t = Tensor::from_vec(data, shape, v.device()).unwrap().to_dtype(v.dtype()).unwrap();
        v.set(&t).unwrap();
    }
}

fn flat(v: &Var) -> Vec<f64> {
    v.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn write(v: &Var, data: Vec<f64>) {
    let t = Tensor::from_vec(data, v.as_tensor().dims(), v.device()).unwrap();
    v.set(&t).unwrap();
}

/// One compared coordinate of a gradient check.
#[derive(Debug)]
pub struct GradSample {
    pub var: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares backprop against central differences on `count` coordinates of
/// `vars` whose analytic gradient is not exactly zero.
pub fn gradient_check(
    vars: &[Var],
    count: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn() -> Tensor,
) -> Vec<GradSample> {
    let grads = loss().backward().unwrap();
    let mut candidates = Vec::new();
    for (vi, v) in vars.iter().enumerate() {
        let Some(g) = grads.get(v.as_tensor()) else { continue };
        let g: Vec<f64> = g.flatten_all().unwrap().to_vec1().unwrap();
        candidates.extend(g.into_iter().enumerate().filter(|(_, x)| *x != 0.0).map(|(i, x)| (vi, i, x)));
    }
    assert!(candidates.len() >= count, "only {} coordinates carry gradient", candidates.len());
    let eps = 1e-5;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (vi, index, analytic) = candidates.swap_remove(rng.random_range(0..candidates.len()));
        let base = flat(&vars[vi]);
        let at = |delta: f64| {
            let mut d = base.clone();
            d[index] += delta;
            write(&vars[vi], d);
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
        write(&vars[vi], base);
        out.push(GradSample { var: vi, index, analytic, numeric });
    }
    out
}

pub fn tiny_gather() -> GatherModel {
    let config = GatherModelConfig {
        width: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        max_observations: 4,
        max_text_len: 6,
        visual_dim: 4,
        max_frames: 8,
        ..GatherModelConfig::default()
    };
    GatherModel::new(config, 7, DType::F64).unwrap()
}

pub fn tiny_trace(mode: BiasMode) -> TraceModel {
    let config = TraceModelConfig {
        width: 8,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        bands: 4,
        max_instances: 4,
        max_answer_len: 8,
        max_tokens: 64,
        ..TraceModelConfig::default()
    };
    TraceModel::new(config, mode, 7, DType::F64).unwrap()
}

fn line(frames: std::ops::RangeInclusive<u32>, cx: f64, cy: f64, vx: f64) -> Trajectory {
    Trajectory::new(frames.map(|frame| TrajPoint { frame, cx: cx + vx * frame as f64, cy }).collect())
}

pub fn trace_example(model: &TraceModel) -> TraceExample {
    let instances = vec![
        InstanceInput::new("CAFE", line(0..=5, 0.2, 0.3, 0.01)),
        InstanceInput::new("OPEN", line(2..=8, 0.7, 0.32, -0.01)),
        InstanceInput::new("EXIT", line(7..=9, 0.5, 0.8, 0.0)),
    ];
    let input = build_encoder_input("what is the text to the right of 'cafe'?", instances, 4, model.vocab()).unwrap();
    let targets = answer_targets(&["open".into()], 0, model.vocab(), 8).unwrap();
    TraceExample { input, targets }
}
