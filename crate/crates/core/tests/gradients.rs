mod common;

use candle_core::Var;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtqa_core::trace::BiasMode;
use vtqa_core::Quality;

use common::{gradient_check, instance, randomize, tiny_gather, tiny_trace, trace_example};

const TOLERANCE: f64 = 1e-3;

fn report(name: &str, samples: &[common::GradSample]) -> f64 {
    let worst = samples.iter().map(|s| s.relative_error()).fold(0.0, f64::max);
    for s in samples.iter().filter(|s| s.relative_error() > TOLERANCE) {
        eprintln!("{name}: {s:?} rel {:.3e}", s.relative_error());
    }
    worst
}

#[test]
fn perception_loss_gradients_match_finite_differences() {
    let model = tiny_gather();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize(&model.params().vars(), &mut rng, 0.3);
    let inst = instance(
        0,
        &[(0, "CAR5", Quality::Blurred), (1, "CARS", Quality::Clean), (2, "CA", Quality::Truncated)],
        "CARS",
        4,
    );
    let example = model.example(&inst, "CARS").unwrap();
    let vars = model.params().vars();
    let samples = gradient_check(&vars, 24, &mut rng, || model.loss(&[&example]).unwrap());
    let worst = report("gather", &samples);
    assert!(worst <= TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn bias_projection_gradients_match_finite_differences() {
    let model = tiny_trace(BiasMode::Full);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    randomize(&model.params().vars(), &mut rng, 0.3);
    let example = trace_example(&model);
    let bias: Vec<Var> = model
        .params()
        .named()
        .iter()
        .filter(|(name, _)| name.starts_with("bias."))
        .map(|(_, v)| v.clone())
        .collect();
    assert!(!bias.is_empty());
    let samples = gradient_check(&bias, 20, &mut rng, || model.loss(&[&example]).unwrap());
    let worst = report("bias", &samples);
    assert!(worst <= TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn trace_loss_gradients_match_finite_differences() {
    let model = tiny_trace(BiasMode::SpatialOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    randomize(&model.params().vars(), &mut rng, 0.3);
    let example = trace_example(&model);
    let vars = model.params().vars();
    let samples = gradient_check(&vars, 20, &mut rng, || model.loss(&[&example]).unwrap());
    let worst = report("trace", &samples);
    assert!(worst <= TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn unbiased_model_sends_no_gradient_to_bias_parameters() {
    let model = tiny_trace(BiasMode::Off);
    let example = trace_example(&model);
    let grads = model.loss(&[&example]).unwrap().backward().unwrap();
    for (name, v) in model.params().named() {
        if name.starts_with("bias.") {
            assert!(grads.get(v.as_tensor()).is_none(), "{name} received a gradient");
        }
    }
}
