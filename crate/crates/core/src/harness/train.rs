//! Mini-batch training with best-validation checkpointing.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochLog>,
    /// Epoch whose weights were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
}

fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<()> {
    if max_norm <= 0.0 {
        return Ok(());
    }
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * scale)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(())
}

/// Trains `params` on `examples` for a fixed number of epochs.
///
/// Batches are drawn in an order fixed by `seed`. After every epoch
/// `validate` scores the model (higher is better) and the best weights are
/// restored at the end. A non-finite batch loss aborts the run.
pub fn train<E, L, V>(
    params: &ParamStore,
    examples: &[E],
    opt: &OptimizerConfig,
    seed: u64,
    mut loss_fn: L,
    mut validate: V,
) -> Result<TrainOutcome>
where
    L: FnMut(&[&E], &mut ChaCha8Rng) -> Result<Tensor>,
    V: FnMut() -> Result<f64>,
{
    opt.validate()?;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        best_epoch: None,
        best_validation: None,
    };
    if opt.epochs == 0 || examples.is_empty() {
        return Ok(outcome);
    }
    let vars = params.vars();
    let mut adam = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: opt.learning_rate,
            weight_decay: opt.weight_decay,
            ..ParamsAdamW::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches_per_epoch = examples.len().div_ceil(opt.batch_size);
    let total_steps = batches_per_epoch * opt.epochs;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<Vec<Tensor>> = None;
    let mut step = 0;
    for epoch in 0..opt.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in order.chunks(opt.batch_size).enumerate() {
            let batch: Vec<&E> = chunk.iter().map(|&i| &examples[i]).collect();
            let loss = loss_fn(&batch, &mut rng)?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    value,
                });
            }
            loss_sum += value;
            let mut grads = loss.backward()?;
            clip_gradients(&mut grads, &vars, opt.grad_clip)?;
            adam.set_learning_rate(opt.rate_at(step, total_steps));
            adam.step(&grads)?;
            step += 1;
        }
        let validation = validate()?;
        let mean_loss = loss_sum / batches_per_epoch as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4}, validation {validation:.4}");
        outcome.history.push(EpochLog {
            epoch,
            mean_loss,
            validation,
        });
        if outcome.best_validation.is_none_or(|b| validation > b) {
            outcome.best_validation = Some(validation);
            outcome.best_epoch = Some(epoch);
            best = Some(params.copies()?);
        }
    }
    if let Some(values) = best {
        params.set_all(&values)?;
    }
    Ok(outcome)
}
