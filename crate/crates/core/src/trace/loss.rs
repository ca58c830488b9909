//! Answer supervision for the tracer's decoder.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sequence_cross_entropy, sequence_multi_label};
use crate::vocab::{Special, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLossMode {
    /// Softmax cross-entropy against one sampled reference.
    #[default]
    SampledCe,
    /// Sigmoid cross-entropy per vocabulary entry against the union of references.
    MultiLabel,
}

/// Decoder input and per-step targets for one question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTargets {
    /// `[BOS]` followed by the teacher answer.
    pub prefix: Vec<u32>,
    /// Teacher answer followed by `[EOS]`.
    pub steps: Vec<u32>,
    /// Per step, every reference's token at that step.
    pub multi_hot: Vec<Vec<u32>>,
}

/// Builds targets with reference `teacher` driving the decoder prefix.
pub fn answer_targets(answers: &[String], teacher: usize, vocab: &Vocab, max_len: usize) -> Result<AnswerTargets> {
    let encoded: Vec<Vec<u32>> = answers
        .iter()
        .map(|a| {
            let mut ids = vocab.encode(a);
            ids.push(Special::Eos.id());
            ids
        })
        .collect();
    let Some(teach) = encoded.get(teacher) else {
        return Err(Error::Contract(format!("teacher answer {teacher} out of {} references", answers.len())));
    };
    if let Some(a) = answers.iter().find(|a| a.chars().count() > max_len) {
        return Err(Error::Contract(format!("answer {a:?} exceeds the maximum length {max_len}")));
    }
    let mut prefix = vec![Special::Bos.id()];
    prefix.extend(&teach[..teach.len() - 1]);
    let multi_hot = (0..teach.len())
        .map(|t| {
            let mut ids: Vec<u32> = encoded.iter().filter_map(|e| e.get(t).copied()).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect();
    Ok(AnswerTargets {
        prefix,
        steps: teach.clone(),
        multi_hot,
    })
}

/// Loss of decoder `logits` `(B, N, V)` against per-row targets.
pub fn answer_loss(logits: &Tensor, targets: &[&AnswerTargets], mode: AnswerLossMode) -> Result<Tensor> {
    match mode {
        AnswerLossMode::SampledCe => {
            let steps: Vec<Vec<u32>> = targets.iter().map(|t| t.steps.clone()).collect();
            sequence_cross_entropy(logits, &steps)
        }
        AnswerLossMode::MultiLabel => {
            let hot: Vec<Vec<Vec<u32>>> = targets.iter().map(|t| t.multi_hot.clone()).collect();
            sequence_multi_label(logits, &hot)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::default_charset;
    use candle_core::{DType, Device};

    fn vocab() -> Vocab {
        Vocab::new(&default_charset()).unwrap()
    }

    #[test]
    fn targets_union_per_step() {
        let v = vocab();
        let t = answer_targets(&["ab".into(), "ac".into()], 0, &v, 8).unwrap();
        assert_eq!(t.prefix, vec![Special::Bos.id(), v.char_id('a'), v.char_id('b')]);
        assert_eq!(t.steps, vec![v.char_id('a'), v.char_id('b'), Special::Eos.id()]);
        assert_eq!(t.multi_hot[1], vec![v.char_id('b'), v.char_id('c')]);
        assert!(answer_targets(&["abcdef".into()], 0, &v, 5).is_err());
    }

    #[test]
    fn perfect_prediction_is_free() {
        let v = vocab();
        let t = answer_targets(&["ab".into()], 0, &v, 8).unwrap();
        let mut data = vec![-80.0; 3 * v.len()];
        for (s, &tok) in t.steps.iter().enumerate() {
            data[s * v.len() + tok as usize] = 80.0;
        }
        let logits = Tensor::from_vec(data, (1, 3, v.len()), &Device::Cpu).unwrap();
        for mode in [AnswerLossMode::SampledCe, AnswerLossMode::MultiLabel] {
            let l = answer_loss(&logits, &[&t], mode).unwrap().to_scalar::<f64>().unwrap();
            assert!(l.abs() < 1e-12, "{mode:?}: {l}");
        }
    }

    #[test]
    fn uniform_ce_is_log_vocab() {
        let v = vocab();
        let t = answer_targets(&["xyz".into()], 0, &v, 8).unwrap();
        let logits = Tensor::zeros((1, 4, v.len()), DType::F64, &Device::Cpu).unwrap();
        let l = answer_loss(&logits, &[&t], AnswerLossMode::SampledCe).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - (v.len() as f64).ln()).abs() < 1e-12);
    }
}
