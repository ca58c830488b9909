//! Answer scoring: VQA accuracy, ANLS, and encoder token-length accounting.

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_answer, VideoSample};
use crate::trace::{build_encoder_input, InstanceInput, TraceVocab};

/// Similarity cutoff: normalized distances at or above it score zero.
pub const ANLS_THRESHOLD: f64 = 0.5;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalized_similarity(pred: &str, reference: &str, tau: f64) -> f64 {
    let longest = pred.chars().count().max(reference.chars().count());
    let nl = if longest == 0 {
        0.0
    } else {
        levenshtein(pred, reference) as f64 / longest as f64
    };
    if nl < tau {
        1.0 - nl
    } else {
        0.0
    }
}

/// Best thresholded similarity of `pred` against any reference (after normalization).
pub fn anls(pred: &str, references: &[String], tau: f64) -> f64 {
    let pred = normalize_answer(pred);
    references
        .iter()
        .map(|r| normalized_similarity(&pred, &normalize_answer(r), tau))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// 1 if the prediction equals any reference.
    #[default]
    Exact,
    /// `min(matches / 3, 1)` over annotator answers.
    HumanAgreement,
}

pub fn vqa_accuracy(pred: &str, references: &[String], mode: AccuracyMode) -> f64 {
    let pred = normalize_answer(pred);
    let matches = references
        .iter()
        .filter(|r| normalize_answer(r) == pred)
        .count();
    match mode {
        AccuracyMode::Exact => f64::from(u8::from(matches > 0)),
        AccuracyMode::HumanAgreement => (matches as f64 / 3.0).min(1.0),
    }
}

/// One scored prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub prediction: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub anls: f64,
    pub count: usize,
}

/// Corpus-level means; an empty record set scores zero.
pub fn score_records<'a>(
    records: impl IntoIterator<Item = &'a EvalRecord>,
    mode: AccuracyMode,
) -> Scores {
    let mut s = Scores::default();
    for r in records {
        s.accuracy += vqa_accuracy(&r.prediction, &r.references, mode);
        s.anls += anls(&r.prediction, &r.references, ANLS_THRESHOLD);
        s.count += 1;
    }
    if s.count > 0 {
        s.accuracy /= s.count as f64;
        s.anls /= s.count as f64;
    }
    s
}

/// Instance-token counts with and without fusing sightings into instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLengthReport {
    pub with_gather: Vec<usize>,
    pub without_gather: Vec<usize>,
    pub mean_with: f64,
    pub mean_without: f64,
    /// `mean_without / mean_with`; absent when `mean_with` is zero.
    pub ratio: Option<f64>,
}

fn instance_tokens(vocab: &TraceVocab, instances: Vec<InstanceInput>) -> usize {
    let input = build_encoder_input("?", instances, usize::MAX, vocab)
        .expect("placeholder question is nonempty");
    input.instance_of_token.iter().filter(|i| i.is_some()).count()
}

fn mean(xs: &[usize]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<usize>() as f64 / xs.len() as f64
    }
}

/// Counts encoder tokens spent on instances for each sample.
///
/// `gather_predictions[s][k]` is the fused text of instance `k` of sample `s`.
/// The without-gather count treats every sighting as its own instance. The
/// question prefix is identical in both modes and is not counted.
pub fn token_length_report(
    corpus: &[VideoSample],
    vocab: &TraceVocab,
    gather_predictions: &[Vec<String>],
) -> TokenLengthReport {
    let mut with_gather = Vec::with_capacity(corpus.len());
    let mut without_gather = Vec::with_capacity(corpus.len());
    for (sample, preds) in corpus.iter().zip(gather_predictions) {
        let fused = sample
            .instances
            .iter()
            .zip(preds)
            .map(|(inst, text)| InstanceInput::from_observations(text.clone(), &inst.observations))
            .collect();
        with_gather.push(instance_tokens(vocab, fused));
        let sightings = sample
            .instances
            .iter()
            .flat_map(|inst| inst.observations.iter())
            .map(|o| InstanceInput::from_observations(o.ocr_text.clone(), std::slice::from_ref(o)))
            .collect();
        without_gather.push(instance_tokens(vocab, sightings));
    }
    let mean_with = mean(&with_gather);
    let mean_without = mean(&without_gather);
    TokenLengthReport {
        ratio: (mean_with > 0.0).then(|| mean_without / mean_with),
        with_gather,
        without_gather,
        mean_with,
        mean_without,
    }
}
