//! The two-stage pipeline: track, transcribe, answer.

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, GatherSource, RunConfig};
use super::report::{AblationRow, AblationTable, RunReport, TemplateScore};
use super::train::{train, TrainOutcome};
use crate::association::{associate, score_tracking_corpus, Track, TrackingReport};
use crate::corpus::{generate_corpus, Sightings, Template, VideoSample};
use crate::error::{Error, Result};
use crate::gather::{heuristic_max, heuristic_random, GatherExample, GatherModel, GatherSequence};
use crate::metrics::{anls, token_length_report, vqa_accuracy, AccuracyMode, ANLS_THRESHOLD};
use crate::trace::{answer_targets, build_encoder_input, BiasMode, EncoderInput, InstanceInput, TraceExample, TraceModel};
use crate::vocab::Vocab;

const EVAL_BATCH: usize = 64;

/// Train, validation and test videos.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<VideoSample>,
    pub val: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// Splits by position: the last videos are the test set, the ones before them validation.
pub fn split_corpus(mut samples: Vec<VideoSample>, val_fraction: f64, test_fraction: f64) -> Splits {
    let n = samples.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_test);
    let test = samples.split_off(n - n_test);
    let val = samples.split_off(n - n_test - n_val);
    Splits {
        train: samples,
        val,
        test,
    }
}

pub fn track_sample(sample: &VideoSample, config: &crate::association::AssociationConfig) -> Vec<Track> {
    associate(&sample.entities_by_frame(), config)
}

/// One question prepared for the tracer.
#[derive(Debug, Clone)]
pub struct TraceItem {
    pub question_id: String,
    pub template: Template,
    pub input: EncoderInput,
    pub answers: Vec<String>,
}

/// Tracer output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub template: Template,
    pub prediction: String,
    pub references: Vec<String>,
}

/// Greedy transcriptions of many sequences, batched.
pub fn decode_all(model: &GatherModel, seqs: &[GatherSequence]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        out.extend(model.decode_sequences(&chunk.iter().collect::<Vec<_>>())?);
    }
    Ok(out)
}

/// Transcribes each sighting group with `source`.
///
/// `oracle` supplies the ground-truth text of each group and is used only by
/// the oracle source.
pub fn transcribe<S: Sightings>(
    source: GatherSource,
    gather: Option<&GatherModel>,
    groups: &[&S],
    oracle: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>> {
    match source {
        GatherSource::Learned => {
            let model = gather.ok_or_else(|| Error::Contract("learned transcription needs a gather model".into()))?;
            let seqs = groups.iter().map(|g| model.sequence(*g)).collect::<Result<Vec<_>>>()?;
            decode_all(model, &seqs)
        }
        GatherSource::Oracle => Ok(oracle.to_vec()),
        GatherSource::Random => groups.iter().map(|g| heuristic_random(*g, rng)).collect(),
        GatherSource::Max => groups.iter().map(|g| heuristic_max(*g)).collect(),
    }
}

fn majority_text(sample: &VideoSample, track: &Track) -> String {
    track
        .majority_instance()
        .and_then(|id| sample.instance(id))
        .map(|i| i.canonical_text.clone())
        .unwrap_or_default()
}

/// Tracer items for every question of `samples`, reading instances from `tracks`.
pub fn trace_items(
    samples: &[VideoSample],
    tracks: &[Vec<Track>],
    texts: &[Vec<String>],
    max_instances: usize,
    vocab: &Vocab,
) -> Result<Vec<TraceItem>> {
    let mut items = Vec::new();
    for ((sample, tracks), texts) in samples.iter().zip(tracks).zip(texts) {
        for (q, qa) in sample.qa.iter().enumerate() {
            let instances = tracks
                .iter()
                .zip(texts)
                .map(|(t, text)| InstanceInput::from_observations(text.clone(), &t.observations))
                .collect();
            items.push(TraceItem {
                question_id: format!("{}:{}", sample.id, q),
                template: qa.template,
                input: build_encoder_input(&qa.question, instances, max_instances, vocab)?,
                answers: qa.answers.clone(),
            });
        }
    }
    Ok(items)
}

/// Greedy answers for `items`, batched.
pub fn predict(model: &TraceModel, items: &[TraceItem]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(EVAL_BATCH) {
        let inputs: Vec<&EncoderInput> = chunk.iter().map(|i| &i.input).collect();
        let answers = model.generate(&inputs)?;
        out.extend(chunk.iter().zip(answers).map(|(item, prediction)| Prediction {
            question_id: item.question_id.clone(),
            template: item.template,
            prediction,
            references: item.answers.clone(),
        }));
    }
    Ok(out)
}

pub fn accuracy(predictions: &[Prediction]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    predictions
        .iter()
        .map(|p| vqa_accuracy(&p.prediction, &p.references, AccuracyMode::Exact))
        .sum::<f64>()
        / predictions.len() as f64
}

/// Overall and per-template accuracy and ANLS.
pub fn score_predictions(predictions: &[Prediction]) -> (TemplateScore, BTreeMap<String, TemplateScore>) {
    let mut overall = TemplateScore::default();
    let mut per: BTreeMap<String, TemplateScore> = BTreeMap::new();
    for p in predictions {
        let acc = vqa_accuracy(&p.prediction, &p.references, AccuracyMode::Exact);
        let sim = anls(&p.prediction, &p.references, ANLS_THRESHOLD);
        for s in [&mut overall, per.entry(p.template.name().to_string()).or_default()] {
            s.accuracy += acc;
            s.anls += sim;
            s.count += 1;
        }
    }
    for s in std::iter::once(&mut overall).chain(per.values_mut()) {
        if s.count > 0 {
            s.accuracy /= s.count as f64;
            s.anls /= s.count as f64;
        }
    }
    (overall, per)
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    *timings.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
    Ok(out)
}

/// Shared state for runs over one corpus: splits, tracks and the trained gatherer.
pub struct Pipeline {
    config: RunConfig,
    splits: Splits,
    tracks: [Vec<Vec<Track>>; 3],
    tracking: TrackingReport,
    gather: Option<(GatherModel, TrainOutcome)>,
    // learned transcriptions are deterministic, so rows sharing the gatherer reuse them;
    // keys 0..=2 are the track splits, 3 the test split's ground-truth instances
    learned_texts: BTreeMap<usize, Vec<Vec<String>>>,
    shared_timings: BTreeMap<String, f64>,
}

impl Pipeline {
    /// Generates the configured corpus and tracks it.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut timings = BTreeMap::new();
        let samples = timed(&mut timings, "corpus", || generate_corpus(&config.corpus, config.num_videos))?;
        Self::with_timings(config, samples, timings)
    }

    /// Uses `samples` as the corpus.
    pub fn from_samples(config: &RunConfig, samples: Vec<VideoSample>) -> Result<Self> {
        config.validate()?;
        Self::with_timings(config, samples, BTreeMap::new())
    }

    fn with_timings(config: &RunConfig, samples: Vec<VideoSample>, mut timings: BTreeMap<String, f64>) -> Result<Self> {
        let splits = split_corpus(samples, config.val_fraction, config.test_fraction);
        let assoc = &config.association;
        let (tracks, tracking) = timed(&mut timings, "track", || {
            let track = |s: &[VideoSample]| s.iter().map(|v| track_sample(v, assoc)).collect::<Vec<_>>();
            let tracks = [track(&splits.train), track(&splits.val), track(&splits.test)];
            let tracking = score_tracking_corpus(
                tracks[2].iter().zip(&splits.test).map(|(t, s)| (t.as_slice(), s.instances.as_slice())),
                assoc,
            )?;
            Ok((tracks, tracking))
        })?;
        Ok(Self {
            config: config.clone(),
            splits,
            tracks,
            tracking,
            gather: None,
            learned_texts: BTreeMap::new(),
            shared_timings: timings,
        })
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn tracking(&self) -> &TrackingReport {
        &self.tracking
    }

    /// Uses an already trained gatherer instead of training one.
    pub fn set_gather_model(&mut self, model: GatherModel) {
        let outcome = TrainOutcome {
            history: Vec::new(),
            best_epoch: None,
            best_validation: None,
        };
        self.gather = Some((model, outcome));
        self.learned_texts.clear();
    }

    /// The learned gatherer, trained on first use.
    pub fn gather_model(&mut self) -> Result<&GatherModel> {
        if self.gather.is_none() {
            let start = Instant::now();
            let trained = train_gather(&self.config, &self.splits)?;
            *self.shared_timings.entry("gather_train".into()).or_default() += start.elapsed().as_secs_f64();
            self.gather = Some(trained);
        }
        Ok(&self.gather.as_ref().expect("just trained").0)
    }

    fn texts(&mut self, source: GatherSource, split: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
        if source == GatherSource::Learned {
            if let Some(cached) = self.learned_texts.get(&split) {
                return Ok(cached.clone());
            }
            self.gather_model()?;
        }
        let gather = self.gather.as_ref().map(|g| &g.0);
        let samples = match split {
            0 => &self.splits.train,
            1 => &self.splits.val,
            _ => &self.splits.test,
        };
        let tracks = &self.tracks[split];
        // decode every track of the split in one batched pass
        let groups: Vec<&Track> = tracks.iter().flatten().collect();
        let oracle: Vec<String> = samples
            .iter()
            .zip(tracks)
            .flat_map(|(s, ts)| ts.iter().map(move |t| majority_text(s, t)))
            .collect();
        let flat = transcribe(source, gather, &groups, &oracle, rng)?;
        let mut it = flat.into_iter();
        let texts: Vec<Vec<String>> = tracks.iter().map(|ts| it.by_ref().take(ts.len()).collect()).collect();
        if source == GatherSource::Learned {
            self.learned_texts.insert(split, texts.clone());
        }
        Ok(texts)
    }

    /// Transcriptions of the ground-truth instances of the test split.
    fn instance_texts(&mut self, source: GatherSource, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<String>>> {
        if source == GatherSource::Learned {
            if let Some(cached) = self.learned_texts.get(&3) {
                return Ok(cached.clone());
            }
            self.gather_model()?;
        }
        let gather = self.gather.as_ref().map(|g| &g.0);
        let groups: Vec<_> = self.splits.test.iter().flat_map(|s| s.instances.iter()).collect();
        let oracle: Vec<String> = groups.iter().map(|i| i.canonical_text.clone()).collect();
        let flat = transcribe(source, gather, &groups, &oracle, rng)?;
        let mut it = flat.into_iter();
        let texts: Vec<Vec<String>> = self.splits.test.iter().map(|s| it.by_ref().take(s.instances.len()).collect()).collect();
        if source == GatherSource::Learned {
            self.learned_texts.insert(3, texts.clone());
        }
        Ok(texts)
    }

    /// Tracer items for the train, validation and test splits, plus the
    /// transcriptions of the test split's ground-truth instances.
    fn items(&mut self, source: GatherSource, rng: &mut ChaCha8Rng) -> Result<([Vec<TraceItem>; 3], Vec<Vec<String>>)> {
        let vocab = Vocab::new(&self.config.trace.charset)?;
        let cap = self.config.trace.max_instances;
        let mut items: [Vec<TraceItem>; 3] = Default::default();
        for (split, slot) in items.iter_mut().enumerate() {
            let texts = self.texts(source, split, rng)?;
            let samples = [&self.splits.train, &self.splits.val, &self.splits.test][split];
            *slot = trace_items(samples, &self.tracks[split], &texts, cap, &vocab)?;
        }
        let instance_texts = self.instance_texts(source, rng)?;
        Ok((items, instance_texts))
    }

    /// Trains a tracer with the given flags and returns it with its test predictions.
    pub fn fit(&mut self, source: GatherSource, bias: BiasMode) -> Result<FitOutput> {
        let config = self.config.with_flags(source, bias);
        let mut timings = self.shared_timings.clone();
        let seed = config.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, source.name()));
        let ([train_items, val_items, test_items], instance_texts) =
            timed(&mut timings, "gather", || self.items(source, &mut rng))?;
        // gather training may have happened lazily inside the phase above
        if let Some(t) = self.shared_timings.get("gather_train") {
            let before = timings.insert("gather_train".into(), *t).unwrap_or(0.0);
            *timings.entry("gather".into()).or_default() -= t - before;
        }
        let model = TraceModel::new(config.trace.clone(), bias, derive_seed(seed, "trace-init"), DType::F32)?;
        let training = timed(&mut timings, "trace_train", || train_trace(&model, &config, &train_items, &val_items))?;
        let predictions = timed(&mut timings, "evaluate", || predict(&model, &test_items))?;
        Ok(FitOutput {
            config,
            model,
            training,
            predictions,
            instance_texts,
            timings,
        })
    }

    /// One full run with the given flags.
    pub fn run(&mut self, source: GatherSource, bias: BiasMode) -> Result<RunReport> {
        let fit = self.fit(source, bias)?;
        let (overall, per_template) = score_predictions(&fit.predictions);
        let gt: Vec<&String> = self
            .splits
            .test
            .iter()
            .flat_map(|s| s.instances.iter().map(|i| &i.canonical_text))
            .collect();
        let exact = gt
            .iter()
            .zip(fit.instance_texts.iter().flatten())
            .filter(|(a, b)| **a == *b)
            .count();
        let gather_exact_match = if gt.is_empty() { 0.0 } else { exact as f64 / gt.len() as f64 };
        let vocab = Vocab::new(&fit.config.trace.charset)?;
        let token_length = token_length_report(&self.splits.test, &vocab, &fit.instance_texts);
        Ok(RunReport {
            config_hash: fit.config.hash()?,
            gather_source: source,
            trace_bias: bias,
            accuracy: overall.accuracy,
            anls: overall.anls,
            questions: overall.count,
            per_template,
            gather_exact_match,
            tracking: self.tracking,
            token_length_means: (token_length.mean_with, token_length.mean_without),
            token_length_ratio: token_length.ratio,
            gather_training: self.gather.as_ref().filter(|_| source == GatherSource::Learned).map(|g| g.1.clone()),
            trace_training: fit.training,
            timings: fit.timings,
        })
    }
}

/// A trained tracer and what it produced on the test split.
pub struct FitOutput {
    pub config: RunConfig,
    pub model: TraceModel,
    pub training: TrainOutcome,
    pub predictions: Vec<Prediction>,
    pub instance_texts: Vec<Vec<String>>,
    pub timings: BTreeMap<String, f64>,
}

/// Tracks, transcribes and lays out every question of `samples`.
pub fn corpus_items(
    samples: &[VideoSample],
    config: &RunConfig,
    source: GatherSource,
    gather: Option<&GatherModel>,
) -> Result<Vec<TraceItem>> {
    let tracks: Vec<Vec<Track>> = samples.iter().map(|s| track_sample(s, &config.association)).collect();
    let groups: Vec<&Track> = tracks.iter().flatten().collect();
    let oracle: Vec<String> = samples
        .iter()
        .zip(&tracks)
        .flat_map(|(s, ts)| ts.iter().map(move |t| majority_text(s, t)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, source.name()));
    let flat = transcribe(source, gather, &groups, &oracle, &mut rng)?;
    let mut it = flat.into_iter();
    let texts: Vec<Vec<String>> = tracks.iter().map(|ts| it.by_ref().take(ts.len()).collect()).collect();
    let vocab = Vocab::new(&config.trace.charset)?;
    trace_items(samples, &tracks, &texts, config.trace.max_instances, &vocab)
}

/// Trains a gatherer on the ground-truth instances of the train split,
/// keeping the epoch with the best validation exact-match rate.
pub fn train_gather(config: &RunConfig, splits: &Splits) -> Result<(GatherModel, TrainOutcome)> {
    let model = GatherModel::new(config.gather.clone(), derive_seed(config.seed, "gather-init"), DType::F32)?;
    let examples: Vec<GatherExample> = splits
        .train
        .iter()
        .flat_map(|s| s.instances.iter())
        .map(|i| model.example(i, &i.canonical_text))
        .collect::<Result<_>>()?;
    let val: Vec<(GatherSequence, String)> = splits
        .val
        .iter()
        .flat_map(|s| s.instances.iter())
        .map(|i| Ok((model.sequence(i)?, i.canonical_text.clone())))
        .collect::<Result<_>>()?;
    let outcome = train(
        model.params(),
        &examples,
        &config.gather_optimizer,
        derive_seed(config.seed, "gather-order"),
        |batch, _| model.loss(batch),
        || gather_exact_match(&model, &val),
    )?;
    Ok((model, outcome))
}

/// Fraction of `(sequence, truth)` pairs the model transcribes exactly.
pub fn gather_exact_match(model: &GatherModel, pairs: &[(GatherSequence, String)]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let seqs: Vec<GatherSequence> = pairs.iter().map(|p| p.0.clone()).collect();
    let decoded = decode_all(model, &seqs)?;
    Ok(decoded.iter().zip(pairs).filter(|(d, p)| **d == p.1).count() as f64 / pairs.len() as f64)
}

/// Trains a tracer on `train_items`, validating by accuracy on `val_items`.
pub fn train_trace(model: &TraceModel, config: &RunConfig, train_items: &[TraceItem], val_items: &[TraceItem]) -> Result<TrainOutcome> {
    let max_len = config.trace.max_answer_len;
    let vocab = model.vocab().clone();
    train(
        model.params(),
        train_items,
        &config.trace_optimizer,
        derive_seed(config.seed, "trace-order"),
        |batch, rng| {
            let examples = batch
                .iter()
                .map(|item| {
                    let teacher = rng.random_range(0..item.answers.len());
                    Ok(TraceExample {
                        input: item.input.clone(),
                        targets: answer_targets(&item.answers, teacher, &vocab, max_len)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            model.loss(&examples.iter().collect::<Vec<_>>())
        },
        || Ok(accuracy(&predict(model, val_items)?)),
    )
}

/// Runs one configuration end to end.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    Pipeline::prepare(config)?.run(config.gather_source, config.trace_bias)
}

/// The five ablation rows, in table order.
pub const ABLATION_ROWS: [(char, GatherSource, BiasMode); 5] = [
    ('a', GatherSource::Random, BiasMode::Full),
    ('b', GatherSource::Max, BiasMode::Full),
    ('c', GatherSource::Learned, BiasMode::Off),
    ('d', GatherSource::Learned, BiasMode::SpatialOnly),
    ('e', GatherSource::Learned, BiasMode::Full),
];

/// Runs the five ablation rows over one shared corpus and gatherer.
pub fn ablate(base: &RunConfig) -> Result<AblationTable> {
    let mut pipeline = Pipeline::prepare(base)?;
    ablate_with(&mut pipeline)
}

pub fn ablate_with(pipeline: &mut Pipeline) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, source, bias) in ABLATION_ROWS {
        log::info!("ablation row {label}: gather {}, bias {}", source.name(), bias.name());
        rows.push(AblationRow {
            label,
            report: pipeline.run(source, bias)?,
        });
    }
    Ok(AblationTable { rows })
}

/// Every gather source crossed with every bias mode.
pub fn sweep(base: &RunConfig) -> Result<Vec<RunReport>> {
    let mut pipeline = Pipeline::prepare(base)?;
    let mut out = Vec::with_capacity(12);
    for source in GatherSource::ALL {
        for bias in BiasMode::ALL {
            out.push(pipeline.run(source, bias)?);
        }
    }
    Ok(out)
}
