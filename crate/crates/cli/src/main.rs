//! `vtqa`: generate corpora, train and evaluate the pipeline, run ablations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;
use vtqa_core::association::{score_tracking_corpus, AssociationConfig};
use vtqa_core::candle_core::DType;
use vtqa_core::config::write_atomic;
use vtqa_core::corpus::{generate_corpus, read_corpus, write_corpus, CorpusConfig};
use vtqa_core::gather::{GatherModel, UNREADABLE};
use vtqa_core::harness::{
    ablate, corpus_items, predict, split_corpus, track_sample, GatherSource, Pipeline, Prediction,
    RunConfig, RunReport,
};
use vtqa_core::metrics::{anls, vqa_accuracy, AccuracyMode, ANLS_THRESHOLD};
use vtqa_core::trace::TraceModel;
use vtqa_core::Error;

#[derive(Parser)]
#[command(name = "vtqa", version, about = "Video text question answering over synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Link sightings into tracks and score them against the ground truth.
    Track {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Association settings (iou_threshold, max_frame_gap).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the gathering model on a corpus's ground-truth instances.
    TrainGather {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Transcribe every instance of a corpus.
    EvalGather {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tracing model.
    TrainTrace {
        #[arg(long)]
        corpus: PathBuf,
        /// A gather checkpoint, or one of `oracle`, `random`, `max`.
        #[arg(long)]
        gather_ckpt: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Answer every question of a corpus.
    EvalTrace {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "oracle")]
        gather_ckpt: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score prediction records against a corpus.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "acc,anls")]
        metrics: String,
    },
    /// Run the five-row ablation.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one configuration end to end, or compare two saved reports.
    Report {
        #[arg(long, conflicts_with = "compare")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        compare: Option<Vec<PathBuf>>,
    },
}

fn run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_lines<T: Serialize>(path: Option<&Path>, records: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match path {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn gather_source(spec: &str) -> Result<(GatherSource, Option<GatherModel>)> {
    match GatherSource::parse(spec) {
        Ok(GatherSource::Learned) => bail!("`learned` needs a checkpoint path"),
        Ok(source) => Ok((source, None)),
        Err(_) => Ok((GatherSource::Learned, Some(GatherModel::load(Path::new(spec), DType::F32)?))),
    }
}

#[derive(Serialize)]
struct InstancePrediction {
    video_id: u64,
    instance_id: u32,
    prediction: String,
    canonical_text: String,
    exact: bool,
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out, num, seed } => {
            let mut cfg: CorpusConfig = match &config {
                Some(p) => vtqa_core::config::load(p)?,
                None => CorpusConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            write_corpus(&generate_corpus(&cfg, num)?, &out)?;
        }
        Command::Track { corpus, report, config } => {
            let cfg: AssociationConfig = match &config {
                Some(p) => vtqa_core::config::load(p)?,
                None => AssociationConfig::default(),
            };
            cfg.validate()?;
            let samples = read_corpus(&corpus)?;
            let tracks: Vec<_> = samples.iter().map(|s| track_sample(s, &cfg)).collect();
            let r = score_tracking_corpus(
                tracks.iter().zip(&samples).map(|(t, s)| (t.as_slice(), s.instances.as_slice())),
                &cfg,
            )?;
            let c = &r.counts;
            let text = format!(
                "mota = {:.4}\nidf1 = {:.4}\nfalse_negatives = {}\nfalse_positives = {}\nid_switches = {}\ngt_observations = {}\n",
                r.mota, r.idf1, c.false_negatives, c.false_positives, c.id_switches, c.gt_observations
            );
            write_atomic(&report, text.as_bytes())?;
        }
        Command::TrainGather { corpus, config, out, seed } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let splits = split_corpus(read_corpus(&corpus)?, cfg.val_fraction, 0.0);
            let (model, outcome) = vtqa_core::harness::train_gather(&cfg, &splits)?;
            model.save(&out)?;
            log::info!("best validation exact match {:?}", outcome.best_validation);
        }
        Command::EvalGather { ckpt, corpus, out } => {
            let model = GatherModel::load(&ckpt, DType::F32)?;
            let samples = read_corpus(&corpus)?;
            let mut records = Vec::new();
            for s in &samples {
                let seqs = s.instances.iter().map(|i| model.sequence(i)).collect::<vtqa_core::Result<Vec<_>>>()?;
                let decoded = vtqa_core::harness::decode_all(&model, &seqs)?;
                for (inst, text) in s.instances.iter().zip(decoded) {
                    records.push(InstancePrediction {
                        video_id: s.id,
                        instance_id: inst.id,
                        exact: text == inst.canonical_text,
                        prediction: if text.is_empty() { UNREADABLE.to_string() } else { text },
                        canonical_text: inst.canonical_text.clone(),
                    });
                }
            }
            write_lines(out.as_deref(), &records)?;
        }
        Command::TrainTrace { corpus, gather_ckpt, config, out, seed } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let (source, gather) = gather_source(&gather_ckpt)?;
            let mut pipeline = Pipeline::from_samples(&cfg, read_corpus(&corpus)?)?;
            if let Some(g) = gather {
                pipeline.set_gather_model(g);
            }
            let fit = pipeline.fit(source, cfg.trace_bias)?;
            fit.model.save(&out)?;
            log::info!("best validation accuracy {:?}", fit.training.best_validation);
        }
        Command::EvalTrace { ckpt, corpus, gather_ckpt, config, out } => {
            let cfg = run_config(config.as_deref(), None)?;
            let model = TraceModel::load(&ckpt, DType::F32)?;
            let (source, gather) = gather_source(&gather_ckpt)?;
            let samples = read_corpus(&corpus)?;
            let items = corpus_items(&samples, &cfg, source, gather.as_ref())?;
            write_lines(out.as_deref(), &predict(&model, &items)?)?;
        }
        Command::Score { pred, corpus, metrics } => {
            let samples = read_corpus(&corpus)?;
            let text = fs::read_to_string(&pred).with_context(|| format!("reading {}", pred.display()))?;
            let (mut acc, mut sim, mut n) = (0.0, 0.0, 0usize);
            for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let p: Prediction = serde_json::from_str(line)
                    .with_context(|| format!("{}:{}: malformed prediction", pred.display(), line_no + 1))?;
                let (video, q) = p
                    .question_id
                    .split_once(':')
                    .and_then(|(v, q)| Some((v.parse::<u64>().ok()?, q.parse::<usize>().ok()?)))
                    .with_context(|| format!("bad question id {:?}", p.question_id))?;
                let refs = &samples
                    .iter()
                    .find(|s| s.id == video)
                    .and_then(|s| s.qa.get(q))
                    .with_context(|| format!("question {} is not in the corpus", p.question_id))?
                    .answers;
                acc += vqa_accuracy(&p.prediction, refs, AccuracyMode::Exact);
                sim += anls(&p.prediction, refs, ANLS_THRESHOLD);
                n += 1;
            }
            let denom = n.max(1) as f64;
            for m in metrics.split(',').map(str::trim) {
                match m {
                    "acc" => println!("acc = {:.4}", acc / denom),
                    "anls" => println!("anls = {:.4}", sim / denom),
                    other => return Err(Error::Config(format!("unknown metric {other:?}")).into()),
                }
            }
            println!("count = {n}");
        }
        Command::Ablate { config, out, seed } => {
            let cfg = run_config(config.as_deref(), seed)?;
            let table = ablate(&cfg)?;
            print!("{}", table.format());
            if let Some(p) = out {
                write_atomic(&p, serde_json::to_string_pretty(&table)?.as_bytes())?;
            }
        }
        Command::Report { config, out, seed, compare } => {
            if let Some(paths) = compare {
                let load = |p: &Path| -> Result<RunReport> {
                    Ok(serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?)
                };
                let delta = load(&paths[0])?.compare(&load(&paths[1])?)?;
                println!(
                    "accuracy_delta = {:.4}\nanls_delta = {:.4}\nidentical = {}",
                    delta.accuracy, delta.anls, delta.identical
                );
                return Ok(());
            }
            let cfg = run_config(config.as_deref(), seed)?;
            let report = vtqa_core::harness::run_pipeline(&cfg)?;
            print!("{}", report.key_values());
            if let Some(p) = out {
                write_atomic(&p, serde_json::to_string_pretty(&report)?.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_numerical() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
