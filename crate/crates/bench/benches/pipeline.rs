use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use vtqa_core::candle_core::DType;
use vtqa_core::corpus::{generate_corpus, CorpusConfig};
use vtqa_core::gather::{GatherExample, GatherModel};
use vtqa_core::harness::{corpus_items, GatherSource, RunConfig};
use vtqa_core::metrics::levenshtein;
use vtqa_core::trace::{answer_targets, BiasMode, TraceExample, TraceModel};

const BATCH: usize = 32;

fn config() -> RunConfig {
    let mut c = RunConfig::default();
    c.gather.width = 64;
    c.trace.width = 64;
    c
}

fn bench_trace(c: &mut Criterion) {
    let cfg = config();
    let samples = generate_corpus(&CorpusConfig::default(), 40).unwrap();
    let items = corpus_items(&samples, &cfg, GatherSource::Oracle, None).unwrap();
    let mut group = c.benchmark_group("trace");
    for mode in BiasMode::ALL {
        let model = TraceModel::new(cfg.trace.clone(), mode, 0, DType::F32).unwrap();
        let examples: Vec<TraceExample> = items
            .iter()
            .take(BATCH)
            .map(|i| TraceExample {
                input: i.input.clone(),
                targets: answer_targets(&i.answers, 0, model.vocab(), cfg.trace.max_answer_len).unwrap(),
            })
            .collect();
        let refs: Vec<&TraceExample> = examples.iter().collect();
        group.bench_function(format!("loss/{}", mode.name()), |b| b.iter(|| model.loss(&refs).unwrap()));
        group.bench_function(format!("loss_backward/{}", mode.name()), |b| {
            b.iter(|| model.loss(&refs).unwrap().backward().unwrap())
        });
        let inputs: Vec<_> = refs.iter().map(|e| &e.input).collect();
        group.bench_function(format!("bias/{}", mode.name()), |b| b.iter(|| model.bias_tensor(&inputs).unwrap()));
    }
    let model = TraceModel::new(cfg.trace.clone(), BiasMode::Full, 0, DType::F32).unwrap();
    let inputs: Vec<_> = items.iter().take(BATCH).map(|i| &i.input).collect();
    group.bench_function("generate", |b| b.iter(|| model.generate(&inputs).unwrap()));
    group.finish();
}

fn bench_gather(c: &mut Criterion) {
    let cfg = config();
    let samples = generate_corpus(&CorpusConfig::default(), 20).unwrap();
    let model = GatherModel::new(cfg.gather.clone(), 0, DType::F32).unwrap();
    let examples: Vec<GatherExample> = samples
        .iter()
        .flat_map(|s| &s.instances)
        .take(BATCH)
        .map(|i| model.example(i, &i.canonical_text).unwrap())
        .collect();
    let refs: Vec<&GatherExample> = examples.iter().collect();
    let mut group = c.benchmark_group("gather");
    group.bench_function("loss_backward", |b| b.iter(|| model.loss(&refs).unwrap().backward().unwrap()));
    let seqs: Vec<_> = examples.iter().map(|e| &e.sequence).collect();
    group.bench_function("decode", |b| b.iter(|| model.decode_sequences(&seqs).unwrap()));
    group.finish();
}

fn bench_data(c: &mut Criterion) {
    let cfg = CorpusConfig::default();
    c.bench_function("generate_corpus/10", |b| b.iter(|| generate_corpus(&cfg, 10).unwrap()));
    c.bench_function("levenshtein/12x12", |b| {
        b.iter_batched(
            || ("KX3ZP0QW7RTY".to_string(), "KX8ZPQW7RTYA".to_string()),
            |(a, b)| levenshtein(&a, &b),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_trace, bench_gather, bench_data
}
criterion_main!(benches);
