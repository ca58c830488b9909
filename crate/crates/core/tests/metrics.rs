mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtqa_core::corpus::{generate_corpus, CorpusConfig};
use vtqa_core::gather::heuristic_max;
use vtqa_core::metrics::{anls, levenshtein, score_records, token_length_report, AccuracyMode, EvalRecord, ANLS_THRESHOLD};
use vtqa_core::vocab::{default_charset, Vocab};

use common::{edit_distance_table, random_string};

#[test]
fn levenshtein_agrees_with_table_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let alphabet: Vec<char> = "abcd".chars().collect();
    for _ in 0..1000 {
        let a = random_string(&mut rng, 8, &alphabet);
        let b = random_string(&mut rng, 8, &alphabet);
        assert_eq!(levenshtein(&a, &b), edit_distance_table(&a, &b), "{a:?} vs {b:?}");
    }
}

#[test]
fn anls_reference_values() {
    let refs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let cases = [("cars", vec!["cars"], 1.0), ("drog", vec!["drdg8a"], 0.0), ("car5", vec!["cars"], 0.75)];
    for (pred, r, want) in cases {
        assert!((anls(pred, &refs(&r), ANLS_THRESHOLD) - want).abs() < 1e-9, "{pred}");
    }
}

#[test]
fn empty_record_set_scores_zero() {
    let s = score_records(&Vec::<EvalRecord>::new(), AccuracyMode::Exact);
    assert_eq!((s.accuracy, s.anls, s.count), (0.0, 0.0, 0));
}

#[test]
fn token_ratio_tracks_sightings_per_instance() {
    let config = CorpusConfig {
        min_frames: 12,
        max_frames: 12,
        min_lifespan: 0.8,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config, 50).unwrap();
    let vocab = Vocab::new(&default_charset()).unwrap();
    let fused: Vec<Vec<String>> = corpus
        .iter()
        .map(|s| s.instances.iter().map(|i| heuristic_max(i).unwrap()).collect())
        .collect();
    let report = token_length_report(&corpus, &vocab, &fused);
    let sightings: usize = corpus.iter().map(|s| s.num_observations()).sum();
    let instances: usize = corpus.iter().map(|s| s.instances.len()).sum();
    let mean_len = sightings as f64 / instances as f64;
    let ratio = report.ratio.unwrap();
    assert!(ratio >= 0.8 * mean_len && ratio <= 1.2 * mean_len, "ratio {ratio} vs T {mean_len}");
    assert!(report.with_gather.iter().zip(&report.without_gather).all(|(w, wo)| wo >= w));
}
