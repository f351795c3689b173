use persona_dialog::corpus::{generate_synthetic_corpus, to_train_pairs, LabelMapper, SyntheticCorpusSpec};
use persona_dialog::evaluation::perplexity;
use persona_dialog::seq2seq::{ModelConfig, PersonaModel, TrainPair, Variant, Vocabulary};
use persona_dialog::training::{train, TrainConfig};

fn small_corpus(pairs: usize, seed: u64) -> (Vec<TrainPair>, Vocabulary) {
    let mapper = LabelMapper::default();
    let spec = SyntheticCorpusSpec {
        num_pairs: pairs,
        num_speakers: pairs.max(10) / 2,
        noise_rate: 0.0,
        seed,
        ..Default::default()
    };
    let corpus = generate_synthetic_corpus(&spec, &mapper).unwrap();
    let raw = corpus.pairs();
    let vocab = Vocabulary::build(
        raw.iter().flat_map(|p| p.post_tokens.iter().chain(&p.response_tokens)).map(String::as_str),
        usize::MAX,
    );
    let pairs = to_train_pairs(&raw[..pairs.min(raw.len())], &vocab, &mapper, 40, 20).unwrap();
    (pairs, vocab)
}

#[test]
fn overfits_thirty_two_pairs() {
    let (pairs, vocab) = small_corpus(32, 11);
    assert_eq!(pairs.len(), 32);
    let config = ModelConfig::desk(vocab.len()).with_variant(&"att+pab".parse::<Variant>().unwrap());
    let mut model = PersonaModel::new(config, 1).unwrap();
    let before = perplexity(&model, &pairs).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.01,
        max_epochs: 600,
        max_steps: Some(600),
        eval_every: 50,
        patience: 100,
        ..Default::default()
    };
    // validating on the training pairs keeps the lowest training perplexity
    let report = train(&mut model, &pairs, &pairs, &cfg, None).unwrap();
    let after = perplexity(&model, &pairs).unwrap();
    println!("overfit: {before:.2} -> {after:.4} in {} steps", report.steps);
    assert!(after < 1.5, "{after}");
}

#[test]
fn training_is_bitwise_reproducible() {
    let (pairs, vocab) = small_corpus(96, 3);
    let run = || {
        let config = ModelConfig::desk(vocab.len()).with_variant(&"avg+paa".parse::<Variant>().unwrap());
        let mut model = PersonaModel::new(config, 9).unwrap();
        let cfg = TrainConfig { max_steps: Some(6), seed: 5, ..Default::default() };
        let report = train(&mut model, &pairs[..64], &pairs[64..], &cfg, None).unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert!(a.params().bit_eq(b.params()));
    assert_eq!(ra, rb);
}
