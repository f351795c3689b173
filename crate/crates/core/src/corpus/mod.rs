//! Dialogue data: types, cleaning and filtering, label mapping,
//! anonymization and a synthetic corpus generator.

pub mod anonymize;
pub mod filter;
pub mod io;
pub mod labels;
pub mod preprocess;
pub mod synth;
pub mod text;
pub mod types;

pub use anonymize::Anonymizer;
pub use filter::{filter_session, DiscardReason, FilterRules, Verdict};
pub use io::{read_jsonl, write_jsonl};
pub use labels::{bucket_age, LabelMapper, LocationTable};
pub use preprocess::{corpus_stats, filter_sessions, preprocess, split, to_train_pairs, CorpusStats, FilterReport};
pub use synth::{generate_synthetic_corpus, plant_bias, Lexicon, PerTrait, SyntheticCorpus, SyntheticCorpusSpec};
pub use text::{delexicalize, Tokenizer, WhitespaceTokenizer, NUM_TOKEN};
pub use types::{DialogueSession, Gender, PostResponsePair, SpeakerProfile, Utterance};
