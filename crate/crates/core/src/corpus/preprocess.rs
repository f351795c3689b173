use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::anonymize::Anonymizer;
use super::filter::{clean_tokens, filter_session, DiscardReason, FilterRules, Verdict};
use super::labels::LabelMapper;
use super::types::{DialogueSession, PostResponsePair};
use crate::error::Result;
use crate::fusion::TraitKey;
use crate::seq2seq::{TrainPair, Vocabulary};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub discarded: BTreeMap<DiscardReason, usize>,
}

/// Cleans symbol runs, then keeps sessions passing every rule. Output is
/// ordered by session ID.
pub fn filter_sessions(sessions: &[DialogueSession], rules: &FilterRules) -> (Vec<DialogueSession>, FilterReport) {
    let mut report = FilterReport {
        input: sessions.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for s in sessions {
        let mut s = s.clone();
        for u in &mut s.utterances {
            u.tokens = clean_tokens(&u.tokens, rules.max_symbol_run);
        }
        match filter_session(&s, rules) {
            Verdict::Keep => kept.push(s),
            Verdict::Discard(r) => *report.discarded.entry(r).or_default() += 1,
        }
    }
    kept.sort_by(|a, b| a.session_id.cmp(&b.session_id));
    report.kept = kept.len();
    (kept, report)
}

/// Filtering followed by anonymization and delexicalization.
pub fn preprocess(
    sessions: &[DialogueSession],
    rules: &FilterRules,
    anonymizer: &Anonymizer,
) -> (Vec<DialogueSession>, FilterReport) {
    let (kept, report) = filter_sessions(sessions, rules);
    (kept.iter().map(|s| anonymizer.anonymize(s)).collect(), report)
}

/// Counts in the spirit of a corpus overview table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sessions: usize,
    pub utterances: usize,
    pub pairs: usize,
    pub speakers: usize,
    pub tokens: usize,
    pub distinct_tokens: usize,
    pub mean_utterance_len: f64,
    /// Responder label histogram per trait; missing values under `unknown`.
    pub labels: BTreeMap<String, BTreeMap<String, usize>>,
}

pub fn corpus_stats(sessions: &[DialogueSession], mapper: &LabelMapper) -> Result<CorpusStats> {
    let mut st = CorpusStats {
        sessions: sessions.len(),
        ..Default::default()
    };
    let mut speakers = BTreeSet::new();
    let mut vocab = BTreeSet::new();
    for s in sessions {
        st.utterances += s.utterances.len();
        for u in &s.utterances {
            speakers.insert(u.speaker_id.as_str());
            st.tokens += u.tokens.len();
            vocab.extend(u.tokens.iter().map(String::as_str));
        }
        for p in s.pairs() {
            st.pairs += 1;
            let v = mapper.values(&p.responder_profile)?;
            for key in TraitKey::ALL {
                let label = v
                    .get(key)
                    .and_then(|i| mapper.schema.label(key, i))
                    .unwrap_or("unknown")
                    .to_string();
                *st.labels.entry(key.to_string()).or_default().entry(label).or_default() += 1;
            }
        }
    }
    st.speakers = speakers.len();
    st.distinct_tokens = vocab.len();
    st.mean_utterance_len = if st.utterances == 0 {
        0.0
    } else {
        st.tokens as f64 / st.utterances as f64
    };
    Ok(st)
}

/// Disjoint seeded train/validation/test split.
pub fn split<T: Clone>(items: &[T], valid: usize, test: usize, seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid = valid.min(items.len());
    let test = test.min(items.len() - valid);
    let take = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    (
        take(&idx[valid + test..]),
        take(&idx[..valid]),
        take(&idx[valid..valid + test]),
    )
}

/// Token indices and label indices for model training. Posts and responses
/// are truncated to the given limits.
pub fn to_train_pairs(
    pairs: &[PostResponsePair],
    vocab: &Vocabulary,
    mapper: &LabelMapper,
    max_post: usize,
    max_response: usize,
) -> Result<Vec<TrainPair>> {
    pairs
        .iter()
        .map(|p| {
            let mut post = vocab.encode(&p.post_tokens);
            post.truncate(max_post);
            let mut response = vocab.encode(&p.response_tokens);
            response.truncate(max_response);
            Ok(TrainPair {
                post,
                response,
                traits: mapper.values(&p.responder_profile)?,
            })
        })
        .collect()
}
