//! Synthetic trait-tagged dialogue corpus.
//!
//! Words are pronounceable pseudo-words. Every post is drawn around one
//! topic and the reply stays on that topic. A reply may open with marker
//! words tied to the responder's trait labels (one slot per trait, filled
//! with probability equal to that trait's signal strength), and may also
//! carry distractor markers of uniformly random labels anywhere in its body.
//!
//! Posts may mention cue markers of a few random labels per trait, drawn
//! without regard to who will reply. A responder whose marker slot fires
//! and whose own label was cued repeats the cued word rather than drawing a
//! fresh one, so which part of the post gets picked up depends on the
//! responder while the reply's marker distribution stays the same.

use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{LabelMapper, AGE_BUCKETS};
use super::types::{DialogueSession, Gender, PostResponsePair, SpeakerProfile, Utterance};
use crate::error::{Error, Result};
use crate::fusion::{TraitKey, TraitSchema};

/// One value per trait key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTrait<T> {
    pub gender: T,
    pub age: T,
    pub location: T,
}

impl<T> PerTrait<T> {
    pub fn get(&self, key: TraitKey) -> &T {
        match key {
            TraitKey::Gender => &self.gender,
            TraitKey::Age => &self.age,
            TraitKey::Location => &self.location,
        }
    }

    pub fn get_mut(&mut self, key: TraitKey) -> &mut T {
        match key {
            TraitKey::Gender => &mut self.gender,
            TraitKey::Age => &mut self.age,
            TraitKey::Location => &mut self.location,
        }
    }

    pub fn uniform(v: T) -> Self
    where
        T: Clone,
    {
        PerTrait {
            gender: v.clone(),
            age: v.clone(),
            location: v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusSpec {
    pub num_pairs: usize,
    pub num_speakers: usize,
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub function_words: usize,
    pub markers_per_label: usize,
    /// Probability that a reply carries a marker of the responder's label.
    pub signal: PerTrait<f64>,
    /// Per trait, probability of one extra marker of a uniformly random label.
    pub distractor_rate: f64,
    /// Per trait, probability that a post carries cue markers. Off by default.
    pub cue_rate: f64,
    /// Distinct labels cued per trait when a post carries cues.
    pub cue_labels: usize,
    /// Label distributions in schema order.
    pub labels: PerTrait<Vec<f64>>,
    /// Probability that a speaker's age or location is left empty.
    pub missing_rate: f64,
    /// Share of speakers below the activity gate and of sessions carrying
    /// one kind of defect for the preprocessor to handle.
    pub noise_rate: f64,
    pub post_len: (usize, usize),
    pub response_len: (usize, usize),
    /// Share of topic words among body tokens.
    pub topic_share: f64,
    pub seed: u64,
    /// Seeds the word inventory separately so corpora drawn with different
    /// seeds share one vocabulary.
    pub lexicon_seed: u64,
    pub reference_year: i32,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_pairs: 10_000,
            num_speakers: 2_000,
            num_topics: 30,
            words_per_topic: 25,
            function_words: 60,
            markers_per_label: 3,
            signal: PerTrait::uniform(0.9),
            distractor_rate: 0.25,
            cue_rate: 0.0,
            cue_labels: 3,
            labels: PerTrait {
                gender: vec![0.5, 0.5],
                age: vec![0.15, 0.35, 0.35, 0.15],
                location: vec![0.08, 0.12, 0.1, 0.08, 0.12, 0.1, 0.12, 0.08, 0.1, 0.1],
            },
            missing_rate: 0.05,
            noise_rate: 0.05,
            post_len: (4, 12),
            response_len: (3, 10),
            topic_share: 0.6,
            seed: 0,
            lexicon_seed: 7,
            reference_year: super::labels::DEFAULT_REFERENCE_YEAR,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self, schema: &TraitSchema) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for key in TraitKey::ALL {
            let s = *self.signal.get(key);
            if !unit(s) {
                return fail(format!("{key} signal {s} outside [0, 1]"));
            }
            let dist = self.labels.get(key);
            if dist.len() != schema.num_labels(key) {
                return fail(format!(
                    "{key} distribution has {} entries for {} labels",
                    dist.len(),
                    schema.num_labels(key)
                ));
            }
            if dist.iter().any(|&p| !(p >= 0.0)) || (dist.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return fail(format!("{key} distribution must be nonnegative and sum to 1"));
            }
        }
        for (name, v) in [
            ("distractor_rate", self.distractor_rate),
            ("cue_rate", self.cue_rate),
            ("missing_rate", self.missing_rate),
            ("noise_rate", self.noise_rate),
            ("topic_share", self.topic_share),
        ] {
            if !unit(v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.num_speakers < 2 || self.num_topics == 0 || self.words_per_topic == 0 {
            return fail("need at least 2 speakers and one nonempty topic".into());
        }
        if self.function_words == 0 || self.markers_per_label == 0 {
            return fail("function_words and markers_per_label must be positive".into());
        }
        for (name, (lo, hi)) in [("post_len", self.post_len), ("response_len", self.response_len)] {
            if lo == 0 || lo > hi {
                return fail(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        Ok(())
    }
}

/// Word inventory of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub topics: Vec<Vec<String>>,
    pub function: Vec<String>,
    /// Per trait, per label, marker words (most frequent first).
    pub markers: PerTrait<Vec<Vec<String>>>,
    /// Words that the bundled abusive-word list contains.
    pub abusive: Vec<String>,
}

const ONSETS: [&str; 18] = [
    "b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch", "f", "h", "j",
];
const NUCLEI: [&str; 10] = ["a", "e", "i", "o", "u", "ai", "ou", "an", "en", "ao"];

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap()))
        .collect()
}

/// Zipf-like weights `1 / (i + 1)^s`.
fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|i| 1.0 / ((i + 1) as f64).powf(s))).expect("n > 0")
}

impl Lexicon {
    pub fn generate(spec: &SyntheticCorpusSpec, schema: &TraitSchema) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.lexicon_seed);
        let mut seen = HashSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng| loop {
            let w = pseudo_word(rng);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let topics = (0..spec.num_topics)
            .map(|_| (0..spec.words_per_topic).map(|_| fresh(&mut rng)).collect())
            .collect();
        let function = (0..spec.function_words).map(|_| fresh(&mut rng)).collect();
        let mut per_key = |key: TraitKey| -> Vec<Vec<String>> {
            (0..schema.num_labels(key))
                .map(|_| (0..spec.markers_per_label).map(|_| fresh(&mut rng)).collect())
                .collect()
        };
        let markers = PerTrait {
            gender: per_key(TraitKey::Gender),
            age: per_key(TraitKey::Age),
            location: per_key(TraitKey::Location),
        };
        let abusive = (0..2).map(|_| fresh(&mut rng)).collect();
        Lexicon {
            topics,
            function,
            markers,
            abusive,
        }
    }

    /// Every word, in a fixed order.
    pub fn words(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self.topics.iter().flatten().map(String::as_str).collect();
        out.extend(self.function.iter().map(String::as_str));
        for key in TraitKey::ALL {
            out.extend(self.markers.get(key).iter().flatten().map(String::as_str));
        }
        out.extend(self.abusive.iter().map(String::as_str));
        out
    }

    /// Which trait label a marker word belongs to.
    pub fn marker_label(&self, word: &str) -> Option<(TraitKey, usize)> {
        TraitKey::ALL.into_iter().find_map(|key| {
            self.markers
                .get(key)
                .iter()
                .position(|ws| ws.iter().any(|w| w == word))
                .map(|label| (key, label))
        })
    }

    /// Number of `key` markers of `label` in `tokens`.
    pub fn count_markers(&self, tokens: &[String], key: TraitKey, label: usize) -> usize {
        let ws = &self.markers.get(key)[label];
        tokens.iter().filter(|t| ws.contains(t)).count()
    }
}

/// A generated corpus with the inventory it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub lexicon: Lexicon,
    pub sessions: Vec<DialogueSession>,
}

impl SyntheticCorpus {
    /// All (post, response) pairs of all sessions, noise included.
    pub fn pairs(&self) -> Vec<PostResponsePair> {
        self.sessions.iter().flat_map(DialogueSession::pairs).collect()
    }
}

struct Sampler<'a> {
    spec: &'a SyntheticCorpusSpec,
    lex: &'a Lexicon,
    rng: ChaCha8Rng,
    function: WeightedIndex<f64>,
    marker: WeightedIndex<f64>,
}

impl Sampler<'_> {
    fn body(&mut self, topic: usize, (lo, hi): (usize, usize)) -> Vec<String> {
        let len = self.rng.random_range(lo..=hi);
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < self.spec.topic_share {
                    self.lex.topics[topic].choose(&mut self.rng).unwrap().clone()
                } else {
                    self.lex.function[self.function.sample(&mut self.rng)].clone()
                }
            })
            .collect()
    }

    fn marker(&mut self, key: TraitKey, label: usize) -> String {
        self.lex.markers.get(key)[label][self.marker.sample(&mut self.rng)].clone()
    }

    /// Inserts cue markers into `post`; returns the cued words.
    fn cues(&mut self, post: &mut Vec<String>) -> Vec<(TraitKey, usize, String)> {
        let mut out = Vec::new();
        if self.spec.cue_labels == 0 {
            return out;
        }
        for key in TraitKey::ALL {
            if self.rng.random::<f64>() >= self.spec.cue_rate {
                continue;
            }
            let k = self.lex.markers.get(key).len();
            for label in rand::seq::index::sample(&mut self.rng, k, self.spec.cue_labels.min(k)) {
                let w = self.marker(key, label);
                let pos = self.rng.random_range(0..=post.len());
                post.insert(pos, w.clone());
                out.push((key, label, w));
            }
        }
        out
    }

    fn response(
        &mut self,
        topic: usize,
        labels: &[(TraitKey, Option<usize>)],
        cues: &[(TraitKey, usize, String)],
    ) -> Vec<String> {
        let mut body = self.body(topic, self.spec.response_len);
        for &(key, _) in labels {
            if self.rng.random::<f64>() < self.spec.distractor_rate {
                let k = self.lex.markers.get(key).len();
                let label = self.rng.random_range(0..k);
                let w = self.marker(key, label);
                let pos = self.rng.random_range(0..=body.len());
                body.insert(pos, w);
            }
        }
        let mut out = Vec::with_capacity(body.len() + 3);
        for &(key, label) in labels {
            let fire = self.rng.random::<f64>() < *self.spec.signal.get(key);
            if let (true, Some(label)) = (fire, label) {
                let w = match cues.iter().find(|c| c.0 == key && c.1 == label) {
                    Some(c) => c.2.clone(),
                    None => self.marker(key, label),
                };
                out.push(w);
            }
        }
        out.extend(body);
        out
    }
}

struct Speaker {
    profile: SpeakerProfile,
    labels: [(TraitKey, Option<usize>); 3],
}

fn draw_speakers(
    spec: &SyntheticCorpusSpec,
    mapper: &LabelMapper,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Speaker>> {
    let dist = |key: TraitKey| WeightedIndex::new(spec.labels.get(key).clone()).map_err(|e| Error::Config(e.to_string()));
    let (dg, da, dl) = (dist(TraitKey::Gender)?, dist(TraitKey::Age)?, dist(TraitKey::Location)?);
    let mut out = Vec::with_capacity(spec.num_speakers);
    for i in 0..spec.num_speakers {
        let g = dg.sample(rng);
        let gender = if g == 0 { Gender::Male } else { Gender::Female };
        let mut age_label = Some(da.sample(rng));
        let mut loc_label = Some(dl.sample(rng));
        if rng.random::<f64>() < spec.missing_rate {
            age_label = None;
        }
        if rng.random::<f64>() < spec.missing_rate {
            loc_label = None;
        }
        let age = age_label.map(|a| {
            let schema_label = &mapper.schema.age[a];
            let decade = AGE_BUCKETS.iter().position(|b| b == schema_label).unwrap_or(a);
            // post-00s stops at 2010 so every age stays within range
            let start = 1970 + 10 * decade as i32;
            let born = rng.random_range(start..=start + 9).min(mapper.reference_year - 8);
            (mapper.reference_year - born) as u32
        });
        let location = match loc_label {
            Some(l) => {
                let area = &mapper.schema.location[l];
                let provinces = mapper.locations.provinces_of(area);
                if provinces.is_empty() {
                    return Err(Error::Config(format!("no province maps to area {area}")));
                }
                Some(provinces.choose(rng).unwrap().to_string())
            }
            None => None,
        };
        let level = if rng.random::<f64>() < spec.noise_rate {
            rng.random_range(1..15)
        } else {
            rng.random_range(15..=60)
        };
        let profile = SpeakerProfile::new(format!("spk{i:06}"), Some(gender), age, location, level);
        let labels = [
            (TraitKey::Gender, Some(g)),
            (TraitKey::Age, age_label),
            (TraitKey::Location, loc_label),
        ];
        out.push(Speaker { profile, labels });
    }
    Ok(out)
}

/// Draws a corpus of two-utterance sessions. Deterministic per spec.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, mapper: &LabelMapper) -> Result<SyntheticCorpus> {
    spec.validate(&mapper.schema)?;
    let mapper = LabelMapper {
        reference_year: spec.reference_year,
        ..mapper.clone()
    };
    let lexicon = Lexicon::generate(spec, &mapper.schema);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let speakers = draw_speakers(spec, &mapper, &mut rng)?;
    let mut s = Sampler {
        spec,
        lex: &lexicon,
        rng,
        function: zipf(spec.function_words, 1.0),
        marker: zipf(spec.markers_per_label, 1.5),
    };
    let mut sessions = Vec::with_capacity(spec.num_pairs);
    for i in 0..spec.num_pairs {
        let a = s.rng.random_range(0..speakers.len());
        let mut b = s.rng.random_range(0..speakers.len() - 1);
        if b >= a {
            b += 1;
        }
        let topic = s.rng.random_range(0..spec.num_topics);
        let mut post = s.body(topic, spec.post_len);
        let cues = s.cues(&mut post);
        let mut response = s.response(topic, &speakers[b].labels, &cues);
        if s.rng.random::<f64>() < spec.noise_rate {
            corrupt(&mut s, &mut post, &mut response);
        }
        let (pa, pb) = (&speakers[a].profile, &speakers[b].profile);
        let mut profiles = BTreeMap::new();
        profiles.insert(pa.speaker_id.clone(), pa.clone());
        profiles.insert(pb.speaker_id.clone(), pb.clone());
        sessions.push(DialogueSession {
            session_id: format!("sess{i:07}"),
            utterances: vec![
                Utterance::new(pa.speaker_id.clone(), post),
                Utterance::new(pb.speaker_id.clone(), response),
            ],
            profiles,
        });
    }
    Ok(SyntheticCorpus { lexicon, sessions })
}

/// Applies one defect: a mention, a clipped reply, an abusive word, a
/// number, or a run of symbols.
fn corrupt(s: &mut Sampler<'_>, post: &mut Vec<String>, response: &mut Vec<String>) {
    let target = if s.rng.random::<bool>() { post } else { response };
    match s.rng.random_range(0..5) {
        0 => {
            let pos = s.rng.random_range(0..=target.len());
            target.insert(pos, format!("@{}", s.lex.function[0]));
        }
        1 => target.truncate(2),
        2 => {
            let w = s.lex.abusive.choose(&mut s.rng).unwrap().clone();
            target.push(w);
        }
        3 => {
            let n = s.rng.random_range(1..=2030);
            let pos = s.rng.random_range(0..=target.len());
            target.insert(pos, n.to_string());
        }
        _ => target.extend(std::iter::repeat_n("!".to_string(), 6)),
    }
}

/// Adds `markers` extra markers of each chosen responder's own `key` label
/// to `fraction` of the pairs (only pairs with a known label qualify).
/// Returns the planted indices, ascending.
pub fn plant_bias(
    pairs: &mut [PostResponsePair],
    lexicon: &Lexicon,
    mapper: &LabelMapper,
    key: TraitKey,
    fraction: f64,
    markers: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("fraction {fraction} outside [0, 1]")));
    }
    let mut labeled = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if let Some(l) = mapper.values(&p.responder_profile)?.get(key) {
            labeled.push((i, l));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = ((pairs.len() as f64 * fraction).round() as usize).min(labeled.len());
    let mut chosen: Vec<(usize, usize)> = labeled.choose_multiple(&mut rng, count).copied().collect();
    chosen.sort_unstable();
    let weights = zipf(lexicon.markers.get(key)[0].len(), 1.5);
    for &(i, label) in &chosen {
        let tokens = &mut pairs[i].response_tokens;
        for _ in 0..markers {
            let w = lexicon.markers.get(key)[label][weights.sample(&mut rng)].clone();
            let pos = rng.random_range(0..=tokens.len());
            tokens.insert(pos, w);
        }
    }
    Ok(chosen.into_iter().map(|(i, _)| i).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            num_pairs: 500,
            num_speakers: 100,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let m = LabelMapper::default();
        let a = generate_synthetic_corpus(&small(3), &m).unwrap();
        let b = generate_synthetic_corpus(&small(3), &m).unwrap();
        let c = generate_synthetic_corpus(&small(4), &m).unwrap();
        assert_eq!(a.sessions, b.sessions);
        assert_ne!(a.sessions, c.sessions);
        assert_eq!(a.lexicon, c.lexicon);
    }

    #[test]
    fn words_are_unique_and_digit_free() {
        let lex = Lexicon::generate(&SyntheticCorpusSpec::default(), &TraitSchema::default());
        let words = lex.words();
        let set: HashSet<&str> = words.iter().copied().collect();
        assert_eq!(set.len(), words.len());
        assert!(words.iter().all(|w| w.chars().all(|c| c.is_ascii_lowercase())));
    }

    #[test]
    fn full_signal_marks_every_labeled_reply() {
        let spec = SyntheticCorpusSpec {
            signal: PerTrait::uniform(1.0),
            noise_rate: 0.0,
            ..small(1)
        };
        let m = LabelMapper::default();
        let c = generate_synthetic_corpus(&spec, &m).unwrap();
        for p in c.pairs() {
            let v = m.values(&p.responder_profile).unwrap();
            for key in TraitKey::ALL {
                if let Some(l) = v.get(key) {
                    assert!(c.lexicon.count_markers(&p.response_tokens, key, l) >= 1);
                }
            }
        }
    }

    #[test]
    fn lengths_respect_bounds_without_noise() {
        let spec = SyntheticCorpusSpec {
            noise_rate: 0.0,
            ..small(2)
        };
        let c = generate_synthetic_corpus(&spec, &LabelMapper::default()).unwrap();
        for p in c.pairs() {
            // body plus up to three cued labels for each trait
            assert!((4..=21).contains(&p.post_tokens.len()));
            // body plus up to three own markers and three distractors
            assert!((3..=16).contains(&p.response_tokens.len()));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let s = TraitSchema::default();
        let mut spec = SyntheticCorpusSpec::default();
        spec.signal.age = 1.5;
        assert!(spec.validate(&s).is_err());
        let mut spec = SyntheticCorpusSpec::default();
        spec.labels.gender = vec![0.7, 0.7];
        assert!(spec.validate(&s).is_err());
        let mut spec = SyntheticCorpusSpec::default();
        spec.labels.age = vec![1.0];
        assert!(spec.validate(&s).is_err());
    }

    #[test]
    fn planting_adds_own_markers() {
        let spec = SyntheticCorpusSpec {
            signal: PerTrait::uniform(0.0),
            distractor_rate: 0.0,
            noise_rate: 0.0,
            ..small(5)
        };
        let m = LabelMapper::default();
        let c = generate_synthetic_corpus(&spec, &m).unwrap();
        let mut pairs = c.pairs();
        let planted = plant_bias(&mut pairs, &c.lexicon, &m, TraitKey::Gender, 0.1, 3, 9).unwrap();
        assert_eq!(planted.len(), 50);
        for (i, p) in pairs.iter().enumerate() {
            let g = m.values(&p.responder_profile).unwrap().gender.unwrap();
            let n = c.lexicon.count_markers(&p.response_tokens, TraitKey::Gender, g);
            assert_eq!(n, if planted.contains(&i) { 3 } else { 0 });
        }
    }

    #[test]
    fn cued_labels_are_echoed() {
        let spec = SyntheticCorpusSpec {
            signal: PerTrait::uniform(1.0),
            distractor_rate: 0.0,
            noise_rate: 0.0,
            missing_rate: 0.0,
            cue_rate: 1.0,
            cue_labels: 2,
            ..small(6)
        };
        let m = LabelMapper::default();
        let c = generate_synthetic_corpus(&spec, &m).unwrap();
        let (mut echoed, mut cued) = (0, 0);
        for p in c.pairs() {
            let g = m.values(&p.responder_profile).unwrap().gender.unwrap();
            let own = &c.lexicon.markers.gender[g];
            let cue = p.post_tokens.iter().find(|t| own.contains(t));
            let said = p.response_tokens.iter().find(|t| own.contains(t)).unwrap();
            // both gender labels are cued in every post
            cued += 1;
            if cue == Some(said) {
                echoed += 1;
            }
        }
        assert_eq!(echoed, cued);

        let quiet = SyntheticCorpusSpec { cue_rate: 0.0, ..spec };
        let c = generate_synthetic_corpus(&quiet, &m).unwrap();
        assert!(c.pairs().iter().all(|p| p.post_tokens.iter().all(|t| c.lexicon.marker_label(t).is_none())));
    }
}
