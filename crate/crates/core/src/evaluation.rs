//! Generation metrics and biased test-set mining.

use std::collections::{BTreeMap, HashSet};

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{build_classifier_inputs, Architecture, LabeledUtterance, TraitClassifier, UtteranceScorer};
use crate::corpus::{LabelMapper, PostResponsePair};
use crate::error::{Error, Result};
use crate::fusion::{TraitKey, TraitValues};
use crate::seq2seq::{PersonaModel, Strategy, TrainPair, Vocabulary};

/// Batch size used when scoring or decoding evaluation sets.
const EVAL_BATCH: usize = 64;

/// Anything that maps token sequences to `(label, probability)`.
pub trait Predictor {
    fn predict_tokens(&self, inputs: &[Vec<String>]) -> Result<Vec<(usize, f64)>>;

    /// A predictor over concatenations of a fixed utterance list, each
    /// input given as utterance indices.
    fn bind<'a>(&'a self, utterances: &'a [Vec<String>]) -> Result<Box<dyn MemberPredictor + 'a>>
    where
        Self: Sized,
    {
        Ok(Box::new(Concatenating { predictor: self, utterances }))
    }
}

pub trait MemberPredictor {
    fn predict_members(&self, inputs: &[Vec<usize>]) -> Result<Vec<(usize, f64)>>;
}

struct Concatenating<'a, P> {
    predictor: &'a P,
    utterances: &'a [Vec<String>],
}

impl<P: Predictor> MemberPredictor for Concatenating<'_, P> {
    fn predict_members(&self, inputs: &[Vec<usize>]) -> Result<Vec<(usize, f64)>> {
        let joined: Vec<Vec<String>> = inputs
            .iter()
            .map(|m| m.iter().flat_map(|&u| self.utterances[u].iter().cloned()).collect())
            .collect();
        self.predictor.predict_tokens(&joined)
    }
}

impl MemberPredictor for UtteranceScorer {
    fn predict_members(&self, inputs: &[Vec<usize>]) -> Result<Vec<(usize, f64)>> {
        let p = self.predict_proba(inputs)?;
        Ok(p.rows().into_iter().map(crate::classifier::argmax_first).collect())
    }
}

impl Predictor for TraitClassifier {
    fn predict_tokens(&self, inputs: &[Vec<String>]) -> Result<Vec<(usize, f64)>> {
        self.classify_many(inputs)
    }

    fn bind<'a>(&'a self, utterances: &'a [Vec<String>]) -> Result<Box<dyn MemberPredictor + 'a>> {
        if self.config().arch == Architecture::Boe {
            Ok(Box::new(self.utterance_scorer(utterances)?))
        } else {
            Ok(Box::new(Concatenating { predictor: self, utterances }))
        }
    }
}

/// `exp` of the mean per-token negative log-likelihood of the gold
/// responses, EOS included.
pub fn perplexity(model: &PersonaModel, pairs: &[TrainPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty pair set".into()));
    }
    let (mut nll, mut tokens) = (0.0, 0usize);
    for chunk in pairs.chunks(EVAL_BATCH) {
        let refs: Vec<&TrainPair> = chunk.iter().collect();
        let (l, t) = model.nll(&refs)?;
        nll += l;
        tokens += t;
    }
    Ok((nll / tokens as f64).exp())
}

/// Unique n-grams over total n-grams, counted jointly across all responses.
pub fn distinct_n<S: AsRef<str>>(responses: &[Vec<S>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if responses.is_empty() {
        return Err(Error::InvalidInput("distinct-n of no responses".into()));
    }
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for w in r.windows(n) {
            total += 1;
            seen.insert(w.iter().map(AsRef::as_ref).collect());
        }
    }
    Ok(if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 })
}

/// Each label gets `count / num_labels` slots (the first `count % num_labels`
/// labels one more), in seeded random order.
pub fn balanced_assignments(count: usize, num_labels: usize, seed: u64) -> Vec<usize> {
    let mut out: Vec<usize> = (0..count).map(|i| i % num_labels.max(1)).collect();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Greedy responses with `key` set to the assigned values and the other
/// traits left at each pair's own values.
pub fn generate_assigned(
    model: &PersonaModel,
    vocab: &Vocabulary,
    pairs: &[TrainPair],
    key: TraitKey,
    assignments: &[usize],
) -> Result<Vec<Vec<String>>> {
    if pairs.len() != assignments.len() {
        return Err(Error::InvalidInput(format!(
            "{} pairs but {} assignments",
            pairs.len(),
            assignments.len()
        )));
    }
    let traits: Vec<TraitValues> = pairs
        .iter()
        .zip(assignments)
        .map(|(p, &v)| p.traits.with(key, Some(v)))
        .collect();
    generate_with(model, vocab, pairs, &traits)
}

fn generate_with(
    model: &PersonaModel,
    vocab: &Vocabulary,
    pairs: &[TrainPair],
    traits: &[TraitValues],
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for (chunk, tv) in pairs.chunks(EVAL_BATCH).zip(traits.chunks(EVAL_BATCH)) {
        let posts: Vec<&[usize]> = chunk.iter().map(|p| p.post.as_slice()).collect();
        for g in model.generate(&posts, tv, Strategy::Greedy)? {
            out.push(vocab.decode(&g.tokens));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub accuracy: f64,
    /// Classifier inputs scored.
    pub inputs: usize,
    /// Assigned values with fewer than `n` responses.
    pub skipped_values: Vec<usize>,
}

/// Groups responses by assigned value, joins every `n` of a group into one
/// input and reports how often the predicted label equals the assigned one.
pub fn assigned_accuracy(
    responses: &[Vec<String>],
    assignments: &[usize],
    num_labels: usize,
    predictor: &impl Predictor,
    n: usize,
) -> Result<AccuracyResult> {
    if responses.len() != assignments.len() {
        return Err(Error::InvalidInput("responses and assignments differ in length".into()));
    }
    let utts: Vec<LabeledUtterance> = responses
        .iter()
        .zip(assignments)
        .map(|(r, &label)| LabeledUtterance { tokens: r.clone(), label })
        .collect();
    let inputs = build_classifier_inputs(&utts, num_labels, n, None)?;
    let mut per_value = vec![0usize; num_labels];
    for &a in assignments {
        per_value[a] += 1;
    }
    let skipped_values: Vec<usize> = (0..num_labels).filter(|&v| per_value[v] > 0 && per_value[v] < n).collect();
    if inputs.is_empty() {
        return Err(Error::InvalidInput(format!("no assigned value has {n} responses")));
    }
    let tokens: Vec<Vec<String>> = inputs.iter().map(|x| x.tokens.clone()).collect();
    let preds = predictor.predict_tokens(&tokens)?;
    let hits = preds.iter().zip(&inputs).filter(|(p, x)| p.0 == x.label).count();
    Ok(AccuracyResult {
        accuracy: hits as f64 / inputs.len() as f64,
        inputs: inputs.len(),
        skipped_values,
    })
}

/// Trait accuracy of `model` on `pairs` with balanced assigned values.
pub fn trait_accuracy(
    model: &PersonaModel,
    vocab: &Vocabulary,
    pairs: &[TrainPair],
    classifier: &TraitClassifier,
    n: usize,
    seed: u64,
) -> Result<AccuracyResult> {
    let key = classifier.key();
    let k = classifier.num_labels();
    let assignments = balanced_assignments(pairs.len(), k, seed);
    let responses = generate_assigned(model, vocab, pairs, key, &assignments)?;
    assigned_accuracy(&responses, &assignments, k, classifier, n)
}

/// Mean of `+P` for correct and `-P` for wrong predictions.
pub fn confidence_from_outcomes(outcomes: &[(bool, f64)]) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::InvalidInput("no outcomes".into()));
    }
    let sum: f64 = outcomes.iter().map(|&(ok, p)| if ok { p } else { -p }).sum();
    Ok(sum / outcomes.len() as f64)
}

/// Utterances of a pool together with their labels, plus per-label
/// membership lists.
pub struct LabeledPool<'a> {
    pub utterances: &'a [Vec<String>],
    pub labels: &'a [usize],
    by_label: BTreeMap<usize, Vec<usize>>,
}

impl<'a> LabeledPool<'a> {
    pub fn new(utterances: &'a [Vec<String>], labels: &'a [usize]) -> Result<Self> {
        if utterances.len() != labels.len() {
            return Err(Error::InvalidInput("utterances and labels differ in length".into()));
        }
        let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        Ok(LabeledPool { utterances, labels, by_label })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `m` inputs, each utterance `r` followed by `n - 1` distinct other
    /// same-label utterances.
    fn constructions(&self, r: usize, m: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
        let peers = &self.by_label[&self.labels[r]];
        if peers.len() < n {
            return Err(Error::InvalidInput(format!(
                "utterance {r}: {} same-label peers, need {}",
                peers.len() - 1,
                n - 1
            )));
        }
        let others: Vec<usize> = peers.iter().copied().filter(|&p| p != r).collect();
        Ok((0..m)
            .map(|_| {
                let mut s = vec![r];
                s.extend(others.choose_multiple(rng, n - 1).copied());
                s
            })
            .collect())
    }
}

fn stream_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng
}

/// Approximate confidence of utterance `r`, in `[-1, 1]`.
pub fn confidence_score(
    r: usize,
    pool: &LabeledPool<'_>,
    m: usize,
    predictor: &dyn MemberPredictor,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("m and n must be at least 1".into()));
    }
    if r >= pool.len() {
        return Err(Error::InvalidInput(format!("utterance {r} outside a pool of {}", pool.len())));
    }
    let inputs = pool.constructions(r, m, n, &mut stream_rng(seed, r))?;
    let truth = pool.labels[r];
    let outcomes: Vec<(bool, f64)> = predictor
        .predict_members(&inputs)?
        .into_iter()
        .map(|(label, p)| (label == truth, p))
        .collect();
    confidence_from_outcomes(&outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSetRequest {
    #[serde(rename = "trait")]
    pub key: TraitKey,
    /// The first `pool_size` labeled pairs form the pool.
    pub pool_size: usize,
    /// Constructions per response.
    pub m: usize,
    pub top_k: usize,
    /// Utterances per classifier input.
    pub n: usize,
    pub seed: u64,
}

impl BiasedSetRequest {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Config("m and n must be at least 1".into()));
        }
        if self.top_k > self.pool_size {
            return Err(Error::Config(format!(
                "top_k {} exceeds pool size {}",
                self.top_k, self.pool_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    /// Position in the input pair list.
    pub index: usize,
    pub label: usize,
    pub score: f64,
}

/// Scores every pool response and returns the `top_k` best, ties broken
/// by lower index.
pub fn build_biased_set(
    pairs: &[PostResponsePair],
    mapper: &LabelMapper,
    request: &BiasedSetRequest,
    predictor: &impl Predictor,
) -> Result<Vec<ScoredPair>> {
    request.validate()?;
    let mut index = Vec::new();
    let mut labels = Vec::new();
    let mut utterances = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if index.len() == request.pool_size {
            break;
        }
        if let Some(l) = mapper.values(&p.responder_profile)?.get(request.key) {
            index.push(i);
            labels.push(l);
            utterances.push(p.response_tokens.clone());
        }
    }
    if index.len() < request.pool_size {
        return Err(Error::InvalidInput(format!(
            "only {} labeled pairs for a pool of {}",
            index.len(),
            request.pool_size
        )));
    }
    let pool = LabeledPool::new(&utterances, &labels)?;
    let bound = predictor.bind(&utterances)?;
    let mut scored = Vec::with_capacity(pool.len());
    for r in 0..pool.len() {
        match confidence_score(r, &pool, request.m, bound.as_ref(), request.n, request.seed) {
            Ok(score) => scored.push(ScoredPair { index: index[r], label: labels[r], score }),
            // labels too rare to fill an input cannot be scored
            Err(Error::InvalidInput(msg)) => warn!("skipping pair {}: {msg}", index[r]),
            Err(e) => return Err(e),
        }
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    scored.truncate(request.top_k);
    Ok(scored)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    #[serde(rename = "ppx")]
    pub perplexity: f64,
    #[serde(rename = "dist1")]
    pub distinct_1: f64,
    #[serde(rename = "dist2")]
    pub distinct_2: f64,
    /// Trait name to accuracy.
    #[serde(rename = "acc")]
    pub accuracy: BTreeMap<String, f64>,
    pub pairs: usize,
    /// Classifier inputs scored per trait.
    pub inputs: BTreeMap<String, usize>,
}

/// Perplexity, distinct-1/2 of greedy responses under gold traits, and
/// trait accuracy for each supplied classifier.
pub fn evaluate(
    variant: &str,
    model: &PersonaModel,
    vocab: &Vocabulary,
    pairs: &[TrainPair],
    classifiers: &[TraitClassifier],
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    let perplexity = perplexity(model, pairs)?;
    let traits: Vec<TraitValues> = pairs.iter().map(|p| p.traits).collect();
    let responses = generate_with(model, vocab, pairs, &traits)?;
    let mut accuracy = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for c in classifiers {
        let res = trait_accuracy(model, vocab, pairs, c, n, seed)?;
        accuracy.insert(c.key().name().to_string(), res.accuracy);
        inputs.insert(c.key().name().to_string(), res.inputs);
    }
    Ok(EvalReport {
        variant: variant.to_string(),
        perplexity,
        distinct_1: distinct_n(&responses, 1)?,
        distinct_2: distinct_n(&responses, 2)?,
        accuracy,
        pairs: pairs.len(),
        inputs,
    })
}
