use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelMapper, PostResponsePair};
use crate::error::{Error, Result};
use crate::fusion::TraitKey;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// `n` same-label utterances joined into one token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierInput {
    pub tokens: Vec<String>,
    pub label: usize,
    /// Indices of the constituent utterances in the source list.
    pub sources: Vec<usize>,
}

/// Responses paired with the responder's label for `key`; responses whose
/// responder has no such label are dropped.
pub fn utterances_from_pairs(
    pairs: &[PostResponsePair],
    mapper: &LabelMapper,
    key: TraitKey,
) -> Result<Vec<LabeledUtterance>> {
    let mut out = Vec::new();
    for p in pairs {
        if let Some(label) = mapper.values(&p.responder_profile)?.get(key) {
            out.push(LabeledUtterance {
                tokens: p.response_tokens.clone(),
                label,
            });
        }
    }
    Ok(out)
}

fn build_from(
    utts: &[LabeledUtterance],
    indices: &[usize],
    num_labels: usize,
    n: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<ClassifierInput>> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    let mut groups = vec![Vec::new(); num_labels];
    for &i in indices {
        let label = utts[i].label;
        if label >= num_labels {
            return Err(Error::InvalidInput(format!("label {label} with {num_labels} labels")));
        }
        groups[label].push(i);
    }
    if let Some(rng) = rng {
        for g in &mut groups {
            g.shuffle(rng);
        }
    }
    let mut out = Vec::new();
    for (label, group) in groups.iter().enumerate() {
        if group.len() < n {
            warn!("label {label}: {} utterances, fewer than n = {n}; skipped", group.len());
            continue;
        }
        for block in group.chunks_exact(n) {
            out.push(ClassifierInput {
                tokens: block.iter().flat_map(|&i| utts[i].tokens.iter().cloned()).collect(),
                label,
                sources: block.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Concatenates consecutive blocks of `n` same-label utterances (after a
/// seeded shuffle within each label when `seed` is given). Leftovers are
/// dropped; labels with fewer than `n` utterances are skipped.
pub fn build_classifier_inputs(
    utts: &[LabeledUtterance],
    num_labels: usize,
    n: usize,
    seed: Option<u64>,
) -> Result<Vec<ClassifierInput>> {
    let indices: Vec<usize> = (0..utts.len()).collect();
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    build_from(utts, &indices, num_labels, n, rng.as_mut())
}

/// Random minority oversampling: every label is topped up to the majority
/// count with seeded resamples of its own instances.
pub fn balance_dataset(inputs: &[ClassifierInput], num_labels: usize, seed: u64) -> Result<Vec<ClassifierInput>> {
    let mut by_label = vec![Vec::new(); num_labels];
    for (i, x) in inputs.iter().enumerate() {
        if x.label >= num_labels {
            return Err(Error::InvalidInput(format!("label {} with {num_labels} labels", x.label)));
        }
        by_label[x.label].push(i);
    }
    if let Some(empty) = by_label.iter().position(Vec::is_empty) {
        return Err(Error::InvalidInput(format!("label {empty} has no instances")));
    }
    let target = by_label.iter().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = inputs.to_vec();
    for members in &by_label {
        for _ in members.len()..target {
            out.push(inputs[members[rng.random_range(0..members.len())]].clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ClassifierSplits {
    pub train: Vec<ClassifierInput>,
    pub valid: Vec<ClassifierInput>,
    pub test: Vec<ClassifierInput>,
}

/// Splits utterances (not inputs) into disjoint train/validation/test
/// parts, builds `n`-inputs inside each part and balances every split.
pub fn build_splits(
    utts: &[LabeledUtterance],
    num_labels: usize,
    n: usize,
    valid_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<ClassifierSplits> {
    if !(valid_frac >= 0.0 && test_frac >= 0.0 && valid_frac + test_frac < 1.0) {
        return Err(Error::InvalidInput("split fractions must be nonnegative and sum below 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..utts.len()).collect();
    idx.shuffle(&mut rng);
    let nv = (utts.len() as f64 * valid_frac).round() as usize;
    let nt = (utts.len() as f64 * test_frac).round() as usize;
    let (valid, rest) = idx.split_at(nv);
    let (test, train) = rest.split_at(nt.min(rest.len()));
    let mut part = |ix: &[usize], salt: u64| -> Result<Vec<ClassifierInput>> {
        let inputs = build_from(utts, ix, num_labels, n, Some(&mut rng))?;
        if inputs.is_empty() {
            return Ok(inputs);
        }
        balance_dataset(&inputs, num_labels, seed ^ salt)
    };
    Ok(ClassifierSplits {
        train: part(train, 1)?,
        valid: part(valid, 2)?,
        test: part(test, 3)?,
    })
}
