use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{ClassifierInput, ClassifierSplits};
use super::model::{ClassifierConfig, TraitClassifier};
use crate::error::{Error, Result};
use crate::fusion::TraitKey;
use crate::numerics::{Adam, GradBuffer, Graph};
use crate::seq2seq::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            patience: 3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    #[serde(rename = "trait")]
    pub key: TraitKey,
    pub n: usize,
    pub arch: String,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub best_epoch: usize,
    pub valid_accuracy: f64,
    pub test_accuracy: f64,
    pub history: Vec<EpochRecord>,
}

/// Share of inputs whose predicted label matches.
pub fn accuracy(classifier: &TraitClassifier, inputs: &[ClassifierInput]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let tokens: Vec<Vec<String>> = inputs.iter().map(|x| x.tokens.clone()).collect();
    let preds = classifier.classify_many(&tokens)?;
    let hits = preds.iter().zip(inputs).filter(|(p, x)| p.0 == x.label).count();
    Ok(hits as f64 / inputs.len() as f64)
}

/// Builds a vocabulary over the training inputs and trains a fresh
/// classifier, keeping the parameters with the best validation accuracy.
pub fn train_classifier(
    key: TraitKey,
    labels: Vec<String>,
    n: usize,
    splits: &ClassifierSplits,
    model_config: ClassifierConfig,
    config: &ClassifierTrainConfig,
) -> Result<(TraitClassifier, ClassifierReport)> {
    if splits.train.is_empty() || splits.valid.is_empty() {
        return Err(Error::InvalidInput("classifier training needs train and validation inputs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let vocab = Vocabulary::build(
        splits.train.iter().flat_map(|x| x.tokens.iter().map(String::as_str)),
        model_config.max_vocab,
    );
    let arch = model_config.arch;
    let mut model = TraitClassifier::new(key, labels, model_config, vocab, config.seed)?;
    let encoded: Vec<Vec<usize>> = splits.train.iter().map(|x| model.encode(&x.tokens)).collect();

    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut grads = GradBuffer::zeros_like(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0, model.params().clone());
    let mut stale = 0;
    let mut history = Vec::new();
    let mut step = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let ids: Vec<Vec<usize>> = batch.iter().map(|&i| encoded[i].clone()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| splits.train[i].label).collect();
            let weights = vec![1.0 / batch.len() as f64; batch.len()];
            let (loss, g_out) = {
                let mut g = Graph::with_params(model.params());
                let logits = model.logits(&mut g, &ids, Some(&mut rng))?;
                let loss = g.cross_entropy(logits, &targets, &weights)?;
                (g.scalar(loss), g.backward(loss)?)
            };
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, detail: format!("classifier loss {loss}") });
            }
            grads.fill_zero();
            grads.add(&g_out);
            if !grads.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite classifier gradient".into() });
            }
            grads.clip_global_norm(config.clip_norm);
            adam.update(model.params_mut(), &grads);
            total += loss * batch.len() as f64;
        }
        let valid_accuracy = accuracy(&model, &splits.valid)?;
        let train_loss = total / encoded.len() as f64;
        info!("{key} n={n} {arch} epoch {epoch}: loss {train_loss:.4}, valid acc {valid_accuracy:.4}");
        history.push(EpochRecord { epoch, train_loss, valid_accuracy });
        if valid_accuracy > best.0 {
            best = (valid_accuracy, epoch, model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.params_mut().load_from(&best.2)?;
    let test_accuracy = if splits.test.is_empty() { f64::NAN } else { accuracy(&model, &splits.test)? };
    let report = ClassifierReport {
        key,
        n,
        arch: arch.to_string(),
        train_size: splits.train.len(),
        valid_size: splits.valid.len(),
        test_size: splits.test.len(),
        best_epoch: best.1,
        valid_accuracy: best.0,
        test_accuracy,
        history,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::data::{build_splits, LabeledUtterance};
    use crate::classifier::model::Architecture;

    /// Label k uses words "k*" plus shared filler.
    fn separable(per_label: usize) -> Vec<LabeledUtterance> {
        let mut out = Vec::new();
        for i in 0..per_label {
            for label in 0..3 {
                out.push(LabeledUtterance {
                    tokens: vec![format!("m{label}_{}", i % 4), "the".into(), format!("f{}", i % 7)],
                    label,
                });
            }
        }
        out
    }

    fn small(arch: Architecture) -> ClassifierConfig {
        ClassifierConfig { arch, embed_dim: 8, hidden_dim: 8, feature_maps: 4, ..Default::default() }
    }

    #[test]
    fn learns_a_separable_task() {
        let splits = build_splits(&separable(60), 3, 1, 0.2, 0.2, 5).unwrap();
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let cfg = ClassifierTrainConfig { learning_rate: 0.02, batch_size: 8, max_epochs: 30, patience: 6, ..Default::default() };
        for arch in [Architecture::Boe, Architecture::Cnn] {
            let (model, report) = train_classifier(TraitKey::Age, labels.clone(), 1, &splits, small(arch), &cfg).unwrap();
            assert!(report.test_accuracy > 0.95, "{arch}: {report:?}");
            assert_eq!(accuracy(&model, &splits.valid).unwrap(), report.valid_accuracy);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let splits = build_splits(&separable(20), 3, 2, 0.2, 0.2, 1).unwrap();
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let cfg = ClassifierTrainConfig { max_epochs: 2, ..Default::default() };
        let (a, ra) = train_classifier(TraitKey::Gender, labels.clone(), 2, &splits, small(Architecture::Lstm), &cfg).unwrap();
        let (b, rb) = train_classifier(TraitKey::Gender, labels, 2, &splits, small(Architecture::Lstm), &cfg).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert_eq!(ra, rb);
    }

    #[test]
    fn diverging_learning_rate_aborts() {
        let splits = build_splits(&separable(20), 3, 1, 0.2, 0.2, 1).unwrap();
        let labels: Vec<String> = (0..3).map(|i| i.to_string()).collect();
        let cfg = ClassifierTrainConfig { learning_rate: f64::INFINITY, max_epochs: 3, ..Default::default() };
        let err = train_classifier(TraitKey::Age, labels, 1, &splits, small(Architecture::Boe), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }
}
