//! Trait classifiers used to score generated responses.

pub mod data;
pub mod model;
pub mod train;

pub use data::{
    balance_dataset, build_classifier_inputs, build_splits, utterances_from_pairs, ClassifierInput,
    ClassifierSplits, LabeledUtterance,
};
pub use model::{argmax_first, Architecture, ClassifierConfig, Dropout, TraitClassifier, UtteranceScorer};
pub use train::{accuracy, train_classifier, ClassifierReport, ClassifierTrainConfig, EpochRecord};
