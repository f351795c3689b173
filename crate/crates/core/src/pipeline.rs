//! End-to-end experiment runner driven by a TOML manifest.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    build_classifier_inputs, build_splits, train_classifier, utterances_from_pairs, ClassifierConfig,
    ClassifierReport, ClassifierTrainConfig, LabeledUtterance, TraitClassifier,
};
use crate::corpus::{
    corpus_stats, generate_synthetic_corpus, preprocess, read_jsonl, split, to_train_pairs, write_jsonl, Anonymizer,
    DialogueSession, FilterRules, LabelMapper, LocationTable, PostResponsePair, SyntheticCorpusSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    assigned_accuracy, build_biased_set, evaluate, generate_assigned, BiasedSetRequest, EvalReport, ScoredPair,
};
use crate::fusion::{FusionScheme, TraitKey};
use crate::seq2seq::{ModelConfig, PersonaModel, TrainPair, Variant, Vocabulary};
use crate::training::{train, OutputDir, TrainConfig};

/// The small manifest shipped with the crate.
pub const TINY_MANIFEST: &str = include_str!("../manifests/tiny.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSettings,
    #[serde(default)]
    pub preprocess: PreprocessSettings,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<String>,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default)]
    pub biased_set: BiasedSettings,
}

fn default_variants() -> Vec<String> {
    Variant::default_grid().into_iter().map(|v| v.name).collect()
}

/// Either a synthetic corpus spec or a path to session JSONL.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub synthetic: Option<SyntheticCorpusSpec>,
    pub sessions: Option<PathBuf>,
    pub abusive_words: Option<PathBuf>,
    pub locations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSettings {
    pub rules: FilterRules,
    /// Shares of sessions held out; splits are disjoint in sessions.
    pub valid_frac: f64,
    pub test_frac: f64,
    pub max_vocab: usize,
    pub max_response_len: usize,
    pub salt: Option<String>,
}

impl Default for PreprocessSettings {
    fn default() -> Self {
        PreprocessSettings {
            rules: FilterRules::default(),
            valid_frac: 0.05,
            test_frac: 0.1,
            max_vocab: 2000,
            max_response_len: 20,
            salt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub n: usize,
    pub model: ClassifierConfig,
    pub train: ClassifierTrainConfig,
    pub valid_frac: f64,
    pub test_frac: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        ClassifierSettings {
            n: 20,
            model: ClassifierConfig::default(),
            train: ClassifierTrainConfig::default(),
            valid_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub profile: Profile,
    pub hidden_dim: Option<usize>,
    pub persona_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub decoder_layers: Option<usize>,
    pub max_decode_len: Option<usize>,
    pub max_post_len: Option<usize>,
}

impl ModelSettings {
    pub fn config(&self, vocab_size: usize, variant: &Variant) -> ModelConfig {
        let mut c = match self.profile {
            Profile::Desk => ModelConfig::desk(vocab_size),
            Profile::Full => ModelConfig { vocab_size, ..ModelConfig::full() },
        };
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut c.hidden_dim, self.hidden_dim);
        set(&mut c.persona_dim, self.persona_dim);
        set(&mut c.embed_dim, self.embed_dim);
        set(&mut c.encoder_layers, self.encoder_layers);
        set(&mut c.decoder_layers, self.decoder_layers);
        set(&mut c.max_decode_len, self.max_decode_len);
        set(&mut c.max_post_len, self.max_post_len);
        let mut c = c.with_variant(variant);
        // The profile widths do not divide by three traits. An explicit
        // persona_dim is left alone and rejected by validation instead.
        let n = c.traits.len();
        if c.fusion == FusionScheme::Concat && self.persona_dim.is_none() && n > 0 && c.persona_dim % n != 0 {
            let rounded = c.persona_dim / n * n;
            info!("{}: persona_dim {} rounded to {rounded} for {n}-way concatenation", variant.name, c.persona_dim);
            c.persona_dim = rounded;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n: usize,
    /// Caps the number of test pairs evaluated.
    pub max_pairs: Option<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n: 20, max_pairs: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasedSettings {
    pub traits: Vec<TraitKey>,
    /// Defaults to every labeled test pair.
    pub pool_size: Option<usize>,
    pub m: usize,
    /// Defaults to a fifth of the pool.
    pub top_k: Option<usize>,
    pub n: usize,
}

impl Default for BiasedSettings {
    fn default() -> Self {
        BiasedSettings {
            traits: TraitKey::ALL.to_vec(),
            pool_size: None,
            m: 1000,
            top_k: None,
            n: 20,
        }
    }
}

impl Manifest {
    /// Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: Manifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {}", e.message())))?;
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut m.output_dir);
        for p in [&mut m.corpus.sessions, &mut m.corpus.abusive_words, &mut m.corpus.locations]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The bundled tiny manifest writing to `output_dir`.
    pub fn tiny(output_dir: &Path) -> Result<Self> {
        let mut m = Self::from_toml(TINY_MANIFEST, Path::new("."))?;
        m.output_dir = output_dir.to_path_buf();
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.synthetic.is_some() && c.sessions.is_some() {
            return Err(Error::Config("corpus: give either `synthetic` or `sessions`, not both".into()));
        }
        for p in [&c.sessions, &c.abusive_words, &c.locations].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants to train".into()));
        }
        for v in &self.variants {
            v.parse::<Variant>()?;
        }
        self.train.validate()?;
        self.classifier.model.validate()?;
        Ok(())
    }

    pub fn mapper(&self) -> Result<LabelMapper> {
        let mut mapper = LabelMapper::default();
        if let Some(spec) = &self.corpus.synthetic {
            mapper.reference_year = spec.reference_year;
        }
        if let Some(p) = &self.corpus.locations {
            mapper.locations = LocationTable::load(p)?;
            mapper.locations.validate(&mapper.schema)?;
        }
        Ok(mapper)
    }

    fn synthetic(&self) -> Option<SyntheticCorpusSpec> {
        match (&self.corpus.synthetic, &self.corpus.sessions) {
            (Some(s), _) => Some(s.clone()),
            (None, None) => Some(SyntheticCorpusSpec { seed: self.seed, ..Default::default() }),
            (None, Some(_)) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip stages whose recorded key still matches.
    pub resume: bool,
    /// Allow writing into an output directory that already has results.
    pub overwrite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    key: String,
    outputs: Vec<PathBuf>,
}

/// Trait accuracy on the biased sets, one row per model plus the gold
/// responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedRow {
    pub model: String,
    /// Trait name to accuracy on that trait's biased set.
    pub acc: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedSetSummary {
    #[serde(rename = "trait")]
    pub key: TraitKey,
    pub pool: usize,
    pub selected: usize,
    pub min_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub table4: Vec<EvalReport>,
    pub table5: Vec<BiasedRow>,
    pub classifiers: Vec<ClassifierReport>,
    pub biased_sets: Vec<BiasedSetSummary>,
}

impl PipelineReport {
    /// Markdown rendering of both tables.
    pub fn to_markdown(&self) -> String {
        let keys: Vec<&str> = TraitKey::ALL.iter().map(|k| k.name()).collect();
        let pct = |m: &BTreeMap<String, f64>, k: &str| m.get(k).map_or("-".to_string(), |v| format!("{:.1}", v * 100.0));
        let mut s = String::from("## Test set\n\n| model | ppx. | dist1 | dist2 |");
        for k in &keys {
            let _ = write!(s, " acc. {k} |");
        }
        s.push_str("\n|---|---|---|---|");
        s.push_str(&"---|".repeat(keys.len()));
        s.push('\n');
        for r in &self.table4 {
            let _ = write!(s, "| {} | {:.2} | {:.4} | {:.4} |", r.variant, r.perplexity, r.distinct_1, r.distinct_2);
            for k in &keys {
                let _ = write!(s, " {} |", pct(&r.accuracy, k));
            }
            s.push('\n');
        }
        s.push_str("\n## Biased test sets\n\n| model |");
        for k in &keys {
            let _ = write!(s, " {k} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(keys.len()));
        s.push('\n');
        for r in &self.table5 {
            let _ = write!(s, "| {} |", r.model);
            for k in &keys {
                let _ = write!(s, " {} |", pct(&r.acc, k));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Output locations under the run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn classifier(&self, key: TraitKey) -> PathBuf {
        self.root.join("classifiers").join(format!("{key}.ckpt"))
    }

    pub fn classifier_report(&self, key: TraitKey) -> PathBuf {
        self.root.join("classifiers").join(format!("{key}.json"))
    }

    pub fn model_dir(&self, variant: &str) -> PathBuf {
        self.root.join("models").join(variant.replace('+', "_"))
    }

    pub fn model(&self, variant: &str) -> PathBuf {
        self.model_dir(variant).join("best.ckpt")
    }

    pub fn biased(&self, key: TraitKey) -> PathBuf {
        self.data(&format!("biased_{key}.jsonl"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn state(&self) -> PathBuf {
        self.root.join("stages.json")
    }
}

/// A biased-set entry on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedPair {
    #[serde(flatten)]
    pub scored: ScoredPair,
    pub pair: PostResponsePair,
}

struct Runner<'a> {
    manifest: &'a Manifest,
    layout: Layout,
    mapper: LabelMapper,
    state: BTreeMap<String, StageRecord>,
    keys: BTreeMap<String, String>,
    ran: HashSet<String>,
    resume: bool,
    executed: Vec<String>,
    skipped: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl Runner<'_> {
    /// Runs `body` unless resuming and the stage is up to date: same key,
    /// outputs present, and no upstream stage ran in this invocation.
    fn stage<C: Serialize>(
        &mut self,
        name: &str,
        deps: &[String],
        config: &C,
        outputs: Vec<PathBuf>,
        body: impl FnOnce(&Self) -> Result<()>,
    ) -> Result<()> {
        let mut h = Sha256::new();
        h.update(name.as_bytes());
        h.update(serde_json::to_vec(config)?);
        for d in deps {
            h.update(self.keys.get(d).map(String::as_bytes).unwrap_or(b"?"));
        }
        let key = hex::encode(h.finalize());
        let fresh = self.resume
            && deps.iter().all(|d| !self.ran.contains(d))
            && self
                .state
                .get(name)
                .is_some_and(|r| r.key == key && r.outputs.iter().all(|p| p.exists()));
        self.keys.insert(name.to_string(), key.clone());
        if fresh {
            info!("stage {name}: up to date");
            self.skipped.push(name.to_string());
            return Ok(());
        }
        info!("stage {name}: running");
        self.state.remove(name);
        body(self).map_err(|e| Error::Stage { stage: name.to_string(), cause: Box::new(e) })?;
        self.state.insert(name.to_string(), StageRecord { key, outputs });
        write_json(&self.layout.state(), &self.state)?;
        self.ran.insert(name.to_string());
        self.executed.push(name.to_string());
        Ok(())
    }

    fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.layout.data("vocab.txt"))
    }

    fn pairs(&self, split: &str) -> Result<Vec<PostResponsePair>> {
        read_jsonl(&self.layout.data(&format!("{split}.jsonl")))
    }

    fn train_pairs(&self, raw: &[PostResponsePair], vocab: &Vocabulary, max_post: usize) -> Result<Vec<TrainPair>> {
        to_train_pairs(raw, vocab, &self.mapper, max_post, self.manifest.preprocess.max_response_len)
    }

    fn eval_pairs(&self) -> Result<Vec<PostResponsePair>> {
        let mut test = self.pairs("test")?;
        if let Some(cap) = self.manifest.eval.max_pairs {
            test.truncate(cap);
        }
        Ok(test)
    }
}

fn synth_stage(r: &Runner<'_>) -> Result<()> {
    let m = r.manifest;
    let mut abusive: Vec<String> = Vec::new();
    let sessions: Vec<DialogueSession> = match m.synthetic() {
        Some(spec) => {
            let c = generate_synthetic_corpus(&spec, &r.mapper)?;
            abusive.extend(c.lexicon.abusive.iter().cloned());
            write_json(&r.layout.data("lexicon.json"), &c.lexicon)?;
            c.sessions
        }
        None => read_jsonl(m.corpus.sessions.as_deref().expect("validated"))?,
    };
    if let Some(p) = &m.corpus.abusive_words {
        let mut rules = FilterRules::default();
        rules.load_abusive(p)?;
        abusive.extend(rules.abusive);
    }
    write_jsonl(&r.layout.data("raw_sessions.jsonl"), &sessions)?;
    let path = r.layout.data("abusive.txt");
    fs::write(&path, abusive.join("\n")).map_err(|e| Error::io(&path, e))
}

fn preprocess_stage(r: &Runner<'_>) -> Result<()> {
    let s = &r.manifest.preprocess;
    let raw: Vec<DialogueSession> = read_jsonl(&r.layout.data("raw_sessions.jsonl"))?;
    let mut rules = s.rules.clone();
    rules.load_abusive(&r.layout.data("abusive.txt"))?;
    let salt = s.salt.clone().unwrap_or_else(|| format!("seed-{}", r.manifest.seed));
    let (sessions, report) = preprocess(&raw, &rules, &Anonymizer::new(salt));
    if sessions.is_empty() {
        return Err(Error::InvalidInput("no session survived filtering".into()));
    }
    let n = sessions.len();
    let nv = (n as f64 * s.valid_frac).round() as usize;
    let nt = (n as f64 * s.test_frac).round() as usize;
    let (train, valid, test) = split(&sessions, nv, nt, r.manifest.seed);
    let flat = |ss: &[DialogueSession]| ss.iter().flat_map(DialogueSession::pairs).collect::<Vec<_>>();
    let (train, valid, test) = (flat(&train), flat(&valid), flat(&test));
    let vocab = Vocabulary::build(
        train.iter().flat_map(|p| p.post_tokens.iter().chain(&p.response_tokens)).map(String::as_str),
        s.max_vocab,
    );
    write_jsonl(&r.layout.data("sessions.jsonl"), &sessions)?;
    write_json(&r.layout.data("filter_report.json"), &report)?;
    write_json(&r.layout.data("stats.json"), &corpus_stats(&sessions, &r.mapper)?)?;
    write_jsonl(&r.layout.data("train.jsonl"), &train)?;
    write_jsonl(&r.layout.data("valid.jsonl"), &valid)?;
    write_jsonl(&r.layout.data("test.jsonl"), &test)?;
    vocab.save(&r.layout.data("vocab.txt"))
}

fn classifier_stage(r: &Runner<'_>, key: TraitKey) -> Result<()> {
    let c = &r.manifest.classifier;
    let utts = utterances_from_pairs(&r.pairs("train")?, &r.mapper, key)?;
    let labels = r.mapper.schema.labels(key).to_vec();
    let splits = build_splits(&utts, labels.len(), c.n, c.valid_frac, c.test_frac, r.manifest.seed)?;
    let cfg = ClassifierTrainConfig { seed: r.manifest.seed, ..c.train.clone() };
    let (model, report) = train_classifier(key, labels, c.n, &splits, c.model.clone(), &cfg)?;
    model.save(&r.layout.classifier(key))?;
    write_json(&r.layout.classifier_report(key), &report)
}

fn train_stage(r: &Runner<'_>, name: &str) -> Result<()> {
    let variant: Variant = name.parse()?;
    let vocab = r.vocab()?;
    let config = r.manifest.model.config(vocab.len(), &variant);
    let train_pairs = r.train_pairs(&r.pairs("train")?, &vocab, config.max_post_len)?;
    let valid_pairs = r.train_pairs(&r.pairs("valid")?, &vocab, config.max_post_len)?;
    let mut model = PersonaModel::new(config, r.manifest.seed)?;
    let out = OutputDir { dir: r.layout.model_dir(name), vocab };
    let cfg = TrainConfig { seed: r.manifest.seed, ..r.manifest.train.clone() };
    let report = train(&mut model, &train_pairs, &valid_pairs, &cfg, Some(&out))?;
    write_json(&out.dir.join("train_report.json"), &report)
}

fn load_classifiers(r: &Runner<'_>) -> Result<Vec<TraitClassifier>> {
    TraitKey::ALL.iter().map(|&k| TraitClassifier::load(&r.layout.classifier(k))).collect()
}

fn eval_stage(r: &Runner<'_>) -> Result<()> {
    let classifiers = load_classifiers(r)?;
    let raw = r.eval_pairs()?;
    let mut rows = Vec::new();
    for name in &r.manifest.variants {
        let (model, vocab) = PersonaModel::load(&r.layout.model(name))?;
        let pairs = r.train_pairs(&raw, &vocab, model.config().max_post_len)?;
        rows.push(evaluate(name, &model, &vocab, &pairs, &classifiers, r.manifest.eval.n, r.manifest.seed)?);
    }
    write_json(&r.layout.report("eval.json"), &rows)
}

fn biased_stage(r: &Runner<'_>, key: TraitKey) -> Result<()> {
    let b = &r.manifest.biased_set;
    let pool: Vec<PostResponsePair> = r.pairs("test")?;
    let labeled = pool
        .iter()
        .map(|p| r.mapper.values(&p.responder_profile).map(|v| v.get(key).is_some()))
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&x| x)
        .count();
    let pool_size = b.pool_size.unwrap_or(labeled).min(labeled);
    let request = BiasedSetRequest {
        key,
        pool_size,
        m: b.m,
        top_k: b.top_k.unwrap_or(pool_size / 5).min(pool_size),
        n: b.n,
        seed: r.manifest.seed,
    };
    let classifier = TraitClassifier::load(&r.layout.classifier(key))?;
    let picked = build_biased_set(&pool, &r.mapper, &request, &classifier)?;
    let out: Vec<BiasedPair> = picked
        .into_iter()
        .map(|s| BiasedPair { pair: pool[s.index].clone(), scored: s })
        .collect();
    write_jsonl(&r.layout.biased(key), &out)?;
    write_json(
        &r.layout.data(&format!("biased_{key}.summary.json")),
        &BiasedSetSummary {
            key,
            pool: pool_size,
            selected: out.len(),
            min_score: out.last().map_or(f64::NAN, |p| p.scored.score),
        },
    )
}

/// Accuracy of the classifier on the gold responses of a biased set.
fn golden_accuracy(set: &[BiasedPair], classifier: &TraitClassifier, n: usize) -> Result<f64> {
    let utts: Vec<LabeledUtterance> = set
        .iter()
        .map(|p| LabeledUtterance { tokens: p.pair.response_tokens.clone(), label: p.scored.label })
        .collect();
    let inputs = build_classifier_inputs(&utts, classifier.num_labels(), n, None)?;
    crate::classifier::accuracy(classifier, &inputs)
}

fn eval_biased_stage(r: &Runner<'_>) -> Result<()> {
    let classifiers = load_classifiers(r)?;
    let n = r.manifest.eval.n;
    let mut rows: Vec<BiasedRow> = Vec::new();
    let mut golden = BiasedRow { model: "golden".into(), acc: BTreeMap::new() };
    let sets: Vec<(TraitKey, Vec<BiasedPair>)> = r
        .manifest
        .biased_set
        .traits
        .iter()
        .map(|&k| Ok((k, read_jsonl(&r.layout.biased(k))?)))
        .collect::<Result<_>>()?;
    for name in &r.manifest.variants {
        let (model, vocab) = PersonaModel::load(&r.layout.model(name))?;
        let mut row = BiasedRow { model: name.clone(), acc: BTreeMap::new() };
        for (key, set) in &sets {
            let c = &classifiers[TraitKey::ALL.iter().position(|k| k == key).expect("known key")];
            let raw: Vec<PostResponsePair> = set.iter().map(|p| p.pair.clone()).collect();
            let pairs = r.train_pairs(&raw, &vocab, model.config().max_post_len)?;
            let gold: Vec<usize> = set.iter().map(|p| p.scored.label).collect();
            let responses = generate_assigned(&model, &vocab, &pairs, *key, &gold)?;
            match assigned_accuracy(&responses, &gold, c.num_labels(), c, n) {
                Ok(a) => {
                    row.acc.insert(key.name().into(), a.accuracy);
                }
                Err(Error::InvalidInput(msg)) => log::warn!("{name} on biased {key}: {msg}"),
                Err(e) => return Err(e),
            }
        }
        rows.push(row);
    }
    for (key, set) in &sets {
        let c = &classifiers[TraitKey::ALL.iter().position(|k| k == key).expect("known key")];
        if let Ok(a) = golden_accuracy(set, c, n) {
            golden.acc.insert(key.name().into(), a);
        }
    }
    rows.push(golden);
    write_json(&r.layout.report("biased_eval.json"), &rows)
}

fn report_stage(r: &Runner<'_>) -> Result<()> {
    let report = PipelineReport {
        table4: read_json(&r.layout.report("eval.json"))?,
        table5: read_json(&r.layout.report("biased_eval.json"))?,
        classifiers: TraitKey::ALL
            .iter()
            .map(|&k| read_json(&r.layout.classifier_report(k)))
            .collect::<Result<_>>()?,
        biased_sets: r
            .manifest
            .biased_set
            .traits
            .iter()
            .map(|k| read_json(&r.layout.data(&format!("biased_{k}.summary.json"))))
            .collect::<Result<_>>()?,
    };
    write_json(&r.layout.report("report.json"), &report)?;
    let md = r.layout.report("report.md");
    fs::write(&md, report.to_markdown()).map_err(|e| Error::io(&md, e))
}

/// Runs every stage in order, halting on the first failure.
pub fn run_pipeline(manifest: &Manifest, options: RunOptions) -> Result<PipelineOutcome> {
    manifest.validate()?;
    let layout = Layout { root: manifest.output_dir.clone() };
    let state_path = layout.state();
    let state = if state_path.exists() {
        if !options.resume && !options.overwrite {
            return Err(Error::Config(format!(
                "{} already holds results; resume or overwrite explicitly",
                layout.root.display()
            )));
        }
        if options.resume { read_json(&state_path)? } else { BTreeMap::new() }
    } else {
        BTreeMap::new()
    };
    fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    let mut r = Runner {
        manifest,
        mapper: manifest.mapper()?,
        layout: layout.clone(),
        state,
        keys: BTreeMap::new(),
        ran: HashSet::new(),
        resume: options.resume,
        executed: Vec::new(),
        skipped: Vec::new(),
    };
    let m = manifest;
    let seed = m.seed;

    r.stage("synth-data", &[], &(seed, &m.corpus, m.synthetic()), vec![layout.data("raw_sessions.jsonl")], synth_stage)?;
    let synth = vec!["synth-data".to_string()];
    let data_files = ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"].map(|f| layout.data(f)).to_vec();
    r.stage("preprocess", &synth, &(seed, &m.preprocess), data_files, preprocess_stage)?;
    let pre = vec!["preprocess".to_string()];

    let mut classifier_stages = Vec::new();
    for key in TraitKey::ALL {
        let name = format!("train-classifier:{key}");
        let outputs = vec![layout.classifier(key), layout.classifier_report(key)];
        r.stage(&name, &pre, &(seed, &m.classifier, key), outputs, |r| classifier_stage(r, key))?;
        classifier_stages.push(name);
    }
    let mut model_stages = Vec::new();
    for v in &m.variants {
        let name = format!("train:{v}");
        r.stage(&name, &pre, &(seed, &m.model, &m.train, v), vec![layout.model(v)], |r| train_stage(r, v))?;
        model_stages.push(name);
    }
    let mut eval_deps = classifier_stages.clone();
    eval_deps.extend(model_stages.iter().cloned());
    eval_deps.push("preprocess".into());
    r.stage("eval", &eval_deps, &(seed, &m.eval, &m.variants), vec![layout.report("eval.json")], eval_stage)?;

    let mut biased_stages = Vec::new();
    for &key in &m.biased_set.traits {
        let name = format!("build-biased-set:{key}");
        let deps = vec!["preprocess".to_string(), format!("train-classifier:{key}")];
        r.stage(&name, &deps, &(seed, &m.biased_set, key), vec![layout.biased(key)], |r| biased_stage(r, key))?;
        biased_stages.push(name);
    }
    let mut deps = biased_stages.clone();
    deps.extend(model_stages);
    deps.extend(classifier_stages);
    r.stage("eval-biased", &deps, &(seed, &m.eval, &m.variants), vec![layout.report("biased_eval.json")], eval_biased_stage)?;
    let deps: Vec<String> = ["eval", "eval-biased"].map(String::from).to_vec();
    r.stage("report", &deps, &seed, vec![layout.report("report.json")], report_stage)?;

    Ok(PipelineOutcome {
        report: read_json(&layout.report("report.json"))?,
        executed: r.executed,
        skipped: r.skipped,
    })
}

/// Reads any TOML-described settings type.
pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Model shape and optimizer settings for a single training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub max_response_len: Option<usize>,
}
