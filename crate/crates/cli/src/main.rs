use std::fs;
use std::io::{self, BufRead};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use persona_dialog::classifier::{
    build_splits, train_classifier, utterances_from_pairs, Architecture, ClassifierConfig, ClassifierTrainConfig,
    TraitClassifier,
};
use persona_dialog::corpus::{
    corpus_stats, delexicalize, generate_synthetic_corpus, preprocess, read_jsonl, split, to_train_pairs, write_jsonl,
    Anonymizer, DialogueSession, FilterRules, LabelMapper, LocationTable, PostResponsePair, SyntheticCorpusSpec,
    Tokenizer, WhitespaceTokenizer,
};
use persona_dialog::evaluation::{build_biased_set, evaluate, BiasedSetRequest};
use persona_dialog::fusion::{Trait, TraitKey, TraitValues};
use persona_dialog::pipeline::{load_toml, run_pipeline, Manifest, RunOptions, TrainSettings};
use persona_dialog::seq2seq::{PersonaModel, Strategy, Variant, Vocabulary};
use persona_dialog::training::{train, OutputDir};
use persona_dialog::{Error, Result};

/// Persona-conditioned dialogue generation toolkit.
///
/// Every flag can also be set through an environment variable named
/// `PERSONA_<FLAG>` (upper case, dashes as underscores).
#[derive(Parser)]
#[command(name = "persona", version)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, env = "PERSONA_SEED", default_value_t = 0)]
    seed: u64,

    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "PERSONA_LOG", default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dialogue corpus as session JSONL.
    SynthData(SynthArgs),
    /// Filter, anonymize and split sessions; build the vocabulary.
    Preprocess(PreprocessArgs),
    /// Print corpus statistics as JSON.
    CorpusStats(StatsArgs),
    /// Train a trait classifier on the responses of a pair file.
    TrainClassifier(TrainClassifierArgs),
    /// Predict trait labels for utterances, one per input line.
    ClassifyTraits(ClassifyArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Decode a response to a post.
    Generate(GenerateArgs),
    /// Perplexity, distinct-n and trait accuracy on a pair file.
    Eval(EvalArgs),
    /// Rank pool responses by classifier confidence and keep the top.
    BuildBiasedSet(BiasedArgs),
    /// Run every stage of an experiment manifest.
    RunPipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with corpus settings; omitted fields keep defaults.
    #[arg(long, env = "PERSONA_SPEC")]
    spec: Option<PathBuf>,
    #[arg(long, env = "PERSONA_NUM_PAIRS")]
    num_pairs: Option<usize>,
    /// Marker probability for every trait.
    #[arg(long, env = "PERSONA_SIGNAL")]
    signal: Option<f64>,
    #[arg(long, env = "PERSONA_OUT")]
    out: PathBuf,
    /// Where to write the abusive-word list the corpus was drawn with.
    #[arg(long, env = "PERSONA_ABUSIVE_OUT")]
    abusive_out: Option<PathBuf>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long, env = "PERSONA_INPUT")]
    input: PathBuf,
    #[arg(long, env = "PERSONA_OUT_DIR")]
    out_dir: PathBuf,
    /// Abusive-word list, one word per line.
    #[arg(long, env = "PERSONA_ABUSIVE")]
    abusive: Option<PathBuf>,
    #[arg(long, env = "PERSONA_VALID_FRAC", default_value_t = 0.05)]
    valid_frac: f64,
    #[arg(long, env = "PERSONA_TEST_FRAC", default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long, env = "PERSONA_MAX_VOCAB", default_value_t = 2000)]
    max_vocab: usize,
    #[arg(long, env = "PERSONA_SALT")]
    salt: Option<String>,
    #[arg(long, env = "PERSONA_OVERWRITE")]
    overwrite: bool,
}

#[derive(Args)]
struct LabelArgs {
    /// Province-to-area table (JSON object).
    #[arg(long, env = "PERSONA_LOCATIONS")]
    locations: Option<PathBuf>,
    #[arg(long, env = "PERSONA_REFERENCE_YEAR")]
    reference_year: Option<i32>,
}

impl LabelArgs {
    fn mapper(&self) -> Result<LabelMapper> {
        let mut m = LabelMapper::default();
        if let Some(p) = &self.locations {
            m.locations = LocationTable::load(p)?;
            m.locations.validate(&m.schema)?;
        }
        if let Some(y) = self.reference_year {
            m.reference_year = y;
        }
        Ok(m)
    }
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long, env = "PERSONA_INPUT")]
    input: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long = "trait", env = "PERSONA_TRAIT")]
    key: TraitKey,
    /// Post-response pair JSONL; responses and responder labels are used.
    #[arg(long, env = "PERSONA_DATA")]
    data: PathBuf,
    #[arg(long, env = "PERSONA_N", default_value_t = 20)]
    n: usize,
    #[arg(long, env = "PERSONA_ARCH", default_value = "boe")]
    arch: Architecture,
    #[arg(long, env = "PERSONA_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "PERSONA_OUT")]
    out: PathBuf,
    #[arg(long, env = "PERSONA_OVERWRITE")]
    overwrite: bool,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long, env = "PERSONA_CLASSIFIER")]
    classifier: PathBuf,
    /// Text file with one utterance per line; stdin when omitted.
    #[arg(long, env = "PERSONA_INPUT")]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML with `[model]` and `[train]` sections.
    #[arg(long, env = "PERSONA_CONFIG")]
    config: Option<PathBuf>,
    /// Directory with train.jsonl, valid.jsonl and vocab.txt.
    #[arg(long, env = "PERSONA_DATA")]
    data: PathBuf,
    #[arg(long, env = "PERSONA_VARIANT", default_value = "att+pab")]
    variant: Variant,
    #[arg(long, env = "PERSONA_OUT")]
    out: PathBuf,
    #[arg(long, env = "PERSONA_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "PERSONA_MAX_STEPS")]
    max_steps: Option<usize>,
    #[arg(long, env = "PERSONA_OVERWRITE")]
    overwrite: bool,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, env = "PERSONA_MODEL")]
    model: PathBuf,
    #[arg(long, env = "PERSONA_POST")]
    post: String,
    #[arg(long, env = "PERSONA_GENDER")]
    gender: Option<String>,
    #[arg(long, env = "PERSONA_AGE")]
    age: Option<String>,
    #[arg(long, env = "PERSONA_LOCATION")]
    location: Option<String>,
    /// Beam width; greedy decoding when omitted.
    #[arg(long, env = "PERSONA_BEAM")]
    beam: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "PERSONA_MODEL")]
    model: PathBuf,
    #[arg(long, env = "PERSONA_PAIRS")]
    pairs: PathBuf,
    /// Directory holding `<trait>.ckpt` classifiers.
    #[arg(long, env = "PERSONA_CLASSIFIERS")]
    classifiers: Option<PathBuf>,
    #[arg(long, env = "PERSONA_N", default_value_t = 20)]
    n: usize,
    #[arg(long, env = "PERSONA_REPORT")]
    report: Option<PathBuf>,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct BiasedArgs {
    #[arg(long = "trait", env = "PERSONA_TRAIT")]
    key: TraitKey,
    #[arg(long, env = "PERSONA_POOL")]
    pool: PathBuf,
    #[arg(long, env = "PERSONA_CLASSIFIER")]
    classifier: PathBuf,
    #[arg(long, env = "PERSONA_M", default_value_t = 1000)]
    m: usize,
    #[arg(long, env = "PERSONA_N", default_value_t = 20)]
    n: usize,
    #[arg(long, env = "PERSONA_TOP_K")]
    top_k: usize,
    /// Pool size; every labeled pair when omitted.
    #[arg(long, env = "PERSONA_POOL_SIZE")]
    pool_size: Option<usize>,
    #[arg(long, env = "PERSONA_OUT")]
    out: PathBuf,
    #[command(flatten)]
    labels: LabelArgs,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, env = "PERSONA_MANIFEST", conflicts_with = "tiny")]
    manifest: Option<PathBuf>,
    /// Use the bundled tiny manifest.
    #[arg(long, env = "PERSONA_TINY")]
    tiny: bool,
    /// Overrides the manifest's output directory.
    #[arg(long, env = "PERSONA_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, env = "PERSONA_RESUME")]
    resume: bool,
    #[arg(long, env = "PERSONA_OVERWRITE")]
    overwrite: bool,
}

fn refuse_existing(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    Ok(())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn synth_data(a: SynthArgs, seed: u64) -> Result<()> {
    refuse_existing(&a.out, false)?;
    let mut spec: SyntheticCorpusSpec = match &a.spec {
        Some(p) => load_toml(p)?,
        None => SyntheticCorpusSpec::default(),
    };
    spec.seed = seed;
    if let Some(n) = a.num_pairs {
        spec.num_pairs = n;
    }
    if let Some(s) = a.signal {
        for k in TraitKey::ALL {
            *spec.signal.get_mut(k) = s;
        }
    }
    let mapper = LabelMapper { reference_year: spec.reference_year, ..Default::default() };
    let corpus = generate_synthetic_corpus(&spec, &mapper)?;
    write_jsonl(&a.out, &corpus.sessions)?;
    if let Some(p) = &a.abusive_out {
        fs::write(p, corpus.lexicon.abusive.join("\n")).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    info!("{} sessions written to {}", corpus.sessions.len(), a.out.display());
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs, seed: u64) -> Result<()> {
    refuse_existing(&a.out_dir.join("train.jsonl"), a.overwrite)?;
    let raw: Vec<DialogueSession> = read_jsonl(&a.input)?;
    let mut rules = FilterRules::default();
    if let Some(p) = &a.abusive {
        rules.load_abusive(p)?;
    }
    let anonymizer = a.salt.map_or_else(|| Anonymizer::from_seed(seed), Anonymizer::new);
    let (sessions, report) = preprocess(&raw, &rules, &anonymizer);
    let n = sessions.len();
    let nv = (n as f64 * a.valid_frac).round() as usize;
    let nt = (n as f64 * a.test_frac).round() as usize;
    let (train, valid, test) = split(&sessions, nv, nt, seed);
    let flat = |ss: &[DialogueSession]| ss.iter().flat_map(DialogueSession::pairs).collect::<Vec<_>>();
    let (train, valid, test) = (flat(&train), flat(&valid), flat(&test));
    let vocab = Vocabulary::build(
        train.iter().flat_map(|p| p.post_tokens.iter().chain(&p.response_tokens)).map(String::as_str),
        a.max_vocab,
    );
    let d = &a.out_dir;
    write_jsonl(&d.join("sessions.jsonl"), &sessions)?;
    write_jsonl(&d.join("train.jsonl"), &train)?;
    write_jsonl(&d.join("valid.jsonl"), &valid)?;
    write_jsonl(&d.join("test.jsonl"), &test)?;
    vocab.save(&d.join("vocab.txt"))?;
    write_json(&d.join("filter_report.json"), &report)?;
    print_json(&report)
}

fn train_classifier_cmd(a: TrainClassifierArgs, seed: u64) -> Result<()> {
    refuse_existing(&a.out, a.overwrite)?;
    let mapper = a.labels.mapper()?;
    let pairs: Vec<PostResponsePair> = read_jsonl(&a.data)?;
    let utts = utterances_from_pairs(&pairs, &mapper, a.key)?;
    let labels = mapper.schema.labels(a.key).to_vec();
    let splits = build_splits(&utts, labels.len(), a.n, 0.1, 0.1, seed)?;
    let mut cfg = ClassifierTrainConfig { seed, ..Default::default() };
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    let model_cfg = ClassifierConfig { arch: a.arch, ..Default::default() };
    let (model, report) = train_classifier(a.key, labels, a.n, &splits, model_cfg, &cfg)?;
    model.save(&a.out)?;
    print_json(&report)
}

fn classify_cmd(a: ClassifyArgs) -> Result<()> {
    let c = TraitClassifier::load(&a.classifier)?;
    let lines: Vec<String> = match &a.input {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Io { path: p.clone(), source: e })?
            .lines()
            .map(String::from)
            .collect(),
        None => io::stdin().lock().lines().collect::<io::Result<_>>().map_err(|e| Error::Io { path: "<stdin>".into(), source: e })?,
    };
    let tokens: Vec<Vec<String>> = lines.iter().map(|l| WhitespaceTokenizer.tokenize(&delexicalize(l))).collect();
    for (line, (label, p)) in lines.iter().zip(c.classify_many(&tokens)?) {
        println!("{}", json!({ "text": line, "trait": c.key(), "label": c.labels()[label], "probability": p }));
    }
    Ok(())
}

fn train_cmd(a: TrainArgs, seed: u64) -> Result<()> {
    refuse_existing(&a.out.join("best.ckpt"), a.overwrite)?;
    let mut settings: TrainSettings = match &a.config {
        Some(p) => load_toml(p)?,
        None => TrainSettings::default(),
    };
    settings.train.seed = seed;
    if let Some(e) = a.epochs {
        settings.train.max_epochs = e;
    }
    if a.max_steps.is_some() {
        settings.train.max_steps = a.max_steps;
    }
    let mapper = a.labels.mapper()?;
    let vocab = Vocabulary::load(&a.data.join("vocab.txt"))?;
    let config = settings.model.config(vocab.len(), &a.variant);
    let max_response = settings.max_response_len.unwrap_or(20);
    let load = |name: &str| -> Result<_> {
        let raw: Vec<PostResponsePair> = read_jsonl(&a.data.join(name))?;
        to_train_pairs(&raw, &vocab, &mapper, config.max_post_len, max_response)
    };
    let (train_pairs, valid_pairs) = (load("train.jsonl")?, load("valid.jsonl")?);
    let mut model = PersonaModel::new(config, seed)?;
    let out = OutputDir { dir: a.out.clone(), vocab };
    let report = train(&mut model, &train_pairs, &valid_pairs, &settings.train, Some(&out))?;
    write_json(&a.out.join("train_report.json"), &report)?;
    print_json(&json!({ "steps": report.steps, "best_step": report.best_step, "best_val_ppx": report.best_val_ppx }))
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let (model, vocab) = PersonaModel::load(&a.model)?;
    let schema = &model.config().schema;
    let given = [(TraitKey::Gender, &a.gender), (TraitKey::Age, &a.age), (TraitKey::Location, &a.location)];
    let traits: Vec<Trait> = given
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| Trait::new(*k, v.clone())))
        .collect();
    let values = TraitValues::from_traits(schema, &traits)?;
    let tokens = WhitespaceTokenizer.tokenize(&delexicalize(&a.post));
    let mut post = vocab.encode(&tokens);
    post.truncate(model.config().max_post_len);
    let strategy = a.beam.map_or(Strategy::Greedy, Strategy::Beam);
    let out = model.generate_one(&post, values, strategy)?;
    let words = vocab.decode(&out.tokens);
    let mut result = json!({
        "post": a.post,
        "response": words.join(" "),
        "tokens": words,
        "log_prob": out.log_prob,
    });
    if !out.trait_weights.is_empty() {
        let keys: Vec<&str> = model.config().traits.iter().map(|k| k.name()).collect();
        result["trait_keys"] = json!(keys);
        result["trait_weights"] = json!(out.trait_weights);
    }
    if !out.gates.is_empty() {
        result["gates"] = json!(out.gates);
    }
    print_json(&result)
}

fn eval_cmd(a: EvalArgs, seed: u64) -> Result<()> {
    let mapper = a.labels.mapper()?;
    let (model, vocab) = PersonaModel::load(&a.model)?;
    let raw: Vec<PostResponsePair> = read_jsonl(&a.pairs)?;
    let pairs = to_train_pairs(&raw, &vocab, &mapper, model.config().max_post_len, 20)?;
    let classifiers = match &a.classifiers {
        Some(dir) => TraitKey::ALL
            .iter()
            .map(|k| dir.join(format!("{k}.ckpt")))
            .filter(|p| p.exists())
            .map(|p| TraitClassifier::load(&p))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let name = a.model.parent().and_then(|p| p.file_name()).map_or("model".into(), |n| n.to_string_lossy().into_owned());
    let report = evaluate(&name, &model, &vocab, &pairs, &classifiers, a.n, seed)?;
    if let Some(p) = &a.report {
        write_json(p, &report)?;
    }
    print_json(&report)
}

fn biased_cmd(a: BiasedArgs, seed: u64) -> Result<()> {
    let mapper = a.labels.mapper()?;
    let pool: Vec<PostResponsePair> = read_jsonl(&a.pool)?;
    let labeled = pool
        .iter()
        .map(|p| mapper.values(&p.responder_profile))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .filter(|v| v.get(a.key).is_some())
        .count();
    let request = BiasedSetRequest {
        key: a.key,
        pool_size: a.pool_size.unwrap_or(labeled),
        m: a.m,
        top_k: a.top_k,
        n: a.n,
        seed,
    };
    let classifier = TraitClassifier::load(&a.classifier)?;
    let picked = build_biased_set(&pool, &mapper, &request, &classifier)?;
    let rows: Vec<_> = picked
        .iter()
        .map(|s| json!({ "index": s.index, "label": s.label, "score": s.score, "pair": pool[s.index] }))
        .collect();
    write_jsonl(&a.out, &rows)?;
    info!("{} of {} pool pairs selected", rows.len(), request.pool_size);
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs, seed: u64, seed_given: bool) -> Result<()> {
    let mut manifest = match (&a.manifest, a.tiny) {
        (Some(p), _) => Manifest::load(p)?,
        (None, true) => Manifest::tiny(Path::new("runs/tiny"))?,
        (None, false) => return Err(Error::Config("give --manifest or --tiny".into())),
    };
    if let Some(d) = a.output_dir {
        manifest.output_dir = d;
    }
    if seed_given {
        manifest.seed = seed;
    }
    let outcome = run_pipeline(&manifest, RunOptions { resume: a.resume, overwrite: a.overwrite })?;
    info!("stages run: {:?}; skipped: {:?}", outcome.executed, outcome.skipped);
    println!("{}", outcome.report.to_markdown());
    Ok(())
}

/// 0 success, 2 usage (clap), then one code per failure class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::InvalidInput(_) | Error::UnknownLabel { .. } | Error::Shape { .. } => 4,
        Error::Io { .. } => 5,
        Error::Json(_) | Error::Checkpoint(_) => 6,
        Error::Diverged { .. } | Error::NonFinite(_) => 7,
        Error::Stage { cause, .. } => exit_code(cause),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    let seed = cli.seed;
    let seed_given = std::env::args().any(|a| a == "--seed" || a.starts_with("--seed=")) || std::env::var_os("PERSONA_SEED").is_some();
    let result = match cli.command {
        Command::SynthData(a) => synth_data(a, seed),
        Command::Preprocess(a) => preprocess_cmd(a, seed),
        Command::CorpusStats(a) => a
            .labels
            .mapper()
            .and_then(|m| corpus_stats(&read_jsonl(&a.input)?, &m))
            .and_then(|s| print_json(&s)),
        Command::TrainClassifier(a) => train_classifier_cmd(a, seed),
        Command::ClassifyTraits(a) => classify_cmd(a),
        Command::Train(a) => train_cmd(a, seed),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval_cmd(a, seed),
        Command::BuildBiasedSet(a) => biased_cmd(a, seed),
        Command::RunPipeline(a) => pipeline_cmd(a, seed, seed_given),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
