use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::TraitKey;
use crate::numerics::{checkpoint, softmax_rows, Graph, Init, Matrix, ParamId, ParameterStore, Var};
use crate::seq2seq::vocab::{Vocabulary, PAD, UNK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Mean word vector and one hidden layer.
    Boe,
    Cnn,
    /// LSTM with its states averaged over time.
    Lstm,
    /// LSTM states fed to a convolution layer.
    Rcnn,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Boe => "boe",
            Architecture::Cnn => "cnn",
            Architecture::Lstm => "lstm",
            Architecture::Rcnn => "rcnn",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "boe" | "bag-of-embeddings" => Ok(Architecture::Boe),
            "cnn" | "convolutional" => Ok(Architecture::Cnn),
            "lstm" | "rnn" | "recurrent" => Ok(Architecture::Lstm),
            "rcnn" | "recurrent-convolutional" => Ok(Architecture::Rcnn),
            other => Err(Error::InvalidInput(format!("unknown classifier architecture `{other}`"))),
        }
    }
}

/// Dropout given either as the probability of keeping or of dropping a unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dropout {
    Keep(f64),
    Drop(f64),
}

impl Dropout {
    pub fn keep_prob(self) -> f64 {
        match self {
            Dropout::Keep(p) => p,
            Dropout::Drop(p) => 1.0 - p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub arch: Architecture,
    pub embed_dim: usize,
    /// Hidden layer (BoE) or LSTM width.
    pub hidden_dim: usize,
    pub filter_sizes: Vec<usize>,
    /// Feature maps per filter size.
    pub feature_maps: usize,
    pub dropout: Dropout,
    pub max_vocab: usize,
    /// Inputs are truncated to this many tokens.
    pub max_tokens: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            arch: Architecture::Boe,
            embed_dim: 100,
            hidden_dim: 265,
            filter_sizes: vec![2, 3, 4],
            feature_maps: 128,
            dropout: Dropout::Keep(0.8),
            max_vocab: 20_000,
            max_tokens: 400,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let keep = self.dropout.keep_prob();
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!("keep probability {keep} outside (0, 1]")));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_tokens == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if matches!(self.arch, Architecture::Cnn | Architecture::Rcnn)
            && (self.filter_sizes.is_empty() || self.filter_sizes.contains(&0) || self.feature_maps == 0)
        {
            return Err(Error::Config("convolution needs positive filter sizes and feature maps".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Lstm {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Lstm {
    fn register(store: &mut ParameterStore, input: usize, hidden: usize) -> Result<Self> {
        Ok(Lstm {
            w_x: store.register("lstm.w_x", input, 4 * hidden, Init::Uniform)?,
            w_h: store.register("lstm.w_h", hidden, 4 * hidden, Init::Uniform)?,
            b: store.register("lstm.b", 1, 4 * hidden, Init::Zeros)?,
            hidden,
        })
    }

    /// Gate order `[input | forget | cell | output]`.
    fn step(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let d = self.hidden;
        let (w_x, w_h, b) = (g.param(self.w_x), g.param(self.w_h), g.param(self.b));
        let gx = g.matmul(x, w_x)?;
        let gh = g.matmul(h, w_h)?;
        let pre = g.add(gx, gh)?;
        let pre = g.add_row(pre, b)?;
        let ifo_in = g.slice_cols(pre, 0, 2 * d)?;
        let ifo = g.sigmoid(ifo_in);
        let i = g.slice_cols(ifo, 0, d)?;
        let f = g.slice_cols(ifo, d, 2 * d)?;
        let cell_in = g.slice_cols(pre, 2 * d, 3 * d)?;
        let cell = g.tanh(cell_in);
        let o_in = g.slice_cols(pre, 3 * d, 4 * d)?;
        let o = g.sigmoid(o_in);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cell)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    hidden: Option<(ParamId, ParamId)>,
    lstm: Option<Lstm>,
    convs: Vec<(usize, ParamId, ParamId)>,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Serialize, Deserialize)]
struct SavedClassifier {
    key: TraitKey,
    labels: Vec<String>,
    config: ClassifierConfig,
    vocab: Vec<String>,
}

/// Predicts one trait's label from a token sequence.
#[derive(Debug, Clone)]
pub struct TraitClassifier {
    key: TraitKey,
    labels: Vec<String>,
    config: ClassifierConfig,
    vocab: Vocabulary,
    params: ParameterStore,
    layout: Layout,
}

/// Index of the first maximum, and that maximum.
pub fn argmax_first(row: ndarray::ArrayView1<f64>) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    (best, row[best])
}

impl TraitClassifier {
    pub fn new(
        key: TraitKey,
        labels: Vec<String>,
        config: ClassifierConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if labels.len() < 2 {
            return Err(Error::Config("a classifier needs at least two labels".into()));
        }
        let k = labels.len();
        let mut store = ParameterStore::new(seed);
        let e = config.embed_dim;
        let embedding = store.register("embedding", vocab.len(), e, Init::Uniform)?;
        let (mut hidden, mut lstm, mut convs) = (None, None, Vec::new());
        let mut conv_input = e;
        let features = match config.arch {
            Architecture::Boe => {
                hidden = Some((
                    store.register("hidden.w", e, config.hidden_dim, Init::Uniform)?,
                    store.register("hidden.b", 1, config.hidden_dim, Init::Zeros)?,
                ));
                config.hidden_dim
            }
            Architecture::Lstm => {
                lstm = Some(Lstm::register(&mut store, e, config.hidden_dim)?);
                config.hidden_dim
            }
            Architecture::Cnn | Architecture::Rcnn => {
                if config.arch == Architecture::Rcnn {
                    lstm = Some(Lstm::register(&mut store, e, config.hidden_dim)?);
                    conv_input = config.hidden_dim;
                }
                for &w in &config.filter_sizes {
                    convs.push((
                        w,
                        store.register(&format!("conv{w}.w"), w * conv_input, config.feature_maps, Init::Uniform)?,
                        store.register(&format!("conv{w}.b"), 1, config.feature_maps, Init::Zeros)?,
                    ));
                }
                config.filter_sizes.len() * config.feature_maps
            }
        };
        let w_out = store.register("output.w", features, k, Init::Uniform)?;
        let b_out = store.register("output.b", 1, k, Init::Zeros)?;
        Ok(TraitClassifier {
            key,
            labels,
            config,
            vocab,
            params: store,
            layout: Layout {
                embedding,
                hidden,
                lstm,
                convs,
                w_out,
                b_out,
            },
        })
    }

    pub fn key(&self) -> TraitKey {
        self.key
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    /// Token indices, truncated, never empty.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids = self.vocab.encode(&tokens[..tokens.len().min(self.config.max_tokens)]);
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }

    fn dropout(&self, g: &mut Graph<'_>, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let keep = self.config.dropout.keep_prob();
        match rng {
            Some(rng) if keep < 1.0 => {
                let (r, c) = g.dims(x);
                let mask = Matrix::from_shape_simple_fn((r, c), || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Max over valid windows of every filter size, `[batch, filters * maps]`.
    fn convolve(&self, g: &mut Graph<'_>, steps: &[Var], lengths: &[usize]) -> Result<Var> {
        let batch = lengths.len();
        let mut pooled = Vec::new();
        for &(w, wid, bid) in &self.layout.convs {
            let (wm, bm) = (g.param(wid), g.param(bid));
            let mut best: Option<Var> = None;
            for t in 0..=steps.len() - w {
                let window = g.concat_cols(&steps[t..t + w])?;
                let pre = g.matmul(window, wm)?;
                let pre = g.add_row(pre, bm)?;
                let act = g.relu(pre);
                // windows past a sequence's end only cover padding; a
                // sequence shorter than the filter keeps its first window
                let valid: Vec<bool> = lengths.iter().map(|&len| t + w <= len.max(w)).collect();
                let act = if valid.iter().all(|&v| v) {
                    act
                } else {
                    let mut mask = Matrix::zeros((batch, self.config.feature_maps));
                    for (r, &v) in valid.iter().enumerate() {
                        if v {
                            mask.row_mut(r).fill(1.0);
                        }
                    }
                    g.mul_const(act, mask)?
                };
                best = Some(match best {
                    None => act,
                    Some(b) => g.maximum(b, act)?,
                });
            }
            pooled.push(best.expect("at least one window"));
        }
        g.concat_cols(&pooled)
    }

    /// LSTM states per position; states stop updating past each row's end.
    fn run_lstm(&self, g: &mut Graph<'_>, lstm: &Lstm, xs: &[Var], lengths: &[usize]) -> Result<Vec<Var>> {
        let zero = g.constant(Matrix::zeros((lengths.len(), lstm.hidden)));
        let (mut h, mut c) = (zero, zero);
        let mut out = Vec::with_capacity(xs.len());
        for (t, &x) in xs.iter().enumerate() {
            let (nh, nc) = lstm.step(g, x, h, c)?;
            let live: Vec<bool> = lengths.iter().map(|&len| t < len).collect();
            h = g.select_rows(&live, nh, h)?;
            c = g.select_rows(&live, nc, c)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Unnormalized scores `[batch, labels]`. Dropout is applied to the
    /// penultimate features when `rng` is given.
    pub fn logits(&self, g: &mut Graph<'_>, inputs: &[Vec<usize>], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if inputs.is_empty() || inputs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("classifier inputs must be nonempty".into()));
        }
        let table = g.param(self.layout.embedding);
        let lengths: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let features = match self.config.arch {
            Architecture::Boe => {
                let (w, b) = self.layout.hidden.expect("boe layout");
                let mean = g.gather_mean(table, inputs)?;
                let (w, b) = (g.param(w), g.param(b));
                let h = g.matmul(mean, w)?;
                let h = g.add_row(h, b)?;
                g.relu(h)
            }
            _ => {
                let min_len = self.layout.convs.iter().map(|c| c.0).max().unwrap_or(1);
                let steps = (*lengths.iter().max().expect("nonempty")).max(min_len);
                let xs = (0..steps)
                    .map(|t| {
                        let ids: Vec<usize> = inputs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
                        g.gather(table, &ids)
                    })
                    .collect::<Result<Vec<_>>>()?;
                match (&self.layout.lstm, self.config.arch) {
                    (Some(lstm), Architecture::Lstm) => {
                        let states = self.run_lstm(g, lstm, &xs, &lengths)?;
                        let mut wts = Matrix::zeros((inputs.len(), steps));
                        for (r, &len) in lengths.iter().enumerate() {
                            wts.row_mut(r).slice_mut(ndarray::s![..len]).fill(1.0 / len as f64);
                        }
                        let wts = g.constant(wts);
                        g.weighted_sum(wts, &states)?
                    }
                    (Some(lstm), _) => {
                        let states = self.run_lstm(g, lstm, &xs, &lengths)?;
                        self.convolve(g, &states, &lengths)?
                    }
                    (None, _) => self.convolve(g, &xs, &lengths)?,
                }
            }
        };
        let features = self.dropout(g, features, rng)?;
        let (w, b) = (g.param(self.layout.w_out), g.param(self.layout.b_out));
        let out = g.matmul(features, w)?;
        g.add_row(out, b)
    }

    /// Label distributions for token sequences, one row each.
    pub fn predict_proba<S: AsRef<str>>(&self, inputs: &[Vec<S>]) -> Result<Matrix> {
        let mut out = Matrix::zeros((inputs.len(), self.num_labels()));
        for (chunk_i, chunk) in inputs.chunks(256).enumerate() {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|t| self.encode(t)).collect();
            let mut g = Graph::with_params(&self.params);
            let logits = self.logits(&mut g, &ids, None)?;
            let probs = softmax_rows(g.value(logits), None);
            out.slice_mut(ndarray::s![chunk_i * 256..chunk_i * 256 + chunk.len(), ..])
                .assign(&probs);
        }
        Ok(out)
    }

    /// `(label, confidence)`: the argmax (lowest index on ties) and its
    /// probability.
    pub fn classify<S: AsRef<str>>(&self, tokens: &[S]) -> Result<(usize, f64)> {
        let owned: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let p = self.predict_proba(&[owned])?;
        Ok(argmax_first(p.row(0)))
    }

    pub fn classify_many<S: AsRef<str>>(&self, inputs: &[Vec<S>]) -> Result<Vec<(usize, f64)>> {
        let p = self.predict_proba(inputs)?;
        Ok(p.axis_iter(Axis(0)).map(argmax_first).collect())
    }

    /// Per-utterance cache that scores any concatenation of cached
    /// utterances without re-reading their tokens. Bag-of-embeddings only.
    pub fn utterance_scorer<S: AsRef<str>>(&self, utterances: &[Vec<S>]) -> Result<UtteranceScorer> {
        let (w, b) = self
            .layout
            .hidden
            .ok_or_else(|| Error::InvalidInput(format!("no utterance cache for {} classifiers", self.config.arch)))?;
        let table = self.params.get(self.layout.embedding);
        let w = self.params.get(w);
        let mut sums = Matrix::zeros((utterances.len(), self.config.embed_dim));
        let mut counts = Vec::with_capacity(utterances.len());
        for (i, u) in utterances.iter().enumerate() {
            let ids = self.vocab.encode(u);
            let mut row = sums.row_mut(i);
            for &id in &ids {
                row += &table.row(id);
            }
            counts.push(ids.len() as f64);
        }
        Ok(UtteranceScorer {
            projected: sums.dot(w),
            counts,
            hidden_bias: self.params.get(b).clone(),
            w_out: self.params.get(self.layout.w_out).clone(),
            b_out: self.params.get(self.layout.b_out).clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let saved = SavedClassifier {
            key: self.key,
            labels: self.labels.clone(),
            config: self.config.clone(),
            vocab: self.vocab.ordinary_tokens().to_vec(),
        };
        checkpoint::write(path, &serde_json::to_value(saved)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path)?;
        let saved: SavedClassifier = serde_json::from_value(ck.config)
            .map_err(|e| Error::Checkpoint(format!("bad classifier config: {e}")))?;
        let vocab = Vocabulary::from_tokens(saved.vocab)?;
        let mut c = TraitClassifier::new(saved.key, saved.labels, saved.config, vocab, ck.params.seed())?;
        c.params.load_from(&ck.params)?;
        Ok(c)
    }
}

/// Cached projected embedding sums of a fixed set of utterances.
#[derive(Debug, Clone)]
pub struct UtteranceScorer {
    /// Per utterance, embedding sum times the hidden weights.
    projected: Matrix,
    counts: Vec<f64>,
    hidden_bias: Matrix,
    w_out: Matrix,
    b_out: Matrix,
}

impl UtteranceScorer {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Label distributions for inputs made of the listed cached utterances.
    pub fn predict_proba(&self, inputs: &[Vec<usize>]) -> Result<Matrix> {
        let h = self.projected.ncols();
        let mut pre = Matrix::zeros((inputs.len(), h));
        for (r, members) in inputs.iter().enumerate() {
            let mut row = pre.row_mut(r);
            let mut total = 0.0;
            for &u in members {
                if u >= self.counts.len() {
                    return Err(Error::InvalidInput(format!("utterance {u} is not cached")));
                }
                row += &self.projected.row(u);
                total += self.counts[u];
            }
            if total == 0.0 {
                return Err(Error::InvalidInput("input without tokens".into()));
            }
            row /= total;
            row += &self.hidden_bias.row(0);
            row.mapv_inplace(|x| x.max(0.0));
        }
        let logits = pre.dot(&self.w_out) + &self.b_out;
        Ok(softmax_rows(&logits, None))
    }
}
