use std::path::Path;

use serde::{Deserialize, Serialize};

use super::attention::Attention;
use super::config::ModelConfig;
use super::gru::GruLayer;
use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::fusion::{fuse_average, fuse_concat, FusionScheme, TraitAttention, TraitEmbeddings, TraitValues};
use crate::numerics::{checkpoint, Graph, Init, Matrix, ParamId, ParameterStore, Var};
use crate::persona::{PersonaAttention, PersonaBias};

/// One tokenized training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainPair {
    pub post: Vec<usize>,
    /// Response tokens without BOS/EOS.
    pub response: Vec<usize>,
    pub traits: TraitValues,
}

/// Encoder output for a right-padded batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// One `[batch, hidden]` node per position.
    pub states: Vec<Var>,
    /// `[batch, positions]`, 1 for real tokens.
    pub valid: Matrix,
    pub lengths: Vec<usize>,
    /// Last forward state joined with the first backward state, top layer.
    pub summary: Var,
}

/// Per-sequence state shared by every decoding step.
#[derive(Debug, Clone)]
pub struct DecodeContext {
    pub encoded: Encoded,
    /// Projected encoder states for attention.
    pub keys: Vec<Var>,
    /// Trait embeddings in model key order.
    pub traits: Vec<Var>,
    /// Fused vector for the step-independent fusion schemes.
    pub persona: Option<Var>,
    /// `W_persona_out v_p` when it does not change between steps.
    pub persona_bias: Option<Var>,
}

impl DecodeContext {
    pub fn batch_size(&self) -> usize {
        self.encoded.lengths.len()
    }

    /// Row-indexed copy, used by beam search to replicate and reorder.
    pub fn select(&self, g: &mut Graph<'_>, rows: &[usize]) -> Result<DecodeContext> {
        let pick = |g: &mut Graph<'_>, v: Var| g.gather(v, rows);
        let mut valid = Matrix::zeros((rows.len(), self.encoded.valid.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            valid.row_mut(i).assign(&self.encoded.valid.row(r));
        }
        let encoded = Encoded {
            states: self.encoded.states.iter().map(|&v| pick(g, v)).collect::<Result<_>>()?,
            valid,
            lengths: rows.iter().map(|&r| self.encoded.lengths[r]).collect(),
            summary: pick(g, self.encoded.summary)?,
        };
        Ok(DecodeContext {
            encoded,
            keys: self.keys.iter().map(|&v| pick(g, v)).collect::<Result<_>>()?,
            traits: self.traits.iter().map(|&v| pick(g, v)).collect::<Result<_>>()?,
            persona: self.persona.map(|v| pick(g, v)).transpose()?,
            persona_bias: self.persona_bias.map(|v| pick(g, v)).transpose()?,
        })
    }
}

/// Everything one decoder step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// New state per decoder layer, bottom first.
    pub states: Vec<Var>,
    /// Pre-softmax scores `[batch, vocab]`.
    pub logits: Var,
    /// Attention over post positions `[batch, n]`.
    pub attention: Var,
    /// Trait attention `[batch, N]` under attention fusion.
    pub trait_weights: Option<Var>,
    /// PAB gate `[batch, 1]`.
    pub gate: Option<Var>,
}

/// Sum of token losses for a batch and the token count behind it.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    /// Mean negative log-likelihood per target token, `[1, 1]`.
    pub mean: Var,
    pub total_nll: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    embedding: ParamId,
    enc_fwd: Vec<GruLayer>,
    enc_bwd: Vec<GruLayer>,
    init: Vec<(ParamId, ParamId)>,
    decoder: Vec<GruLayer>,
    attention: Attention,
    w_out: ParamId,
    b_out: ParamId,
    traits: Option<TraitEmbeddings>,
    trait_attention: Option<TraitAttention>,
    paa: Option<PersonaAttention>,
    pab: Option<PersonaBias>,
}

/// Encoder-decoder with optional persona conditioning.
#[derive(Debug, Clone)]
pub struct PersonaModel {
    config: ModelConfig,
    params: ParameterStore,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    model: ModelConfig,
    vocab: Vec<String>,
}

impl PersonaModel {
    /// Fresh model with parameters drawn from `seed`. The backbone is
    /// registered before any persona parameters, so variants built from the
    /// same seed start from the same backbone weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParameterStore::new(seed);
        let c = &config;
        let (d, e, half) = (c.hidden_dim, c.embed_dim, c.hidden_dim / 2);
        let embedding = store.register("embedding", c.vocab_size, e, Init::Uniform)?;
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        for l in 0..c.encoder_layers {
            let input = if l == 0 { e } else { d };
            enc_fwd.push(GruLayer::register(&mut store, &format!("encoder.fwd.{l}"), input, half)?);
            enc_bwd.push(GruLayer::register(&mut store, &format!("encoder.bwd.{l}"), input, half)?);
        }
        let mut init = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..c.decoder_layers {
            init.push((
                store.register(&format!("decoder.init.{l}.w"), d, d, Init::Uniform)?,
                store.register(&format!("decoder.init.{l}.b"), 1, d, Init::Zeros)?,
            ));
            let input = if l == 0 { e + d } else { d };
            decoder.push(GruLayer::register(&mut store, &format!("decoder.gru.{l}"), input, d)?);
        }
        let attention = Attention::register(&mut store, d)?;
        let w_out = store.register("output.w", d, c.vocab_size, Init::Uniform)?;
        let b_out = store.register("output.b", 1, c.vocab_size, Init::Zeros)?;

        let (mut traits, mut trait_attention, mut paa, mut pab) = (None, None, None, None);
        if c.uses_traits() {
            traits = Some(TraitEmbeddings::register(&mut store, &c.schema, &c.traits, c.trait_width()?)?);
            if c.fusion == FusionScheme::Attention {
                trait_attention = Some(TraitAttention::register(&mut store, d, c.persona_dim)?);
            }
            if c.decoding.uses_paa() {
                paa = Some(PersonaAttention::register(&mut store, d, c.persona_dim)?);
            }
            if c.decoding.uses_pab() {
                pab = Some(PersonaBias::register(&mut store, d, c.persona_dim, c.vocab_size)?);
            }
        }
        let layout = Layout {
            embedding,
            enc_fwd,
            enc_bwd,
            init,
            decoder,
            attention,
            w_out,
            b_out,
            traits,
            trait_attention,
            paa,
            pab,
        };
        Ok(PersonaModel {
            config,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn trait_embeddings(&self) -> Option<&TraitEmbeddings> {
        self.layout.traits.as_ref()
    }

    pub fn persona_attention(&self) -> Option<&PersonaAttention> {
        self.layout.paa.as_ref()
    }

    pub fn persona_bias(&self) -> Option<&PersonaBias> {
        self.layout.pab.as_ref()
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }

    fn check_tokens(&self, what: &str, seq: &[usize]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "{what} token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the bidirectional encoder over right-padded posts.
    pub fn encode(&self, g: &mut Graph<'_>, posts: &[&[usize]]) -> Result<Encoded> {
        if posts.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        for p in posts {
            if p.is_empty() {
                return Err(Error::InvalidInput("empty post".into()));
            }
            if p.len() > self.config.max_post_len {
                return Err(Error::InvalidInput(format!(
                    "post of {} tokens exceeds the limit of {}",
                    p.len(),
                    self.config.max_post_len
                )));
            }
            self.check_tokens("post", p)?;
        }
        let batch = posts.len();
        let lengths: Vec<usize> = posts.iter().map(|p| p.len()).collect();
        let n = *lengths.iter().max().expect("nonempty");
        let half = self.config.hidden_dim / 2;
        let mut valid = Matrix::zeros((batch, n));
        for (b, &len) in lengths.iter().enumerate() {
            valid.row_mut(b).slice_mut(ndarray::s![..len]).fill(1.0);
        }
        let masks: Vec<Vec<bool>> = (0..n).map(|t| lengths.iter().map(|&len| t < len).collect()).collect();

        let table = g.param(self.layout.embedding);
        let mut inputs = (0..n)
            .map(|t| {
                let ids: Vec<usize> = posts.iter().map(|p| p.get(t).copied().unwrap_or(PAD)).collect();
                g.gather(table, &ids)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut summary = None;
        for (fwd, bwd) in self.layout.enc_fwd.iter().zip(&self.layout.enc_bwd) {
            let zero = g.constant(Matrix::zeros((batch, half)));
            let mut forward = Vec::with_capacity(n);
            let mut h = zero;
            for t in 0..n {
                let next = fwd.step(g, inputs[t], h)?;
                h = g.select_rows(&masks[t], next, h)?;
                forward.push(h);
            }
            let last_forward = h;
            let mut backward = vec![zero; n];
            let mut h = zero;
            for t in (0..n).rev() {
                let next = bwd.step(g, inputs[t], h)?;
                h = g.select_rows(&masks[t], next, h)?;
                backward[t] = h;
            }
            inputs = forward
                .iter()
                .zip(&backward)
                .map(|(&f, &b)| g.concat_cols(&[f, b]))
                .collect::<Result<_>>()?;
            summary = Some(g.concat_cols(&[last_forward, backward[0]])?);
        }
        Ok(Encoded {
            states: inputs,
            valid,
            lengths,
            summary: summary.expect("at least one encoder layer"),
        })
    }

    /// Encodes the posts and resolves everything the decoder reuses.
    pub fn prepare(&self, g: &mut Graph<'_>, posts: &[&[usize]], traits: &[TraitValues]) -> Result<DecodeContext> {
        if traits.len() != posts.len() {
            return Err(Error::InvalidInput(format!(
                "{} posts but {} trait sets",
                posts.len(),
                traits.len()
            )));
        }
        let encoded = self.encode(g, posts)?;
        let keys = self.layout.attention.keys(g, &encoded.states)?;
        let mut ctx = DecodeContext {
            encoded,
            keys,
            traits: Vec::new(),
            persona: None,
            persona_bias: None,
        };
        if let Some(emb) = &self.layout.traits {
            ctx.traits = emb.embed_all(g, &self.config.schema, traits)?;
            ctx.persona = match self.config.fusion {
                FusionScheme::Attention => None,
                FusionScheme::Average => Some(fuse_average(g, &ctx.traits)?),
                FusionScheme::Concat => Some(fuse_concat(g, &ctx.traits)?),
            };
            if let (Some(pab), Some(vp)) = (&self.layout.pab, ctx.persona) {
                ctx.persona_bias = Some(pab.bias(g, vp)?);
            }
        }
        Ok(ctx)
    }

    /// Decoder state before the first step, one entry per layer.
    pub fn initial_states(&self, g: &mut Graph<'_>, ctx: &DecodeContext) -> Result<Vec<Var>> {
        self.layout
            .init
            .iter()
            .map(|&(w, b)| {
                let (w, b) = (g.param(w), g.param(b));
                let pre = g.matmul(ctx.encoded.summary, w)?;
                let pre = g.add_row(pre, b)?;
                Ok(g.tanh(pre))
            })
            .collect()
    }

    /// One decoding step from `states` (the previous per-layer states) after
    /// emitting `prev_tokens`.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        ctx: &DecodeContext,
        states: &[Var],
        prev_tokens: &[usize],
    ) -> Result<StepOutput> {
        if states.len() != self.layout.decoder.len() {
            return Err(Error::shape(
                "decoder step",
                format!("{} states for {} layers", states.len(), self.layout.decoder.len()),
            ));
        }
        if prev_tokens.len() != ctx.batch_size() {
            return Err(Error::shape(
                "decoder step",
                format!("{} tokens for batch of {}", prev_tokens.len(), ctx.batch_size()),
            ));
        }
        self.check_tokens("previous", prev_tokens)?;
        let s_prev = *states.last().expect("validated layer count");

        let (persona, trait_weights) = match (&self.layout.trait_attention, ctx.persona) {
            (Some(ta), _) => {
                let (vp, w) = ta.fuse(g, s_prev, &ctx.traits)?;
                (Some(vp), Some(w))
            }
            (None, vp) => (vp, None),
        };

        let att = &self.layout.attention;
        let scores = match (&self.layout.paa, persona) {
            (Some(paa), Some(vp)) => paa.scores(g, att, s_prev, &ctx.keys, vp)?,
            _ => {
                let q = att.query(g, s_prev)?;
                att.scores(g, q, &ctx.keys)?
            }
        };
        let (context, attention) = att.attend(g, scores, &ctx.encoded.valid, &ctx.encoded.states)?;

        let table = g.param(self.layout.embedding);
        let emb = g.gather(table, prev_tokens)?;
        let mut x = g.concat_cols(&[emb, context])?;
        let mut new_states = Vec::with_capacity(states.len());
        for (layer, &h) in self.layout.decoder.iter().zip(states) {
            let s = layer.step(g, x, h)?;
            new_states.push(s);
            x = s;
        }
        let s_t = x;

        let w_out = g.param(self.layout.w_out);
        let b_out = g.param(self.layout.b_out);
        let state_logits = g.matmul(s_t, w_out)?;
        let (logits, gate) = match (&self.layout.pab, persona) {
            (Some(pab), Some(vp)) => {
                let bias = match ctx.persona_bias {
                    Some(b) => b,
                    None => pab.bias(g, vp)?,
                };
                let gate = pab.gate(g, s_t)?;
                (pab.blend(g, gate, state_logits, bias, b_out)?, Some(gate))
            }
            _ => (g.add_row(state_logits, b_out)?, None),
        };
        Ok(StepOutput {
            states: new_states,
            logits,
            attention,
            trait_weights,
            gate,
        })
    }

    /// Teacher-forced loss over a batch. Each response is scored as
    /// `response + EOS` given `BOS + response` as decoder input.
    pub fn loss(&self, g: &mut Graph<'_>, batch: &[&TrainPair]) -> Result<BatchLoss> {
        let posts: Vec<&[usize]> = batch.iter().map(|p| p.post.as_slice()).collect();
        let traits: Vec<TraitValues> = batch.iter().map(|p| p.traits).collect();
        for p in batch {
            self.check_tokens("response", &p.response)?;
        }
        let ctx = self.prepare(g, &posts, &traits)?;
        let mut states = self.initial_states(g, &ctx)?;
        let steps = batch.iter().map(|p| p.response.len() + 1).max().unwrap_or(0);
        let mut total = None;
        let mut tokens = 0usize;
        for t in 0..steps {
            let prev: Vec<usize> = batch
                .iter()
                .map(|p| match t {
                    0 => BOS,
                    _ => p.response.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            let mut targets = Vec::with_capacity(batch.len());
            let mut weights = Vec::with_capacity(batch.len());
            for p in batch {
                let (target, w) = match t.cmp(&p.response.len()) {
                    std::cmp::Ordering::Less => (p.response[t], 1.0),
                    std::cmp::Ordering::Equal => (EOS, 1.0),
                    std::cmp::Ordering::Greater => (PAD, 0.0),
                };
                tokens += (w > 0.0) as usize;
                targets.push(target);
                weights.push(w);
            }
            let out = self.step(g, &ctx, &states, &prev)?;
            states = out.states;
            let nll = g.cross_entropy(out.logits, &targets, &weights)?;
            total = Some(match total {
                None => nll,
                Some(acc) => g.add(acc, nll)?,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let total_nll = g.scalar(total);
        let mean = g.scale(total, 1.0 / tokens as f64);
        Ok(BatchLoss {
            mean,
            total_nll,
            tokens,
        })
    }

    /// Summed negative log-likelihood and token count, without gradients
    /// being needed.
    pub fn nll(&self, batch: &[&TrainPair]) -> Result<(f64, usize)> {
        let mut g = self.graph();
        let l = self.loss(&mut g, batch)?;
        Ok((l.total_nll, l.tokens))
    }

    /// Encoder states of a single post as an `[n, hidden]` matrix.
    pub fn encode_post(&self, post: &[usize]) -> Result<Matrix> {
        let mut g = self.graph();
        let enc = self.encode(&mut g, &[post])?;
        let rows = g.concat_rows(&enc.states)?;
        Ok(g.value(rows).clone())
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary of {} tokens for a model of {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let saved = SavedConfig {
            model: self.config.clone(),
            vocab: vocab.ordinary_tokens().to_vec(),
        };
        checkpoint::write(path, &serde_json::to_value(saved)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let ck = checkpoint::read(path)?;
        let saved: SavedConfig = serde_json::from_value(ck.config)
            .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
        let vocab = Vocabulary::from_tokens(saved.vocab)?;
        let mut model = PersonaModel::new(saved.model, ck.params.seed())?;
        if model.params.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model expects {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&ck.params)?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Checkpoint("vocabulary size disagrees with config".into()));
        }
        Ok((model, vocab))
    }
}
