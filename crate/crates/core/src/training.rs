//! Teacher-forced maximum-likelihood training.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::perplexity;
use crate::numerics::{Adam, GradBuffer, ParameterStore};
use crate::seq2seq::{PersonaModel, TrainPair, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    /// Updates between validation checks; 0 means once per epoch.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            max_epochs: 10,
            max_steps: None,
            patience: 3,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch 120 as in the full-size setting.
    pub fn full() -> Self {
        TrainConfig {
            batch_size: 120,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean token loss since the previous record.
    pub loss: f64,
    pub val_ppx: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub best_step: usize,
    pub best_val_ppx: Option<f64>,
    pub history: Vec<LogRecord>,
    pub stopped_early: bool,
}

/// Where checkpoints and the log go.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
}

impl OutputDir {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

struct Log {
    out: Option<BufWriter<File>>,
    history: Vec<LogRecord>,
}

impl Log {
    fn push(&mut self, rec: LogRecord, path: Option<&Path>) -> Result<()> {
        if let Some(w) = self.out.as_mut() {
            let line = serde_json::to_string(&rec)?;
            let io = |e| Error::io(path.unwrap_or(Path::new("train_log.jsonl")), e);
            writeln!(w, "{line}").map_err(io)?;
            w.flush().map_err(io)?;
        }
        self.history.push(rec);
        Ok(())
    }
}

/// Trains `model` in place. With validation pairs, the parameters that
/// reached the lowest validation perplexity are restored at the end (and
/// written to `best.ckpt`). On divergence the last finite parameters are
/// restored and saved before the error is returned.
pub fn train(
    model: &mut PersonaModel,
    train_pairs: &[TrainPair],
    valid_pairs: &[TrainPair],
    config: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::InvalidInput("no training pairs".into()));
    }
    let log_path = out.map(OutputDir::log);
    if let Some(o) = out {
        fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
    }
    let mut log = Log {
        out: match &log_path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        },
        history: Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let mut grads = GradBuffer::zeros_like(model.params());
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let batches_per_epoch = train_pairs.len().div_ceil(config.batch_size);
    let eval_every = if config.eval_every == 0 { batches_per_epoch } else { config.eval_every };

    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut stale = 0;
    let mut step = 0;
    let mut epoch = 0;
    let (mut loss_sum, mut loss_tokens) = (0.0, 0usize);
    let mut stopped_early = false;
    let budget_left = |step: usize| config.max_steps.is_none_or(|m| step < m);

    'outer: while epoch < config.max_epochs && budget_left(step) {
        epoch += 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if !budget_left(step) {
                break 'outer;
            }
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| &train_pairs[i]).collect();
            let (total_nll, tokens, g_out) = {
                let mut g = model.graph();
                let l = model.loss(&mut g, &batch)?;
                (l.total_nll, l.tokens, g.backward(l.mean)?)
            };
            step += 1;
            grads.fill_zero();
            grads.add(&g_out);
            if !total_nll.is_finite() || !grads.is_finite() {
                let detail = format!("non-finite loss or gradient (loss {total_nll})");
                return Err(diverged(model, out, step, detail));
            }
            grads.clip_global_norm(config.clip_norm);
            let before = model.params().clone();
            adam.update(model.params_mut(), &grads);
            if model.params().iter().any(|(_, _, m)| m.iter().any(|x| !x.is_finite())) {
                model.params_mut().load_from(&before)?;
                return Err(diverged(model, out, step, "non-finite parameters after update".into()));
            }
            loss_sum += total_nll;
            loss_tokens += tokens;

            if step % eval_every == 0 {
                let loss = loss_sum / loss_tokens.max(1) as f64;
                (loss_sum, loss_tokens) = (0.0, 0);
                let val_ppx = if valid_pairs.is_empty() { None } else { Some(perplexity(model, valid_pairs)?) };
                info!("step {step}: loss {loss:.4}, val ppx {val_ppx:?}");
                log.push(LogRecord { step, loss, val_ppx }, log_path.as_deref())?;
                if let Some(o) = out {
                    model.save(&o.last(), &o.vocab)?;
                }
                if let Some(v) = val_ppx {
                    if best.as_ref().is_none_or(|b| v < b.0) {
                        best = Some((v, step, model.params().clone()));
                        stale = 0;
                        if let Some(o) = out {
                            model.save(&o.best(), &o.vocab)?;
                        }
                    } else {
                        stale += 1;
                        if stale >= config.patience {
                            stopped_early = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    if loss_tokens > 0 {
        let loss = loss_sum / loss_tokens as f64;
        let val_ppx = if valid_pairs.is_empty() { None } else { Some(perplexity(model, valid_pairs)?) };
        log.push(LogRecord { step, loss, val_ppx }, log_path.as_deref())?;
        if let (Some(v), Some(o)) = (val_ppx, out) {
            model.save(&o.last(), &o.vocab)?;
            if best.as_ref().is_none_or(|b| v < b.0) {
                model.save(&o.best(), &o.vocab)?;
            }
        }
        if let Some(v) = val_ppx {
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, step, model.params().clone()));
            }
        }
    }
    let (best_val_ppx, best_step) = match &best {
        Some((v, s, params)) => {
            model.params_mut().load_from(params)?;
            (Some(*v), *s)
        }
        None => {
            if let Some(o) = out {
                model.save(&o.last(), &o.vocab)?;
                model.save(&o.best(), &o.vocab)?;
            }
            (None, step)
        }
    };
    Ok(TrainReport {
        steps: step,
        epochs: epoch,
        best_step,
        best_val_ppx,
        history: log.history,
        stopped_early,
    })
}

fn diverged(model: &PersonaModel, out: Option<&OutputDir>, step: usize, detail: String) -> Error {
    if let Some(o) = out {
        if let Err(e) = model.save(&o.last(), &o.vocab) {
            warn!("could not save the last finite checkpoint: {e}");
        }
    }
    Error::Diverged { step, detail }
}
