use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::model::PersonaModel;
use super::vocab::{BOS, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::fusion::TraitValues;
use crate::numerics::{Graph, Matrix, Var};

/// Decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Greedy
    }
}

/// A decoded response and per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generated {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// Trait attention weights per step (attention fusion only).
    pub trait_weights: Vec<Vec<f64>>,
    /// PAB gate per step.
    pub gates: Vec<f64>,
}

/// Log-probabilities with tokens that must never be emitted pushed to -inf.
fn step_scores(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
        for banned in [PAD, UNK, BOS] {
            row[banned] = f64::NEG_INFINITY;
        }
    }
    out
}

/// First index of the maximum.
fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_of(g: &Graph<'_>, v: Option<Var>, r: usize) -> Option<Vec<f64>> {
    v.map(|v| g.value(v).row(r).to_vec())
}

impl PersonaModel {
    /// Decodes one response per post. Output length never exceeds the
    /// configured maximum decode length.
    pub fn generate(&self, posts: &[&[usize]], traits: &[TraitValues], strategy: Strategy) -> Result<Vec<Generated>> {
        match strategy {
            Strategy::Greedy => self.greedy(posts, traits),
            Strategy::Beam(0) => Err(Error::InvalidInput("beam width must be at least 1".into())),
            Strategy::Beam(k) => posts
                .iter()
                .zip(traits)
                .map(|(p, t)| self.beam(p, *t, k))
                .collect(),
        }
    }

    pub fn generate_one(&self, post: &[usize], traits: TraitValues, strategy: Strategy) -> Result<Generated> {
        Ok(self.generate(&[post], &[traits], strategy)?.remove(0))
    }

    fn greedy(&self, posts: &[&[usize]], traits: &[TraitValues]) -> Result<Vec<Generated>> {
        let mut g = self.graph();
        let ctx = self.prepare(&mut g, posts, traits)?;
        let mut states = self.initial_states(&mut g, &ctx)?;
        let mut out: Vec<Generated> = posts
            .iter()
            .map(|_| Generated {
                tokens: Vec::new(),
                log_prob: 0.0,
                trait_weights: Vec::new(),
                gates: Vec::new(),
            })
            .collect();
        let mut done = vec![false; posts.len()];
        let mut prev = vec![BOS; posts.len()];
        for _ in 0..self.config().max_decode_len {
            let step = self.step(&mut g, &ctx, &states, &prev)?;
            let scores = step_scores(g.value(step.logits));
            for (r, o) in out.iter_mut().enumerate() {
                if done[r] {
                    prev[r] = EOS;
                    continue;
                }
                let tok = argmax(scores.row(r));
                o.log_prob += scores[[r, tok]];
                o.trait_weights.extend(row_of(&g, step.trait_weights, r));
                o.gates.extend(row_of(&g, step.gate, r).map(|v| v[0]));
                if tok == EOS {
                    done[r] = true;
                } else {
                    o.tokens.push(tok);
                }
                prev[r] = tok;
            }
            states = step.states;
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    fn beam(&self, post: &[usize], traits: TraitValues, width: usize) -> Result<Generated> {
        #[derive(Clone)]
        struct Hyp {
            out: Generated,
            finished: bool,
            last: usize,
        }
        let mut g = self.graph();
        let base = self.prepare(&mut g, &[post], &[traits])?;
        let mut ctx = base.clone();
        let mut states = self.initial_states(&mut g, &ctx)?;
        let mut hyps = vec![Hyp {
            out: Generated {
                tokens: Vec::new(),
                log_prob: 0.0,
                trait_weights: Vec::new(),
                gates: Vec::new(),
            },
            finished: false,
            last: BOS,
        }];
        for _ in 0..self.config().max_decode_len {
            if hyps.iter().all(|h| h.finished) {
                break;
            }
            let prev: Vec<usize> = hyps.iter().map(|h| h.last).collect();
            let step = self.step(&mut g, &ctx, &states, &prev)?;
            let scores = step_scores(g.value(step.logits));

            // (total, parent, step score, token); finished hypotheses carry
            // over unchanged with token = None.
            let mut cands: Vec<(f64, usize, f64, Option<usize>)> = Vec::new();
            for (b, h) in hyps.iter().enumerate() {
                if h.finished {
                    cands.push((h.out.log_prob, b, 0.0, None));
                    continue;
                }
                for (tok, &s) in scores.row(b).iter().enumerate() {
                    if s.is_finite() {
                        cands.push((h.out.log_prob + s, b, s, Some(tok)));
                    }
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal))
                    .then(a.3.cmp(&b.3))
            });
            cands.truncate(width);

            let parents: Vec<usize> = cands.iter().map(|c| c.1).collect();
            let mut next = Vec::with_capacity(cands.len());
            for &(total, b, _, tok) in &cands {
                let mut h = hyps[b].clone();
                if let Some(tok) = tok {
                    h.out.log_prob = total;
                    h.out.trait_weights.extend(row_of(&g, step.trait_weights, b));
                    h.out.gates.extend(row_of(&g, step.gate, b).map(|v| v[0]));
                    if tok == EOS {
                        h.finished = true;
                    } else {
                        h.out.tokens.push(tok);
                    }
                    h.last = tok;
                }
                next.push(h);
            }
            hyps = next;
            states = step
                .states
                .iter()
                .map(|&s| g.gather(s, &parents))
                .collect::<Result<_>>()?;
            let rows = vec![0; parents.len()];
            if rows.len() != ctx.batch_size() {
                ctx = base.select(&mut g, &rows)?;
            }
        }
        // Best finished hypothesis, else best overall; `hyps` is already
        // ranked so the first match wins ties.
        let best = hyps.iter().find(|h| h.finished).unwrap_or(&hyps[0]);
        Ok(best.out.clone())
    }
}
