//! Persona-aware decoding: the persona vector either shifts the attention
//! scores over the post (PAA) or adds a gated bias to the output logits (PAB).

use crate::error::Result;
use crate::numerics::{Graph, Init, ParamId, ParameterStore, Var};
use crate::seq2seq::attention::Attention;

/// Persona term of the attention scores.
#[derive(Debug, Clone)]
pub struct PersonaAttention {
    /// `[persona_dim, hidden_dim]`
    pub w_persona: ParamId,
}

impl PersonaAttention {
    pub fn register(store: &mut ParameterStore, hidden_dim: usize, persona_dim: usize) -> Result<Self> {
        Ok(PersonaAttention {
            w_persona: store.register("attention.w_persona", persona_dim, hidden_dim, Init::Uniform)?,
        })
    }

    /// `e_i = v . tanh(W_state s_prev + W_enc h_i + W_persona v_p)`, `[batch, n]`.
    ///
    /// `keys` are the projected encoder outputs from [`Attention::keys`]. The
    /// result feeds the same masked softmax as plain attention.
    pub fn scores(
        &self,
        g: &mut Graph<'_>,
        attention: &Attention,
        s_prev: Var,
        keys: &[Var],
        persona: Var,
    ) -> Result<Var> {
        let query = attention.query(g, s_prev)?;
        let w = g.param(self.w_persona);
        let shift = g.matmul(persona, w)?;
        let query = g.add(query, shift)?;
        attention.scores(g, query, keys)
    }
}

/// Gated persona bias on the output layer.
#[derive(Debug, Clone)]
pub struct PersonaBias {
    /// `[persona_dim, vocab]`
    pub w_persona_out: ParamId,
    /// `[hidden_dim, 1]`
    pub v_gate: ParamId,
}

impl PersonaBias {
    pub fn register(
        store: &mut ParameterStore,
        hidden_dim: usize,
        persona_dim: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        Ok(PersonaBias {
            w_persona_out: store.register("output.w_persona", persona_dim, vocab_size, Init::Uniform)?,
            v_gate: store.register("output.v_gate", hidden_dim, 1, Init::Uniform)?,
        })
    }

    /// `a_t = sigmoid(v_gate . s_t)`, `[batch, 1]`.
    pub fn gate(&self, g: &mut Graph<'_>, s_t: Var) -> Result<Var> {
        let v = g.param(self.v_gate);
        let pre = g.matmul(s_t, v)?;
        Ok(g.sigmoid(pre))
    }

    /// `W_persona_out v_p`, `[batch, vocab]`. Constant across steps unless the
    /// persona vector itself changes per step.
    pub fn bias(&self, g: &mut Graph<'_>, persona: Var) -> Result<Var> {
        let w = g.param(self.w_persona_out);
        g.matmul(persona, w)
    }

    /// `a_t * state_logits + (1 - a_t) * persona_bias + b_out`, the
    /// pre-softmax blend. `state_logits` is `W_out s_t`.
    pub fn blend(
        &self,
        g: &mut Graph<'_>,
        gate: Var,
        state_logits: Var,
        persona_bias: Var,
        b_out: Var,
    ) -> Result<Var> {
        let kept = g.mul_col(state_logits, gate)?;
        let rest = g.one_minus(gate);
        let injected = g.mul_col(persona_bias, rest)?;
        let sum = g.add(kept, injected)?;
        g.add_row(sum, b_out)
    }
}
