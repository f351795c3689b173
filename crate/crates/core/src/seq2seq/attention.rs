use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, Matrix, ParamId, ParameterStore, Var};

/// Additive scores `e_i = tanh(query + keys[i]) v`, returned as `[batch, n]`.
///
/// `query` and every key are already projected (`[batch, d]`); `v` is `[d, 1]`.
pub fn additive_scores(g: &mut Graph<'_>, query: Var, keys: &[Var], v: Var) -> Result<Var> {
    if keys.is_empty() {
        return Err(Error::InvalidInput("attention over zero positions".into()));
    }
    let scores = keys
        .iter()
        .map(|&k| {
            let pre = g.add(query, k)?;
            let act = g.tanh(pre);
            g.matmul(act, v)
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&scores)
}

/// Additive attention of the decoder state over encoder outputs.
#[derive(Debug, Clone)]
pub struct Attention {
    /// Applied to the previous decoder state.
    pub w_state: ParamId,
    /// Applied to each encoder output.
    pub w_enc: ParamId,
    pub v: ParamId,
}

impl Attention {
    pub fn register(store: &mut ParameterStore, hidden_dim: usize) -> Result<Self> {
        Ok(Attention {
            w_state: store.register("attention.w_state", hidden_dim, hidden_dim, Init::Uniform)?,
            w_enc: store.register("attention.w_enc", hidden_dim, hidden_dim, Init::Uniform)?,
            v: store.register("attention.v", hidden_dim, 1, Init::Uniform)?,
        })
    }

    /// Projects encoder outputs once per sequence; the result is reused at
    /// every decoding step.
    pub fn keys(&self, g: &mut Graph<'_>, enc_states: &[Var]) -> Result<Vec<Var>> {
        let w = g.param(self.w_enc);
        enc_states.iter().map(|&h| g.matmul(h, w)).collect()
    }

    pub fn query(&self, g: &mut Graph<'_>, s_prev: Var) -> Result<Var> {
        let w = g.param(self.w_state);
        g.matmul(s_prev, w)
    }

    pub fn scores(&self, g: &mut Graph<'_>, query: Var, keys: &[Var]) -> Result<Var> {
        let v = g.param(self.v);
        additive_scores(g, query, keys, v)
    }

    /// Normalizes scores over valid positions and mixes the encoder outputs.
    /// Returns `(context [batch, d], weights [batch, n])`.
    pub fn attend(
        &self,
        g: &mut Graph<'_>,
        scores: Var,
        valid: &Matrix,
        enc_states: &[Var],
    ) -> Result<(Var, Var)> {
        let weights = g.masked_softmax(scores, valid)?;
        let context = g.weighted_sum(weights, enc_states)?;
        Ok((context, weights))
    }

    /// Plain attention step: scores from the previous state only.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        s_prev: Var,
        enc_states: &[Var],
        keys: &[Var],
        valid: &Matrix,
    ) -> Result<(Var, Var)> {
        let q = self.query(g, s_prev)?;
        let scores = self.scores(g, q, keys)?;
        self.attend(g, scores, valid, enc_states)
    }
}
