use crate::error::Result;
use crate::numerics::{Graph, Init, ParamId, ParameterStore, Var};

/// One GRU layer with fused gate weights (`[reset | update | candidate]`).
///
/// ```text
/// r  = sigmoid(x W_xr + b_xr + h W_hr + b_hr)
/// z  = sigmoid(x W_xz + b_xz + h W_hz + b_hz)
/// n  = tanh(x W_xn + b_xn + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct GruLayer {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b_x: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruLayer {
    pub fn register(
        store: &mut ParameterStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        Ok(GruLayer {
            w_x: store.register(&format!("{prefix}.w_x"), input_dim, 3 * hidden_dim, Init::Uniform)?,
            w_h: store.register(&format!("{prefix}.w_h"), hidden_dim, 3 * hidden_dim, Init::Uniform)?,
            b_x: store.register(&format!("{prefix}.b_x"), 1, 3 * hidden_dim, Init::Zeros)?,
            b_h: store.register(&format!("{prefix}.b_h"), 1, 3 * hidden_dim, Init::Zeros)?,
            input_dim,
            hidden_dim,
        })
    }

    /// One step: `x: [batch, input_dim]`, `h: [batch, hidden_dim]`.
    pub fn step(&self, g: &mut Graph<'_>, x: Var, h: Var) -> Result<Var> {
        let d = self.hidden_dim;
        let (w_x, w_h, b_x, b_h) = (g.param(self.w_x), g.param(self.w_h), g.param(self.b_x), g.param(self.b_h));
        let gx = g.matmul(x, w_x)?;
        let gx = g.add_row(gx, b_x)?;
        let gh = g.matmul(h, w_h)?;
        let gh = g.add_row(gh, b_h)?;

        let gx_rz = g.slice_cols(gx, 0, 2 * d)?;
        let gh_rz = g.slice_cols(gh, 0, 2 * d)?;
        let rz = g.add(gx_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, d)?;
        let z = g.slice_cols(rz, d, 2 * d)?;

        let gx_n = g.slice_cols(gx, 2 * d, 3 * d)?;
        let gh_n = g.slice_cols(gh, 2 * d, 3 * d)?;
        let gated = g.mul(r, gh_n)?;
        let n = g.add(gx_n, gated)?;
        let n = g.tanh(n);

        // h' = n + z * (h - n)
        let diff = g.sub(h, n)?;
        let keep = g.mul(z, diff)?;
        g.add(n, keep)
    }
}
