//! Target-aware self attention: a stack of sequential transduction units
//! (STU) over the concatenated [user history; candidates] sequence.
//!
//! Each layer: normalize the input; project query/key/value and a gating
//! branch through SiLU-activated linear maps; per-head masked softmax
//! attention on scaled dot products; then output-projection of
//! (normalized attention output ⊙ gate) plus a residual connection.
//!
//! Query and key projections start at the identity (plus a little noise)
//! instead of a random map. Two independent random projections give
//! near-zero scores even for identical rows, so token-match structure
//! would have to emerge through the slow second-order softmax gradients;
//! starting at the identity makes "this candidate appears in the history"
//! visible to the very first optimizer step, which is the inductive bias
//! the target-aware design is built around.

use std::sync::Arc;

use rand::Rng;

use crate::error::{GesrError, Result};
use crate::numerics::graph::{Graph, ParamId, ParamStore, Var};
use crate::numerics::matrix::BoolMatrix;

#[derive(Clone, Debug)]
pub struct StuLayerParams {
    norm_in_gamma: ParamId,
    norm_in_beta: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wu: ParamId,
    bu: ParamId,
    norm_attn_gamma: ParamId,
    norm_attn_beta: ParamId,
    wo: ParamId,
    bo: ParamId,
}

impl StuLayerParams {
    fn register(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        fn proj<R: Rng>(
            store: &mut ParamStore,
            prefix: &str,
            name: &str,
            dim: usize,
            rng: &mut R,
        ) -> Result<(ParamId, ParamId)> {
            let w = store.register_glorot(&format!("{prefix}.{name}.w"), dim, dim, rng)?;
            let b = store.register_zeros(&format!("{prefix}.{name}.b"), 1, dim)?;
            Ok((w, b))
        }
        // Identity-plus-noise init for the match-sensitive projections (see
        // the module docs).
        fn match_proj<R: Rng>(
            store: &mut ParamStore,
            prefix: &str,
            name: &str,
            dim: usize,
            rng: &mut R,
        ) -> Result<(ParamId, ParamId)> {
            let mut m = crate::numerics::matrix::DenseMatrix::zeros(dim, dim);
            for r in 0..dim {
                for c in 0..dim {
                    let noise = rng.gen_range(-0.02..0.02);
                    m.set(r, c, noise + if r == c { 1.0 } else { 0.0 });
                }
            }
            let w = store.register(&format!("{prefix}.{name}.w"), m)?;
            let b = store.register_zeros(&format!("{prefix}.{name}.b"), 1, dim)?;
            Ok((w, b))
        }
        let norm_in_gamma = store.register_ones(&format!("{prefix}.norm_in.gamma"), 1, dim)?;
        let norm_in_beta = store.register_zeros(&format!("{prefix}.norm_in.beta"), 1, dim)?;
        let (wq, bq) = match_proj(store, prefix, "q", dim, rng)?;
        let (wk, bk) = match_proj(store, prefix, "k", dim, rng)?;
        let (wv, bv) = proj(store, prefix, "v", dim, rng)?;
        let (wu, bu) = proj(store, prefix, "u", dim, rng)?;
        let norm_attn_gamma = store.register_ones(&format!("{prefix}.norm_attn.gamma"), 1, dim)?;
        let norm_attn_beta = store.register_zeros(&format!("{prefix}.norm_attn.beta"), 1, dim)?;
        let (wo, bo) = proj(store, prefix, "o", dim, rng)?;
        Ok(StuLayerParams {
            norm_in_gamma,
            norm_in_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wu,
            bu,
            norm_attn_gamma,
            norm_attn_beta,
            wo,
            bo,
        })
    }
}

/// The full self-attention stack: `layers` STU layers sharing one width and
/// head count.
#[derive(Clone, Debug)]
pub struct SelfAttentionStack {
    layers: Vec<StuLayerParams>,
    dim: usize,
    heads: usize,
}

impl SelfAttentionStack {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(GesrError::Config(format!(
                "dim {dim} must be a positive multiple of heads {heads}"
            )));
        }
        if layers == 0 {
            return Err(GesrError::Config("stack needs at least one layer".to_string()));
        }
        let layers = (0..layers)
            .map(|l| StuLayerParams::register(store, &format!("{prefix}.layer{l}"), dim, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SelfAttentionStack { layers, dim, heads })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &Arc<BoolMatrix>,
        p: &StuLayerParams,
    ) -> Result<Var> {
        let h = g.layer_norm(store, x, p.norm_in_gamma, p.norm_in_beta)?;
        let proj = |g: &mut Graph, w, b| -> Result<Var> {
            let wp = g.param(store, w);
            let bp = g.param(store, b);
            let a = g.matmul(h, wp)?;
            let a = g.add_row(a, bp)?;
            Ok(g.silu(a))
        };
        let q = proj(g, p.wq, p.bq)?;
        let k = proj(g, p.wk, p.bk)?;
        let v = proj(g, p.wv, p.bv)?;
        let u = proj(g, p.wu, p.bu)?;

        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for hix in 0..self.heads {
            let qh = g.slice_cols(q, hix * head_dim, head_dim)?;
            let kh = g.slice_cols(k, hix * head_dim, head_dim)?;
            let vh = g.slice_cols(v, hix * head_dim, head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let weights = g.masked_softmax_rows(scores, Arc::clone(mask))?;
            head_outs.push(g.matmul(weights, vh)?);
        }
        let attn = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            g.concat_cols(&head_outs)?
        };
        let normed = g.layer_norm(store, attn, p.norm_attn_gamma, p.norm_attn_beta)?;
        let gated = g.mul(normed, u)?;
        let wo = g.param(store, p.wo);
        let bo = g.param(store, p.bo);
        let out = g.matmul(gated, wo)?;
        let out = g.add_row(out, bo)?;
        g.add(out, x)
    }

    /// Runs the stack over an RxD sequence under the given RxR mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: &Arc<BoolMatrix>,
    ) -> Result<Var> {
        let (rows, cols) = g.value(x).dims();
        if cols != self.dim {
            return Err(GesrError::dim(
                "self_attention_forward",
                format!("input width {cols}, stack width {}", self.dim),
            ));
        }
        if mask.rows() != rows || mask.cols() != rows {
            return Err(GesrError::dim(
                "self_attention_forward",
                format!("mask {}x{} for {rows} rows", mask.rows(), mask.cols()),
            ));
        }
        let mut h = x;
        for p in &self.layers {
            h = self.layer_forward(g, store, h, mask, p)?;
        }
        Ok(h)
    }
}

/// Target-aware forward over user rows U (NxD) and candidate rows T (nxD):
/// concatenate, run the stack under the target-aware mask, split back into
/// (U_self, T_self).
pub fn self_attention_forward(
    g: &mut Graph,
    store: &ParamStore,
    stack: &SelfAttentionStack,
    u: Var,
    t: Var,
    mask: &super::mask::TargetAwareMask,
) -> Result<(Var, Var)> {
    let n_user = g.value(u).rows();
    let n_cand = g.value(t).rows();
    if mask.n_user() != n_user || mask.n_cand() != n_cand {
        return Err(GesrError::dim(
            "self_attention_forward",
            format!(
                "mask built for ({}, {}), inputs are ({n_user}, {n_cand})",
                mask.n_user(),
                mask.n_cand()
            ),
        ));
    }
    let seq = g.concat_rows(&[u, t])?;
    let out = stack.forward(g, store, seq, &mask.matrix())?;
    let u_self = g.slice_rows(out, 0, n_user)?;
    let t_self = g.slice_rows(out, n_user, n_cand)?;
    Ok((u_self, t_self))
}
