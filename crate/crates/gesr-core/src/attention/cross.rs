//! RO and NRO cross attention.
//!
//! RO (read-once) cross attention compresses the user-side sequence into a
//! fixed-width vector once per request: i learnable seed queries, each with
//! its own projections, attend over the user rows. NRO cross attention runs
//! per candidate: j query slots gate the candidate query elementwise, then
//! attend over the same user-side rows with slot-specific key/value maps.

use rand::Rng;

use crate::error::{GesrError, Result};
use crate::features::TokenId;
use crate::numerics::graph::{Graph, ParamId, ParamStore, Var};
use crate::numerics::matrix::DenseMatrix;

/// Parameters for RO cross attention: the seed matrix (i x D) plus
/// per-seed query/key/value projections.
#[derive(Clone, Debug)]
pub struct RoCrossParams {
    seeds: ParamId,
    per_seed: Vec<SeedProj>,
    dim: usize,
}

#[derive(Clone, Debug)]
struct SeedProj {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl RoCrossParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        seeds: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if seeds == 0 {
            return Err(GesrError::Config("ro cross attention needs i >= 1 seeds".to_string()));
        }
        let seed_table = store.register_glorot(&format!("{prefix}.seeds"), seeds, dim, rng)?;
        let mut per_seed = Vec::with_capacity(seeds);
        for s in 0..seeds {
            per_seed.push(SeedProj {
                wq: store.register_glorot(&format!("{prefix}.seed{s}.wq"), dim, dim, rng)?,
                wk: store.register_glorot(&format!("{prefix}.seed{s}.wk"), dim, dim, rng)?,
                wv: store.register_glorot(&format!("{prefix}.seed{s}.wv"), dim, dim, rng)?,
            });
        }
        Ok(RoCrossParams {
            seeds: seed_table,
            per_seed,
            dim,
        })
    }

    pub fn num_seeds(&self) -> usize {
        self.per_seed.len()
    }

    pub fn out_dim(&self) -> usize {
        self.per_seed.len() * self.dim
    }
}

/// U_cross: each seed (optionally enriched by elementwise-adding the shared
/// embedding of its assigned context token) attends over `kv` with its own
/// projections; the i outputs are concatenated into 1 x (i*D).
///
/// Context tokens are assigned in order: seed s takes context_tokens[s]
/// when present; extra tokens are ignored, missing ones leave the seed
/// bare. An empty KV yields all zeros (nothing to attend over).
pub fn ro_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &RoCrossParams,
    shared_table: ParamId,
    context_tokens: &[TokenId],
    kv: Var,
) -> Result<Var> {
    let kv_rows = g.value(kv).rows();
    if g.value(kv).cols() != params.dim {
        return Err(GesrError::dim(
            "ro_cross_attention",
            format!("kv width {}, expected {}", g.value(kv).cols(), params.dim),
        ));
    }
    if kv_rows == 0 {
        return Ok(g.input(DenseMatrix::zeros(1, params.out_dim())));
    }
    let scale = 1.0 / (params.dim as f64).sqrt();
    let seeds = g.param(store, params.seeds);
    let mut outs = Vec::with_capacity(params.per_seed.len());
    for (s, proj) in params.per_seed.iter().enumerate() {
        let seed = g.slice_rows(seeds, s, 1)?;
        let query_in = match context_tokens.get(s) {
            Some(&tok) => {
                let ctx = g.gather(store, shared_table, &[tok as usize])?;
                g.add(seed, ctx)?
            }
            None => seed,
        };
        let wq = g.param(store, proj.wq);
        let wk = g.param(store, proj.wk);
        let wv = g.param(store, proj.wv);
        let q = g.matmul(query_in, wq)?;
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, v)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

/// Broadcast of the request-level U_cross row to all n candidates.
pub fn expand_ro(g: &mut Graph, u_cross: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Err(GesrError::Contract("expand_ro needs n >= 1".to_string()));
    }
    g.broadcast_row(u_cross, n)
}

/// Parameters for NRO cross attention: per-slot query gate (affine +
/// doubled sigmoid) and key/value projections.
#[derive(Clone, Debug)]
pub struct NroCrossParams {
    slots: Vec<SlotProj>,
    dim: usize,
}

#[derive(Clone, Debug)]
struct SlotProj {
    wg: ParamId,
    bg: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl NroCrossParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        slots: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(GesrError::Config("nro cross attention needs j >= 1 slots".to_string()));
        }
        let mut out = Vec::with_capacity(slots);
        for s in 0..slots {
            out.push(SlotProj {
                // Gate starts exactly neutral: 2*sigmoid(0) = 1.
                wg: store.register_zeros(&format!("{prefix}.slot{s}.wg"), dim, dim)?,
                bg: store.register_zeros(&format!("{prefix}.slot{s}.bg"), 1, dim)?,
                wk: store.register_glorot(&format!("{prefix}.slot{s}.wk"), dim, dim, rng)?,
                wv: store.register_glorot(&format!("{prefix}.slot{s}.wv"), dim, dim, rng)?,
            });
        }
        Ok(NroCrossParams { slots: out, dim })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn out_dim(&self) -> usize {
        self.slots.len() * self.dim
    }
}

/// T_cross: for each slot, gate the candidate queries elementwise with
/// 2*sigmoid(affine(q)), attend over `kv`, and concatenate the j outputs
/// into n x (j*D). Queries arrive already enriched by the caller.
pub fn nro_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    params: &NroCrossParams,
    queries: Var,
    kv: Var,
) -> Result<Var> {
    let (n, qd) = g.value(queries).dims();
    if qd != params.dim || g.value(kv).cols() != params.dim {
        return Err(GesrError::dim(
            "nro_cross_attention",
            format!(
                "queries {}x{qd}, kv width {}, expected width {}",
                n,
                g.value(kv).cols(),
                params.dim
            ),
        ));
    }
    if g.value(kv).rows() == 0 {
        return Ok(g.input(DenseMatrix::zeros(n, params.out_dim())));
    }
    let scale = 1.0 / (params.dim as f64).sqrt();
    let mut outs = Vec::with_capacity(params.slots.len());
    for slot in &params.slots {
        let wg = g.param(store, slot.wg);
        let bg = g.param(store, slot.bg);
        let gate_in = g.matmul(queries, wg)?;
        let gate_in = g.add_row(gate_in, bg)?;
        let gate = g.sigmoid(gate_in);
        let gate = g.scale(gate, 2.0);
        let gated_q = g.mul(gate, queries)?;

        let wk = g.param(store, slot.wk);
        let wv = g.param(store, slot.wv);
        let k = g.matmul(kv, wk)?;
        let v = g.matmul(kv, wv)?;
        let scores = g.matmul_nt(gated_q, k)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores)?;
        outs.push(g.matmul(weights, v)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}
