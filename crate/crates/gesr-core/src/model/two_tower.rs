use rand::Rng;

use crate::error::{GesrError, Result};
use crate::numerics::{Activation, DenseMatrix, Graph, Mlp, MlpSpec, ParamId, ParamStore, Var};

use super::config::ModelConfig;

/// The decoupled baseline: a user MLP over pooled token embeddings and an
/// item MLP over dense item inputs. Each emits `tasks * tower_dim` columns
/// and scoring is a per-task dot product with no output bias, so a zero
/// user vector scores zero on every candidate.
#[derive(Debug)]
pub struct TwoTowerParams {
    pub user: Mlp,
    pub item: Mlp,
}

impl TwoTowerParams {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.moa.embed_dim;
        let out = cfg.tower_out_width();

        let mut user_widths = vec![2 * d];
        user_widths.extend_from_slice(&cfg.user_tower_hidden);
        user_widths.push(out);
        let user = Mlp::register(
            store,
            "tower.user",
            MlpSpec::new(user_widths, Activation::Silu)?,
            rng,
        )?;

        let mut item_widths = vec![cfg.item_input_dim];
        item_widths.extend_from_slice(&cfg.item_tower_hidden);
        item_widths.push(out);
        let item = Mlp::register(
            store,
            "tower.item",
            MlpSpec::new(item_widths, Activation::Silu)?,
            rng,
        )?;

        Ok(TwoTowerParams { user, item })
    }

    /// Pools event-token and context-token embeddings (mean over rows,
    /// zeros when a side is empty), concatenates the two pools, and runs
    /// the user MLP. Returns a 1 x tower_out_width vector.
    pub fn user_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        shared_table: ParamId,
        event_tokens: &[u32],
        context_tokens: &[u32],
        embed_dim: usize,
    ) -> Result<Var> {
        let event_pool = pooled_embedding(g, store, shared_table, event_tokens, embed_dim)?;
        let ctx_pool = pooled_embedding(g, store, shared_table, context_tokens, embed_dim)?;
        let joined = g.concat_cols(&[event_pool, ctx_pool])?;
        self.user.forward(g, store, joined)
    }

    /// Runs the item MLP over a dense n x item_input_dim input block.
    pub fn item_forward(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<Var> {
        self.item.forward(g, store, inputs)
    }
}

fn pooled_embedding(
    g: &mut Graph,
    store: &ParamStore,
    table: ParamId,
    tokens: &[u32],
    embed_dim: usize,
) -> Result<Var> {
    if tokens.is_empty() {
        return Ok(g.input(DenseMatrix::zeros(1, embed_dim)));
    }
    let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let embedded = g.gather(store, table, &rows)?;
    g.mean_rows(embedded)
}

/// Builds an n x item_input_dim matrix from candidate dense inputs.
pub fn item_input_matrix(
    candidates: &[crate::features::Candidate],
    item_input_dim: usize,
) -> Result<DenseMatrix> {
    let mut rows = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.item_tower_inputs.len() != item_input_dim {
            return Err(GesrError::Input(format!(
                "candidate {} has {} item tower inputs, expected {}",
                c.post_id,
                c.item_tower_inputs.len(),
                item_input_dim
            )));
        }
        rows.push(c.item_tower_inputs.clone());
    }
    DenseMatrix::from_rows(&rows)
}

/// Per-task dot-product scoring. Returns (logits n x tasks, the user
/// vector broadcast to n rows, and the elementwise user*item product);
/// callers reuse the latter two when assembling the scoring input z.
pub fn tower_logits(
    g: &mut Graph,
    user_vec: Var,
    item_vecs: Var,
    n: usize,
    tasks: usize,
    tower_dim: usize,
) -> Result<(Var, Var, Var)> {
    let user_rows = g.broadcast_row(user_vec, n)?;
    let prod = g.mul(user_rows, item_vecs)?;
    let mut per_task = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let slice = g.slice_cols(prod, t * tower_dim, tower_dim)?;
        per_task.push(g.sum_cols(slice));
    }
    let logits = g.concat_cols(&per_task)?;
    Ok((logits, user_rows, prod))
}
