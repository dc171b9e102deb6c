//! Target-aware attention mask: one (N+n) x (N+n) boolean matrix governing
//! the concatenated [user history; candidates] sequence.

use std::sync::Arc;

use crate::error::{GesrError, Result};
use crate::numerics::matrix::BoolMatrix;

/// The four masking rules, as a pure predicate over (row, col) with the
/// first `n_user` positions holding user history:
/// user->user strictly causal (col <= row), user->candidate never,
/// candidate->user always, candidate->candidate self only.
pub fn mask_rule(n_user: usize, row: usize, col: usize) -> bool {
    match (row < n_user, col < n_user) {
        (true, true) => col <= row,
        (true, false) => false,
        (false, true) => true,
        (false, false) => row == col,
    }
}

#[derive(Clone, Debug)]
pub struct TargetAwareMask {
    inner: Arc<BoolMatrix>,
    n_user: usize,
    n_cand: usize,
}

impl TargetAwareMask {
    pub fn n_user(&self) -> usize {
        self.n_user
    }

    pub fn n_cand(&self) -> usize {
        self.n_cand
    }

    pub fn total(&self) -> usize {
        self.n_user + self.n_cand
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.inner.get(row, col)
    }

    /// The shared boolean matrix consumed by masked softmax.
    pub fn matrix(&self) -> Arc<BoolMatrix> {
        Arc::clone(&self.inner)
    }
}

/// Builds the mask for N user positions followed by n candidate positions.
pub fn build_target_aware_mask(n_user: usize, n_cand: usize) -> Result<TargetAwareMask> {
    if n_cand == 0 {
        return Err(GesrError::Contract(
            "target-aware mask needs at least one candidate".to_string(),
        ));
    }
    let total = n_user + n_cand;
    let mut m = BoolMatrix::new(total, total, false);
    for r in 0..total {
        for c in 0..total {
            if mask_rule(n_user, r, c) {
                m.set(r, c, true);
            }
        }
    }
    Ok(TargetAwareMask {
        inner: Arc::new(m),
        n_user,
        n_cand,
    })
}

/// Plain causal (lower-triangular) mask over `n` positions; used by the
/// ablation that strips target awareness and runs the stack over user
/// history alone.
pub fn build_causal_mask(n: usize) -> Arc<BoolMatrix> {
    let mut m = BoolMatrix::new(n, n, false);
    for r in 0..n {
        for c in 0..=r {
            m.set(r, c, true);
        }
    }
    Arc::new(m)
}
