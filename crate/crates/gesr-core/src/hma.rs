//! Hard Matching Attention: explicit cross signals from capped match counts
//! between user-history feature ids and candidate feature ids.
//!
//! For each configured feature pair, the number of user events whose
//! extracted id equals the candidate's id is counted, capped at M, and used
//! as an index into a trainable embedding table (one (M+1)-row band per
//! pair). The per-pair embeddings are concatenated and passed through an
//! MLP head to produce T_match.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesrError, Result};
use crate::features::{Candidate, Event};
use crate::numerics::graph::{Graph, ParamId, ParamStore, Var};
use crate::numerics::mlp::{Activation, Mlp, MlpSpec};

/// Which id an event contributes to a matching pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserFeatureExtractor {
    /// The raw token id.
    Token,
    /// token % modulus (e.g. topic id under a topic-major vocabulary).
    TokenMod { modulus: u32 },
    /// (token / divisor) % modulus (e.g. author id).
    TokenDivMod { divisor: u32, modulus: u32 },
    /// The engagement enum as an id.
    EngagementType,
}

impl UserFeatureExtractor {
    pub fn validate(&self) -> Result<()> {
        match self {
            UserFeatureExtractor::TokenMod { modulus } if *modulus == 0 => Err(
                GesrError::Config("token_mod extractor needs modulus >= 1".to_string()),
            ),
            UserFeatureExtractor::TokenDivMod { divisor, modulus }
                if *divisor == 0 || *modulus == 0 =>
            {
                Err(GesrError::Config(
                    "token_div_mod extractor needs divisor and modulus >= 1".to_string(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn extract(&self, event: &Event) -> u32 {
        match self {
            UserFeatureExtractor::Token => event.token,
            UserFeatureExtractor::TokenMod { modulus } => event.token % modulus,
            UserFeatureExtractor::TokenDivMod { divisor, modulus } => {
                (event.token / divisor) % modulus
            }
            UserFeatureExtractor::EngagementType => u32::from(event.engagement_type),
        }
    }
}

/// One hard-matching feature pair: user-side extractor, item-side feature
/// slot, and the match-count cap M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmaPairSpec {
    /// o: position of this pair, unique per model, covering 0..P.
    pub pair_index: usize,
    pub user_extractor: UserFeatureExtractor,
    /// Index into Candidate::item_features supplying the item-side id.
    pub item_feature_slot: usize,
    /// M: maximum counted matches; counts beyond M share the M row.
    pub cap: usize,
}

/// Number of user ids equal to the item id, capped at `cap`.
pub fn match_count(user_ids: &[u32], item_id: u32, cap: usize) -> usize {
    user_ids.iter().filter(|&&u| u == item_id).count().min(cap)
}

/// Embedding row for match count `c` of pair `o`: c + o * (cap + 1).
///
/// The stride is cap + 1, not cap: c ranges over 0..=cap, which is cap + 1
/// distinct values, so a stride of cap would collide c=cap of pair o with
/// c=0 of pair o+1.
pub fn offset_index(c: usize, o: usize, cap: usize) -> Result<usize> {
    if c > cap {
        return Err(GesrError::Contract(format!(
            "match count {c} exceeds cap {cap}"
        )));
    }
    Ok(c + o * (cap + 1))
}

/// Registered HMA parameters: the banded embedding table and the MLP head.
#[derive(Clone, Debug)]
pub struct HmaParams {
    pub table: ParamId,
    pub head: Mlp,
    pairs: Vec<HmaPairSpec>,
}

impl HmaParams {
    /// Registers the table (P*(cap+1) x embed_dim) and head. All pairs must
    /// share one cap so the offset bands tile the table exactly.
    pub fn register(
        store: &mut ParamStore,
        pairs: &[HmaPairSpec],
        embed_dim: usize,
        head_hidden: &[usize],
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<HmaParams> {
        if pairs.is_empty() {
            return Err(GesrError::Config("hma needs at least one pair".to_string()));
        }
        let cap = pairs[0].cap;
        if pairs.iter().any(|p| p.cap != cap) {
            return Err(GesrError::Config(
                "all hma pairs must share one cap (the offset bands assume it)".to_string(),
            ));
        }
        let rows = pairs.len() * (cap + 1);
        let table = store.register_glorot("hma.table", rows, embed_dim, rng)?;
        let mut widths = vec![pairs.len() * embed_dim];
        widths.extend_from_slice(head_hidden);
        widths.push(out_dim);
        let head = Mlp::register(store, "hma.head", MlpSpec::new(widths, Activation::Relu)?, rng)?;
        Ok(HmaParams {
            table,
            head,
            pairs: pairs.to_vec(),
        })
    }

    pub fn pairs(&self) -> &[HmaPairSpec] {
        &self.pairs
    }

    pub fn out_dim(&self) -> usize {
        self.head.spec().output_width()
    }

    /// The item-side id per pair, in pair order. The serving cache stores
    /// this slice per candidate so cached scoring works without the raw
    /// feature slots.
    pub fn item_ids(&self, cand: &Candidate) -> Result<Vec<u32>> {
        self.pairs
            .iter()
            .map(|spec| {
                cand.item_features
                    .get(spec.item_feature_slot)
                    .copied()
                    .ok_or_else(|| {
                        GesrError::Input(format!(
                            "candidate {} lacks item feature slot {}",
                            cand.post_id, spec.item_feature_slot
                        ))
                    })
            })
            .collect()
    }

    /// The embedding rows each candidate reads, one Vec per pair, from
    /// already-extracted item-side ids (one id per pair per candidate).
    pub fn lookup_rows_from_ids(
        &self,
        events: &[Event],
        ids_per_candidate: &[Vec<u32>],
    ) -> Result<Vec<Vec<usize>>> {
        for ids in ids_per_candidate {
            if ids.len() != self.pairs.len() {
                return Err(GesrError::Input(format!(
                    "candidate carries {} hma ids, expected {} (one per pair)",
                    ids.len(),
                    self.pairs.len()
                )));
            }
        }
        let mut per_pair = Vec::with_capacity(self.pairs.len());
        for (p, spec) in self.pairs.iter().enumerate() {
            let user_ids: Vec<u32> = events.iter().map(|e| spec.user_extractor.extract(e)).collect();
            let mut rows = Vec::with_capacity(ids_per_candidate.len());
            for ids in ids_per_candidate {
                let c = match_count(&user_ids, ids[p], spec.cap);
                rows.push(offset_index(c, spec.pair_index, spec.cap)?);
            }
            per_pair.push(rows);
        }
        Ok(per_pair)
    }

    /// The embedding rows each candidate reads, one Vec per pair. This is
    /// the part of the forward pass the serving cache keys on: it depends
    /// only on preprocessed events and candidate feature slots.
    pub fn lookup_rows(&self, events: &[Event], candidates: &[Candidate]) -> Result<Vec<Vec<usize>>> {
        let ids = candidates
            .iter()
            .map(|c| self.item_ids(c))
            .collect::<Result<Vec<_>>>()?;
        self.lookup_rows_from_ids(events, &ids)
    }
}

/// T_match from pre-extracted item ids; the direct and cached scoring
/// paths both land here so their lookups are identical by construction.
pub fn hma_forward_from_ids(
    g: &mut Graph,
    store: &ParamStore,
    params: &HmaParams,
    events: &[Event],
    ids_per_candidate: &[Vec<u32>],
) -> Result<Var> {
    let per_pair = params.lookup_rows_from_ids(events, ids_per_candidate)?;
    let mut parts = Vec::with_capacity(per_pair.len());
    for rows in &per_pair {
        parts.push(g.gather(store, params.table, rows)?);
    }
    let concat = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)?
    };
    params.head.forward(g, store, concat)
}

/// T_match for every candidate: per-pair embedding lookups concatenated and
/// fed to the head MLP. Output is n x out_dim.
pub fn hma_forward(
    g: &mut Graph,
    store: &ParamStore,
    params: &HmaParams,
    events: &[Event],
    candidates: &[Candidate],
) -> Result<Var> {
    let ids = candidates
        .iter()
        .map(|c| params.item_ids(c))
        .collect::<Result<Vec<_>>>()?;
    hma_forward_from_ids(g, store, params, events, &ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matrix::DenseMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ev(token: u32) -> Event {
        Event::new(token, 0, 0)
    }

    #[test]
    fn match_count_examples() {
        assert_eq!(match_count(&[3, 5, 3, 9], 3, 16), 2);
        assert_eq!(match_count(&[], 3, 16), 0);
        assert_eq!(match_count(&[4; 20], 4, 16), 16);
    }

    #[test]
    fn offset_index_examples() {
        assert_eq!(offset_index(0, 0, 16).unwrap(), 0);
        assert_eq!(offset_index(2, 3, 16).unwrap(), 53);
        assert!(offset_index(17, 0, 16).is_err());
    }

    #[test]
    fn offset_grid_has_no_collisions() {
        // Brute-force scan: P=3, M=4; all (c, o) combinations map to
        // distinct in-range rows.
        let (p, m) = (3, 4);
        let mut seen = std::collections::HashSet::new();
        for o in 0..p {
            for c in 0..=m {
                let idx = offset_index(c, o, m).unwrap();
                assert!(idx < p * (m + 1), "index {idx} out of range");
                assert!(seen.insert(idx), "collision at c={c}, o={o}");
            }
        }
        assert_eq!(seen.len(), p * (m + 1));
    }

    fn test_params(store: &mut ParamStore, seed: u64) -> HmaParams {
        let pairs = vec![
            HmaPairSpec {
                pair_index: 0,
                user_extractor: UserFeatureExtractor::TokenMod { modulus: 10 },
                item_feature_slot: 0,
                cap: 4,
            },
            HmaPairSpec {
                pair_index: 1,
                user_extractor: UserFeatureExtractor::Token,
                item_feature_slot: 1,
                cap: 4,
            },
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        HmaParams::register(store, &pairs, 3, &[6], 4, &mut rng).unwrap()
    }

    fn cand(post_id: u32, f0: u32, f1: u32) -> Candidate {
        Candidate {
            post_id,
            item_features: vec![f0, f1],
            item_tower_inputs: vec![],
        }
    }

    #[test]
    fn zero_table_gives_identical_rows() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 1);
        store.get_mut(params.table).value = DenseMatrix::zeros(2 * 5, 3);

        let events = vec![ev(3), ev(13), ev(7)];
        let candidates = vec![cand(100, 3, 13), cand(101, 9, 9), cand(102, 7, 7)];
        let mut g = Graph::inference();
        let t = hma_forward(&mut g, &store, &params, &events, &candidates).unwrap();
        let v = g.value(t);
        assert_eq!(v.dims(), (3, 4));
        // Every lookup reads a zero row, so all candidates get MLP(0).
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn single_pair_matches_hand_pipeline_oracle() {
        let mut store = ParamStore::new();
        let pairs = vec![HmaPairSpec {
            pair_index: 0,
            user_extractor: UserFeatureExtractor::Token,
            item_feature_slot: 0,
            cap: 4,
        }];
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // Single affine head layer so the oracle is one matmul.
        let params = HmaParams::register(&mut store, &pairs, 3, &[], 2, &mut rng).unwrap();

        let events = vec![ev(7), ev(7), ev(9)];
        let candidates = vec![cand(55, 7, 0)];
        let mut g = Graph::inference();
        let t = hma_forward(&mut g, &store, &params, &events, &candidates).unwrap();

        // Oracle: c = 2 matches, row = 2 + 0*5 = 2; T = E[2] * W + b.
        let c = events.iter().filter(|e| e.token == 7).count().min(4);
        assert_eq!(c, 2);
        let row = offset_index(c, 0, 4).unwrap();
        let e_row = DenseMatrix::from_vec(1, 3, store.value(params.table).row(row).to_vec()).unwrap();
        let w = store.value(store.id("hma.head.w0").unwrap());
        let b = store.value(store.id("hma.head.b0").unwrap());
        let want = e_row.matmul(w).unwrap().add(b).unwrap();
        assert!(g.value(t).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn permuting_events_leaves_t_match_bit_identical() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 3);
        let events = vec![ev(3), ev(13), ev(7), ev(3), ev(23)];
        let mut permuted = events.clone();
        permuted.reverse();
        permuted.swap(1, 3);
        let candidates = vec![cand(100, 3, 13), cand(101, 3, 3)];

        let mut g1 = Graph::inference();
        let t1 = hma_forward(&mut g1, &store, &params, &events, &candidates).unwrap();
        let mut g2 = Graph::inference();
        let t2 = hma_forward(&mut g2, &store, &params, &permuted, &candidates).unwrap();
        assert_eq!(g1.value(t1), g2.value(t2));
    }

    #[test]
    fn non_matching_token_changes_are_invisible() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 4);
        let candidates = vec![cand(100, 3, 13)];
        // Token 47 extracts to (47 % 10 = 7, 47) for the two pairs; neither
        // matches the candidate's (3, 13). Swapping it for 86 (6, 86) keeps
        // both pairs unmatched.
        let events_a = vec![ev(3), ev(13), ev(47)];
        let events_b = vec![ev(3), ev(13), ev(86)];
        let mut g1 = Graph::inference();
        let t1 = hma_forward(&mut g1, &store, &params, &events_a, &candidates).unwrap();
        let mut g2 = Graph::inference();
        let t2 = hma_forward(&mut g2, &store, &params, &events_b, &candidates).unwrap();
        assert_eq!(g1.value(t1), g2.value(t2));
    }

    #[test]
    fn different_match_counts_produce_different_rows() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 5);
        // Candidate 0 matches twice on pair 0; candidate 1 never matches.
        let events = vec![ev(3), ev(13), ev(23)];
        let candidates = vec![cand(100, 3, 999), cand(101, 9, 999)];
        let mut g = Graph::inference();
        let t = hma_forward(&mut g, &store, &params, &events, &candidates).unwrap();
        let v = g.value(t);
        let diff: f64 = v
            .row(0)
            .iter()
            .zip(v.row(1))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "rows unexpectedly identical");
    }

    #[test]
    fn missing_item_feature_slot_is_input_error() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 6);
        let candidates = vec![Candidate {
            post_id: 1,
            item_features: vec![3], // slot 1 missing
            item_tower_inputs: vec![],
        }];
        let mut g = Graph::inference();
        let r = hma_forward(&mut g, &store, &params, &[ev(1)], &candidates);
        assert!(matches!(r, Err(GesrError::Input(_))));
    }

    #[test]
    fn mismatched_caps_rejected_at_registration() {
        let mut store = ParamStore::new();
        let pairs = vec![
            HmaPairSpec {
                pair_index: 0,
                user_extractor: UserFeatureExtractor::Token,
                item_feature_slot: 0,
                cap: 4,
            },
            HmaPairSpec {
                pair_index: 1,
                user_extractor: UserFeatureExtractor::Token,
                item_feature_slot: 1,
                cap: 8,
            },
        ];
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert!(HmaParams::register(&mut store, &pairs, 3, &[], 2, &mut rng).is_err());
    }

    #[test]
    fn gradients_reach_table_and_head() {
        let mut store = ParamStore::new();
        let params = test_params(&mut store, 8);
        let events = vec![ev(3), ev(13), ev(7), ev(3)];
        let candidates = vec![cand(100, 3, 13), cand(101, 7, 3)];
        let err = crate::numerics::grad_check(&mut store, 1e-5, move |g, s| {
            let t = hma_forward(g, s, &params, &events, &candidates)?;
            let sq = g.mul(t, t)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "worst error {err}");
    }

    proptest! {
        #[test]
        fn match_count_is_permutation_invariant(
            mut ids in proptest::collection::vec(0u32..6, 0..30),
            item in 0u32..6,
            swap_a in 0usize..30,
            swap_b in 0usize..30,
        ) {
            let before = match_count(&ids, item, 4);
            if !ids.is_empty() {
                let (a, b) = (swap_a % ids.len(), swap_b % ids.len());
                ids.swap(a, b);
            }
            prop_assert_eq!(match_count(&ids, item, 4), before);
        }

        #[test]
        fn match_count_is_monotone_until_cap(
            ids in proptest::collection::vec(0u32..6, 0..30),
            item in 0u32..6,
        ) {
            let cap = 4;
            let before = match_count(&ids, item, cap);
            let mut extended = ids.clone();
            extended.push(item);
            let after = match_count(&extended, item, cap);
            prop_assert!(after >= before);
            prop_assert!(after <= cap);
            if before < cap {
                prop_assert_eq!(after, before + 1);
            }
        }
    }
}
