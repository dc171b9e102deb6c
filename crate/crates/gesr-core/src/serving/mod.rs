//! Cached serving: precomputed item-tower vectors and HMA item features
//! keyed by post id, merged-dedup embedding lookups, and a scoring path
//! that reproduces `model_forward` bit for bit.
//!
//! Exactness is a contract, not an aspiration: the cached path runs the
//! same operations in the same order on the same values. Item-tower rows
//! are batch-invariant (pinned by a matmul regression test), embedding-row
//! copies are exact, and everything downstream is shared code.

pub mod file;

use std::collections::HashMap;
use std::time::Instant;

use crate::error::{GesrError, Result};
use crate::features::{Candidate, RankingRequest, TokenId};
use crate::model::{item_input_matrix, GesrModel, ItemSource};
use crate::numerics::graph::Graph;
use crate::numerics::matrix::DenseMatrix;

pub use file::{load_cache, save_cache};

/// Everything serving needs per item: the item-tower output and the
/// id-valued feature slots hard matching compares against.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemCacheEntry {
    pub post_id: TokenId,
    /// Item-tower output, width = tasks * tower_dim.
    pub vector: Vec<f64>,
    /// One id per HMA pair, in pair order. Empty when the model has no
    /// hard-matching component.
    pub hma_feature_ids: Vec<u32>,
}

/// Immutable post_id -> entry map pinned to one checkpoint. Rebuilding
/// after a parameter change produces a new index; scoring against an old
/// one is an error, never a silent wrong answer.
#[derive(Clone, Debug)]
pub struct ServingIndex {
    entries: HashMap<TokenId, ItemCacheEntry>,
    checkpoint_version: String,
    item_width: usize,
    hma_pairs: usize,
}

impl ServingIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn checkpoint_version(&self) -> &str {
        &self.checkpoint_version
    }

    pub fn item_width(&self) -> usize {
        self.item_width
    }

    pub fn hma_pairs(&self) -> usize {
        self.hma_pairs
    }

    pub fn get(&self, post_id: TokenId) -> Option<&ItemCacheEntry> {
        self.entries.get(&post_id)
    }

    /// Entries sorted by post id (the file format's canonical order).
    pub fn sorted_entries(&self) -> Vec<&ItemCacheEntry> {
        let mut v: Vec<&ItemCacheEntry> = self.entries.values().collect();
        v.sort_by_key(|e| e.post_id);
        v
    }

    pub(crate) fn from_parts(
        entries: HashMap<TokenId, ItemCacheEntry>,
        checkpoint_version: String,
        item_width: usize,
        hma_pairs: usize,
    ) -> Self {
        ServingIndex {
            entries,
            checkpoint_version,
            item_width,
            hma_pairs,
        }
    }
}

/// Runs the item tower over the whole corpus in one batch and stores each
/// row with the item's HMA feature ids. Matmul rows are batch-invariant,
/// so these rows are bitwise the rows a per-request batch would produce.
pub fn precompute_item_cache(corpus: &[Candidate], model: &GesrModel) -> Result<ServingIndex> {
    let cfg = model.config();
    let version = model.version()?.to_string();
    let width = cfg.tower_out_width();
    let pairs = model.hma().map_or(0, |h| h.pairs().len());
    if corpus.is_empty() {
        return Ok(ServingIndex::from_parts(HashMap::new(), version, width, pairs));
    }
    let inputs = item_input_matrix(corpus, cfg.item_input_dim)?;
    let mut g = Graph::inference();
    let iv = g.input(inputs);
    let out = model.towers().item_forward(&mut g, &model.store, iv)?;
    let vectors = g.value(out);

    let mut entries = HashMap::with_capacity(corpus.len());
    for (i, item) in corpus.iter().enumerate() {
        let ids = match model.hma() {
            Some(hma) => hma.item_ids(item)?,
            None => Vec::new(),
        };
        let entry = ItemCacheEntry {
            post_id: item.post_id,
            vector: vectors.row(i).to_vec(),
            hma_feature_ids: ids,
        };
        if entries.insert(item.post_id, entry).is_some() {
            return Err(GesrError::Input(format!(
                "corpus lists post id {} twice",
                item.post_id
            )));
        }
    }
    Ok(ServingIndex::from_parts(entries, version, width, pairs))
}

/// The merged-dedup lookup plan: each distinct token appears once, user
/// order first, then candidates that add new tokens; the row maps restore
/// every original position (I_RO for user positions, I_NRO for candidates).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedLookup {
    pub tokens: Vec<TokenId>,
    pub user_rows: Vec<usize>,
    pub candidate_rows: Vec<usize>,
}

/// Dedups the lookup set globally: a candidate already in the history maps
/// to the history's row, and repeated tokens map to their first occurrence.
/// Score-neutral by construction because the maps restore duplication.
pub fn merge_dedup_sequence(
    user_tokens: &[TokenId],
    candidate_post_ids: &[TokenId],
) -> MergedLookup {
    let mut row_of: HashMap<TokenId, usize> = HashMap::new();
    let mut tokens = Vec::new();
    let place = |t: TokenId, tokens: &mut Vec<TokenId>, row_of: &mut HashMap<TokenId, usize>| {
        *row_of.entry(t).or_insert_with(|| {
            tokens.push(t);
            tokens.len() - 1
        })
    };
    let user_rows = user_tokens
        .iter()
        .map(|&t| place(t, &mut tokens, &mut row_of))
        .collect();
    let candidate_rows = candidate_post_ids
        .iter()
        .map(|&t| place(t, &mut tokens, &mut row_of))
        .collect();
    MergedLookup {
        tokens,
        user_rows,
        candidate_rows,
    }
}

/// Scores a request from the cache: item-tower vectors and HMA ids come
/// from the index, embedding rows are looked up once per distinct token.
/// The result equals `model_forward` exactly. Item-side features resolve
/// to the cached values, so a request whose candidate records disagree
/// with the corpus the cache was built from is scored with the corpus
/// values (the cache is authoritative, per the serving design).
pub fn score_request_cached(
    model: &GesrModel,
    index: &ServingIndex,
    request: &RankingRequest,
) -> Result<DenseMatrix> {
    let model_version = model.version()?;
    if index.checkpoint_version != model_version {
        return Err(GesrError::StaleCache {
            cache_version: index.checkpoint_version.clone(),
            model_version: model_version.to_string(),
        });
    }
    let prep = model.prepare(request)?;
    let n = prep.num_candidates();
    let mut item_vecs = DenseMatrix::zeros(n, index.item_width);
    let mut hma_ids: Vec<Vec<u32>> = Vec::with_capacity(n);
    for (k, c) in prep.candidates().iter().enumerate() {
        let entry = index
            .entries
            .get(&c.post_id)
            .ok_or(GesrError::CacheMiss { post_id: c.post_id })?;
        item_vecs.row_mut(k).copy_from_slice(&entry.vector);
        hma_ids.push(entry.hma_feature_ids.clone());
    }
    let event_tokens: Vec<TokenId> = prep.events.iter().map(|e| e.token).collect();
    let candidate_ids: Vec<TokenId> = prep.candidates().iter().map(|c| c.post_id).collect();
    let plan = merge_dedup_sequence(&event_tokens, &candidate_ids);
    let unique_rows: Vec<usize> = plan.tokens.iter().map(|&t| t as usize).collect();

    let mut g = Graph::inference();
    let art = model.build_logits(
        &mut g,
        &model.store,
        &prep,
        ItemSource::Cached {
            item_vecs: &item_vecs,
            hma_ids: &hma_ids,
            unique_tokens: &unique_rows,
            event_positions: &plan.user_rows,
            candidate_positions: &plan.candidate_rows,
        },
    )?;
    Ok(g.value(art.logits).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Cached,
    Direct,
}

impl BenchMode {
    pub fn name(&self) -> &'static str {
        match self {
            BenchMode::Cached => "cached",
            BenchMode::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ThroughputReport {
    pub mode: String,
    pub requests: usize,
    pub requests_per_second: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    /// Sum of every logit in request order; bitwise-equal scores across
    /// modes give bitwise-equal checksums.
    pub logit_checksum: f64,
}

fn percentile_ms(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] * 1000.0
}

/// Scores every request in order through one path, recording per-request
/// wall time. The workload is supplied by the caller (seeded generation),
/// so runs are reproducible apart from the clock.
pub fn bench_throughput(
    model: &GesrModel,
    index: &ServingIndex,
    requests: &[RankingRequest],
    mode: BenchMode,
) -> Result<ThroughputReport> {
    if requests.is_empty() {
        return Err(GesrError::Input("benchmark needs at least one request".to_string()));
    }
    let mut latencies = Vec::with_capacity(requests.len());
    let mut checksum = 0.0;
    let started = Instant::now();
    for req in requests {
        let t = Instant::now();
        let logits = match mode {
            BenchMode::Cached => score_request_cached(model, index, req)?,
            BenchMode::Direct => model.model_forward(req)?,
        };
        latencies.push(t.elapsed().as_secs_f64());
        checksum += logits.data().iter().sum::<f64>();
    }
    let total = started.elapsed().as_secs_f64();
    latencies.sort_by(|a, b| a.partial_cmp(b).expect("finite latency"));
    Ok(ThroughputReport {
        mode: mode.name().to_string(),
        requests: requests.len(),
        requests_per_second: requests.len() as f64 / total.max(1e-12),
        p50_ms: percentile_ms(&latencies, 0.50),
        p99_ms: percentile_ms(&latencies, 0.99),
        logit_checksum: checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelVariant};
    use crate::training::synthetic::{generate_synthetic, make_candidate, SyntheticSpec};
    use proptest::prelude::*;

    fn small_config() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.moa.embed_dim = 16;
        cfg.moa.heads = 2;
        cfg.moa.self_attn_layers = 1;
        cfg.moa.seq_len = 16;
        cfg.tower_dim = 8;
        cfg.user_tower_hidden = vec![16];
        cfg.item_tower_hidden = vec![16];
        cfg
    }

    fn small_data(seed: u64, users: usize) -> (SyntheticSpec, Vec<RankingRequest>) {
        let spec = SyntheticSpec {
            users,
            requests_per_user: 2,
            events_min: 4,
            events_max: 12,
            candidates: 5,
            seed,
            ..SyntheticSpec::desk_default()
        };
        let data = generate_synthetic(&spec).unwrap();
        (spec, data)
    }

    fn corpus_for(data: &[RankingRequest], spec: &SyntheticSpec) -> Vec<Candidate> {
        let mut seen = std::collections::HashSet::new();
        let mut corpus = Vec::new();
        for req in data {
            for c in &req.candidates {
                if seen.insert(c.post_id) {
                    corpus.push(make_candidate(c.post_id, spec));
                }
            }
        }
        corpus
    }

    #[test]
    fn merge_example_from_the_contract() {
        let plan = merge_dedup_sequence(&[5, 7, 5], &[9]);
        assert_eq!(plan.tokens, vec![5, 7, 9]);
        assert_eq!(plan.user_rows, vec![0, 1, 0]);
        assert_eq!(plan.candidate_rows, vec![2]);
    }

    #[test]
    fn candidate_already_in_history_shares_its_row() {
        let plan = merge_dedup_sequence(&[5, 7], &[7, 3]);
        assert_eq!(plan.tokens, vec![5, 7, 3]);
        assert_eq!(plan.candidate_rows, vec![1, 2]);
        // The candidate still has its own slot in the map even though the
        // lookup row is shared.
        assert_eq!(plan.candidate_rows.len(), 2);
    }

    #[test]
    fn disjoint_sets_concatenate() {
        let plan = merge_dedup_sequence(&[1, 2, 2, 1], &[8, 9]);
        assert_eq!(plan.tokens, vec![1, 2, 8, 9]);
        assert_eq!(plan.tokens.len(), 2 + 2);
    }

    proptest! {
        #[test]
        fn merge_reconstructs_every_position(
            user in proptest::collection::vec(0u32..30, 0..40),
            cands in proptest::collection::vec(0u32..30, 1..10),
        ) {
            let plan = merge_dedup_sequence(&user, &cands);
            let set: std::collections::HashSet<u32> =
                user.iter().chain(cands.iter()).copied().collect();
            prop_assert_eq!(plan.tokens.len(), set.len());
            let unique: std::collections::HashSet<u32> = plan.tokens.iter().copied().collect();
            prop_assert_eq!(unique.len(), plan.tokens.len());
            for (i, &row) in plan.user_rows.iter().enumerate() {
                prop_assert_eq!(plan.tokens[row], user[i]);
            }
            for (k, &row) in plan.candidate_rows.iter().enumerate() {
                prop_assert_eq!(plan.tokens[row], cands[k]);
            }
        }
    }

    #[test]
    fn empty_corpus_gives_empty_index() {
        let model = GesrModel::new(small_config(), 3).unwrap();
        let index = precompute_item_cache(&[], &model).unwrap();
        assert!(index.is_empty());
        assert_eq!(index.checkpoint_version(), model.version().unwrap());
    }

    #[test]
    fn cached_vectors_equal_direct_item_tower_rows() {
        let (spec, data) = small_data(11, 6);
        let model = GesrModel::new(small_config(), 5).unwrap();
        let corpus = corpus_for(&data, &spec);
        assert!(corpus.len() > 20);
        let index = precompute_item_cache(&corpus, &model).unwrap();
        assert_eq!(index.len(), corpus.len());
        // Spot-check single-item direct evaluations against cached rows.
        for item in corpus.iter().step_by(corpus.len() / 10) {
            let inputs = item_input_matrix(
                std::slice::from_ref(item),
                model.config().item_input_dim,
            )
            .unwrap();
            let mut g = Graph::inference();
            let iv = g.input(inputs);
            let out = model.towers().item_forward(&mut g, &model.store, iv).unwrap();
            let direct = g.value(out).row(0).to_vec();
            let cached = &index.get(item.post_id).unwrap().vector;
            assert_eq!(&direct, cached, "post {}", item.post_id);
        }
    }

    #[test]
    fn rebuild_is_bit_identical() {
        let (spec, data) = small_data(2, 5);
        let model = GesrModel::new(small_config(), 9).unwrap();
        let corpus = corpus_for(&data, &spec);
        let a = precompute_item_cache(&corpus, &model).unwrap();
        let b = precompute_item_cache(&corpus, &model).unwrap();
        assert_eq!(a.sorted_entries(), b.sorted_entries());
        assert_eq!(a.checkpoint_version(), b.checkpoint_version());
    }

    #[test]
    fn duplicate_corpus_ids_are_rejected() {
        let spec = SyntheticSpec::desk_default();
        let model = GesrModel::new(small_config(), 1).unwrap();
        let corpus = vec![make_candidate(3, &spec), make_candidate(3, &spec)];
        assert!(matches!(
            precompute_item_cache(&corpus, &model),
            Err(GesrError::Input(_))
        ));
    }

    #[test]
    fn cached_scores_equal_direct_scores_for_every_variant() {
        let (spec, data) = small_data(4, 8);
        let base = small_config();
        for variant in ModelVariant::ALL {
            let model = GesrModel::new(variant.configure(&base), 13).unwrap();
            let corpus = corpus_for(&data, &spec);
            let index = precompute_item_cache(&corpus, &model).unwrap();
            for req in &data {
                let direct = model.model_forward(req).unwrap();
                let cached = score_request_cached(&model, &index, req).unwrap();
                let diff = direct.max_abs_diff(&cached).unwrap();
                assert_eq!(diff, 0.0, "{} diverged by {diff}", variant.name());
            }
        }
    }

    #[test]
    fn missing_candidate_is_a_cache_miss() {
        let (spec, data) = small_data(6, 4);
        let model = GesrModel::new(small_config(), 2).unwrap();
        let mut corpus = corpus_for(&data, &spec);
        let dropped = data[0].candidates[0].post_id;
        corpus.retain(|c| c.post_id != dropped);
        let index = precompute_item_cache(&corpus, &model).unwrap();
        let err = score_request_cached(&model, &index, &data[0]).unwrap_err();
        match err {
            GesrError::CacheMiss { post_id } => assert_eq!(post_id, dropped),
            other => panic!("expected CacheMiss, got {other}"),
        }
    }

    #[test]
    fn parameter_change_staleness_is_detected() {
        let (spec, data) = small_data(8, 4);
        let mut model = GesrModel::new(small_config(), 7).unwrap();
        let corpus = corpus_for(&data, &spec);
        let index = precompute_item_cache(&corpus, &model).unwrap();
        // Mutate one parameter, as training would, and refresh the hash.
        let id = model.store.ids().next().unwrap();
        model.store.get_mut(id).value.data_mut()[0] += 0.5;
        model.reset_version();
        let err = score_request_cached(&model, &index, &data[0]).unwrap_err();
        assert!(matches!(err, GesrError::StaleCache { .. }), "{err}");
    }

    #[test]
    fn throughput_report_is_consistent_across_modes() {
        let (spec, data) = small_data(12, 5);
        let model = GesrModel::new(
            ModelVariant::GesrBasic.configure(&small_config()),
            19,
        )
        .unwrap();
        let corpus = corpus_for(&data, &spec);
        let index = precompute_item_cache(&corpus, &model).unwrap();
        let cached = bench_throughput(&model, &index, &data, BenchMode::Cached).unwrap();
        let direct = bench_throughput(&model, &index, &data, BenchMode::Direct).unwrap();
        assert_eq!(cached.logit_checksum, direct.logit_checksum);
        for r in [&cached, &direct] {
            assert_eq!(r.requests, data.len());
            assert!(r.requests_per_second > 0.0);
            assert!(r.p50_ms <= r.p99_ms + 1e-12);
        }
        assert_eq!(cached.mode, "cached");
        assert_eq!(direct.mode, "direct");
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let sorted = vec![0.001, 0.002, 0.003, 0.004];
        assert!((percentile_ms(&sorted, 0.50) - 2.0).abs() < 1e-12);
        assert!((percentile_ms(&sorted, 0.99) - 4.0).abs() < 1e-12);
        assert!((percentile_ms(&sorted, 0.01) - 1.0).abs() < 1e-12);
    }
}
