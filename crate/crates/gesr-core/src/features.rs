//! Input types and feature preparation: engagement fusion, derived signals,
//! temporal truncation, stochastic length, and query construction.
//!
//! RO (read-once) features are shared by every candidate of a request; NRO
//! (non-read-once) features vary per candidate. Everything here is a pure
//! function over immutable inputs.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesrError, Result};
use crate::hma::HmaPairSpec;

pub type TokenId = u32;
pub type EngagementType = u16;

/// Engagement id assigned to synthesized "skip" events. Deliberately far
/// outside the raw enum range so no fusion table can produce it.
pub const SKIP_ENGAGEMENT: EngagementType = 999;

/// One user-history interaction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub token: TokenId,
    pub timestamp: i64,
    pub engagement_type: EngagementType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watch_ratio: Option<f64>,
}

impl Event {
    pub fn new(token: TokenId, timestamp: i64, engagement_type: EngagementType) -> Self {
        Event {
            token,
            timestamp,
            engagement_type,
            watch_ratio: None,
        }
    }
}

/// One scoring candidate: its post id (a token in the shared vocabulary),
/// the id-valued feature slots HMA matches against, and the dense inputs
/// consumed by the item tower.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub post_id: TokenId,
    pub item_features: Vec<u32>,
    pub item_tower_inputs: Vec<f64>,
}

/// A full ranking request: one user, n candidates, optional supervision.
///
/// `user_id` exists so datasets can be split into train/eval partitions by
/// user; it feeds nothing in the model itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRequest {
    pub user_id: u64,
    pub user_events: Vec<Event>,
    pub user_context_tokens: Vec<TokenId>,
    pub candidates: Vec<Candidate>,
    /// labels[candidate][task] in {0, 1}, when supervision is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Vec<u8>>>,
}

impl RankingRequest {
    /// Structural checks shared by training, scoring, and file loading.
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(GesrError::Input("request has no candidates".to_string()));
        }
        for w in self.user_events.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(GesrError::Input(format!(
                    "event timestamps decrease: {} then {}",
                    w[0].timestamp, w[1].timestamp
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.post_id) {
                return Err(GesrError::Input(format!(
                    "duplicate candidate post_id {}",
                    c.post_id
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.candidates.len() {
                return Err(GesrError::Input(format!(
                    "{} label rows for {} candidates",
                    labels.len(),
                    self.candidates.len()
                )));
            }
            for row in labels {
                if row.len() != tasks {
                    return Err(GesrError::Input(format!(
                        "label row has {} tasks, expected {tasks}",
                        row.len()
                    )));
                }
                if row.iter().any(|&y| y > 1) {
                    return Err(GesrError::Input("labels must be 0 or 1".to_string()));
                }
            }
        }
        Ok(())
    }
}

/// How self-attention output feeds cross attention: `Parallel` gives RO
/// cross attention the raw embedded history, `Cascaded` gives it U_self.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stacking {
    Parallel,
    Cascaded,
}

/// Hyperparameters of the mixture-of-attention input pipeline and modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoAConfig {
    pub vocab_size: u32,
    /// N: maximum user-history length after preprocessing.
    pub seq_len: usize,
    /// D: shared embedding width.
    pub embed_dim: usize,
    pub heads: usize,
    pub self_attn_layers: usize,
    /// Optional temporal cutoff in seconds; None keeps all events.
    pub cutoff_window: Option<i64>,
    /// Watch-ratio threshold below which a skip event is synthesized.
    pub skip_threshold: f64,
    pub hma_pairs: Vec<HmaPairSpec>,
    /// D_h: width of one HMA embedding row.
    pub hma_embed_dim: usize,
    /// i: number of RO cross-attention seeds.
    pub ro_seeds: usize,
    /// j: number of NRO cross-attention query slots.
    pub nro_slots: usize,
    pub stacking: Stacking,
    /// Raw engagement enum -> fused composite enum. Identity when absent.
    pub engagement_fusion: BTreeMap<EngagementType, EngagementType>,
}

impl MoAConfig {
    /// Small configuration every test and CLI default builds from:
    /// N=64, D=32, 2 heads, 2 layers, P=2 HMA pairs (topic and author
    /// overlap against a 50-topic x 40-author vocabulary layout), M=16.
    pub fn desk_default() -> Self {
        MoAConfig {
            vocab_size: 2000,
            seq_len: 64,
            embed_dim: 32,
            heads: 2,
            self_attn_layers: 2,
            cutoff_window: None,
            skip_threshold: 0.2,
            hma_pairs: vec![
                HmaPairSpec {
                    pair_index: 0,
                    user_extractor: crate::hma::UserFeatureExtractor::TokenMod { modulus: 50 },
                    item_feature_slot: 0,
                    cap: 16,
                },
                HmaPairSpec {
                    pair_index: 1,
                    user_extractor: crate::hma::UserFeatureExtractor::TokenDivMod {
                        divisor: 50,
                        modulus: 40,
                    },
                    item_feature_slot: 1,
                    cap: 16,
                },
            ],
            hma_embed_dim: 8,
            ro_seeds: 2,
            nro_slots: 2,
            stacking: Stacking::Parallel,
            engagement_fusion: BTreeMap::from([(4, 1), (5, 1)]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(GesrError::Config("vocab_size must be positive".to_string()));
        }
        if self.seq_len == 0 {
            return Err(GesrError::Config("seq_len must be >= 1".to_string()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(GesrError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.self_attn_layers == 0 {
            return Err(GesrError::Config("self_attn_layers must be >= 1".to_string()));
        }
        if !(0.0..=1.0).contains(&self.skip_threshold) {
            return Err(GesrError::Config(format!(
                "skip_threshold {} outside [0, 1]",
                self.skip_threshold
            )));
        }
        if let Some(w) = self.cutoff_window {
            if w < 0 {
                return Err(GesrError::Config(format!("negative cutoff_window {w}")));
            }
        }
        if self.ro_seeds == 0 {
            return Err(GesrError::Config("ro_seeds must be >= 1".to_string()));
        }
        if self.nro_slots == 0 {
            return Err(GesrError::Config("nro_slots must be >= 1".to_string()));
        }
        if !self.hma_pairs.is_empty() && self.hma_embed_dim == 0 {
            return Err(GesrError::Config("hma_embed_dim must be >= 1".to_string()));
        }
        let mut indices: Vec<usize> = self.hma_pairs.iter().map(|p| p.pair_index).collect();
        indices.sort_unstable();
        for (want, got) in indices.iter().enumerate() {
            if want != *got {
                return Err(GesrError::Config(format!(
                    "hma pair indices must cover 0..P exactly, got {indices:?}"
                )));
            }
        }
        for p in &self.hma_pairs {
            if p.cap == 0 {
                return Err(GesrError::Config(format!(
                    "hma pair {} has cap 0",
                    p.pair_index
                )));
            }
            p.user_extractor.validate()?;
        }
        if let Some(first) = self.hma_pairs.first() {
            if self.hma_pairs.iter().any(|p| p.cap != first.cap) {
                return Err(GesrError::Config(
                    "all hma pairs must share one cap".to_string(),
                ));
            }
        }
        // The fusion table must resolve without cycles so fuse_and_dedup
        // stays idempotent.
        for &start in self.engagement_fusion.keys() {
            let mut cur = start;
            for _ in 0..=self.engagement_fusion.len() {
                match self.engagement_fusion.get(&cur) {
                    Some(&next) if next == cur => break,
                    Some(&next) => cur = next,
                    None => break,
                }
            }
            if self.engagement_fusion.get(&cur).map(|&n| n != cur) == Some(true) {
                return Err(GesrError::Config(format!(
                    "engagement_fusion contains a cycle reachable from {start}"
                )));
            }
        }
        Ok(())
    }
}

/// Resolves fusion chains ({a->b, b->c} behaves as {a->c, b->c}) so the op
/// is idempotent for any acyclic table.
fn resolve_fused(map: &BTreeMap<EngagementType, EngagementType>, raw: EngagementType) -> EngagementType {
    let mut cur = raw;
    for _ in 0..=map.len() {
        match map.get(&cur) {
            Some(&next) if next != cur => cur = next,
            _ => return cur,
        }
    }
    cur
}

/// Maps raw engagement enums onto fused composite enums, then collapses
/// consecutive (token, engagement) duplicates keeping the most recent
/// event. Order is preserved.
pub fn fuse_and_dedup(
    events: &[Event],
    fusion: &BTreeMap<EngagementType, EngagementType>,
) -> Vec<Event> {
    let mut out: Vec<Event> = Vec::with_capacity(events.len());
    for e in events {
        let mut fused = *e;
        fused.engagement_type = resolve_fused(fusion, e.engagement_type);
        match out.last_mut() {
            Some(prev)
                if prev.token == fused.token && prev.engagement_type == fused.engagement_type =>
            {
                // Same consecutive interaction: keep the later one.
                *prev = fused;
            }
            _ => out.push(fused),
        }
    }
    out
}

/// Inserts a synthetic skip event after every event whose watch_ratio is
/// present and below the configured threshold. Never removes events.
pub fn derive_signals(events: &[Event], cfg: &MoAConfig) -> Vec<Event> {
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        out.push(*e);
        if let Some(w) = e.watch_ratio {
            if w < cfg.skip_threshold {
                out.push(Event {
                    token: e.token,
                    timestamp: e.timestamp,
                    engagement_type: SKIP_ENGAGEMENT,
                    watch_ratio: None,
                });
            }
        }
    }
    out
}

/// Drops events older than (latest timestamp - cutoff_window), then keeps
/// the most recent `seq_len` events. Order preserved.
pub fn temporal_truncate(events: &[Event], cfg: &MoAConfig) -> Vec<Event> {
    let windowed: Vec<Event> = match (cfg.cutoff_window, events.last()) {
        (Some(w), Some(last)) => {
            let threshold = last.timestamp - w;
            events.iter().copied().filter(|e| e.timestamp >= threshold).collect()
        }
        _ => events.to_vec(),
    };
    let skip = windowed.len().saturating_sub(cfg.seq_len);
    windowed[skip..].to_vec()
}

/// Uniformly subsamples down to `target_len` events without replacement,
/// preserving temporal order. Sequences already short enough pass through
/// unchanged. Deterministic in (events, target_len, rng_seed).
pub fn stochastic_length(events: &[Event], target_len: usize, rng_seed: u64) -> Result<Vec<Event>> {
    if target_len == 0 {
        return Err(GesrError::Contract(
            "stochastic_length target_len must be >= 1".to_string(),
        ));
    }
    if events.len() <= target_len {
        return Ok(events.to_vec());
    }
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut keep = rand::seq::index::sample(&mut rng, events.len(), target_len).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| events[i]).collect())
}

/// The full preprocessing chain: fuse raw enums, derive skip signals, then
/// truncate. Truncation runs last so the output length is guaranteed to be
/// at most `seq_len` even after skip insertion.
pub fn preprocess_events(events: &[Event], cfg: &MoAConfig) -> Vec<Event> {
    let fused = fuse_and_dedup(events, &cfg.engagement_fusion);
    let derived = derive_signals(&fused, cfg);
    temporal_truncate(&derived, cfg)
}

/// Builds the structured queries: RO list = user context tokens, NRO list =
/// one singleton [post_id] per candidate. Rejects out-of-vocabulary ids.
pub fn build_queries(
    request: &RankingRequest,
    cfg: &MoAConfig,
) -> Result<(Vec<TokenId>, Vec<Vec<TokenId>>)> {
    for &t in &request.user_context_tokens {
        if t >= cfg.vocab_size {
            return Err(GesrError::Input(format!(
                "context token {t} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
    }
    for c in &request.candidates {
        if c.post_id >= cfg.vocab_size {
            return Err(GesrError::Input(format!(
                "candidate post_id {} outside vocabulary of {}",
                c.post_id, cfg.vocab_size
            )));
        }
    }
    let ro = request.user_context_tokens.clone();
    let nro = request.candidates.iter().map(|c| vec![c.post_id]).collect();
    Ok((ro, nro))
}
