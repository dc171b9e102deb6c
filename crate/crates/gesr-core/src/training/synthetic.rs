//! Synthetic ranking datasets with a planted, recoverable label mechanism.
//!
//! Tokens factor into (topic, author): `token = topic + topics * author`.
//! Each user has stable old interests and a handful of recent ones; every
//! request gets its own event stream whose early ~70% leans on the old
//! topics and whose tail leans on the recent ones. Each candidate's label
//! is drawn from
//!
//! ```text
//! P(y=1) = sigmoid(a * min(overlap, M)/M + b * recency_affinity - c)
//! ```
//!
//! where `overlap` counts history events sharing the candidate's topic
//! (exactly the quantity hard matching can recover) and `recency_affinity`
//! is a decay-weighted match rate dominated by the newest events (the
//! quantity target-aware attention over the ordered sequence can recover
//! but an order-blind summary cannot). Setting `b > a` plants more signal
//! in recency than in raw overlap, so ablating target awareness costs more
//! than ablating hard matching.
//!
//! A third of the candidates are exact re-surfaces of recent history
//! tokens (re-engagement traffic): those carry high affinity and modest
//! overlap, while old-topic candidates carry the opposite mix. The two
//! planted quantities therefore decorrelate across the candidate pool and
//! neither component's contribution can be proxied by the other.

use rand::Rng;
use rand::SeedableRng as _;
use rand_chacha::ChaCha20Rng;

use crate::error::{GesrError, Result};
use crate::features::{Candidate, Event, RankingRequest, TokenId};
use crate::numerics::graph::sigmoid;

/// Weight decay per step of history age in `recency_affinity`: the newest
/// event has weight 1, the one before it 0.8, and so on.
pub const RECENCY_DECAY: f64 = 0.8;

/// Width of the dense item-tower input vector every generated candidate
/// carries.
pub const ITEM_INPUT_DIM: usize = 8;

/// Per-task label mechanism: logit = overlap_weight * overlap_fraction
/// + recency_weight * recency_affinity - bias.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskMechanism {
    pub overlap_weight: f64,
    pub recency_weight: f64,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub vocab_size: u32,
    /// Topic count; `vocab_size / topics` is the author count.
    pub topics: u32,
    /// Modulus applied to the author index when writing HMA feature slot 1,
    /// mirroring the model-side extractor.
    pub author_feature_modulus: u32,
    pub users: usize,
    pub requests_per_user: usize,
    /// History length per request, drawn uniformly from this inclusive range.
    pub events_min: usize,
    pub events_max: usize,
    /// Candidates per request.
    pub candidates: usize,
    /// M: overlap saturation cap in the label mechanism.
    pub overlap_cap: u32,
    pub tasks: Vec<TaskMechanism>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Companion to the desk model configuration: the 50-topic x 40-author
    /// vocabulary of 2000 tokens, two tasks, and recency weighted above
    /// overlap. The weights are strong enough that labels are dominated by
    /// the planted quantities rather than Bernoulli noise; the biases put
    /// both base rates in the 0.2-0.35 band.
    pub fn desk_default() -> Self {
        SyntheticSpec {
            vocab_size: 2000,
            topics: 50,
            author_feature_modulus: 40,
            users: 500,
            requests_per_user: 4,
            events_min: 12,
            events_max: 40,
            candidates: 8,
            overlap_cap: 16,
            tasks: vec![
                TaskMechanism {
                    overlap_weight: 3.0,
                    recency_weight: 6.0,
                    bias: 2.8,
                },
                TaskMechanism {
                    overlap_weight: 2.4,
                    recency_weight: 4.5,
                    bias: 2.4,
                },
            ],
            seed: 0,
        }
    }

    pub fn num_requests(&self) -> usize {
        self.users * self.requests_per_user
    }

    pub fn authors(&self) -> u32 {
        self.vocab_size / self.topics
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics == 0 || self.vocab_size == 0 || self.vocab_size % self.topics != 0 {
            return Err(GesrError::Config(format!(
                "vocab_size {} must be a positive multiple of topics {}",
                self.vocab_size, self.topics
            )));
        }
        if self.author_feature_modulus == 0 {
            return Err(GesrError::Config(
                "author_feature_modulus must be positive".to_string(),
            ));
        }
        if self.users == 0 || self.requests_per_user == 0 {
            return Err(GesrError::Config(
                "users and requests_per_user must be positive".to_string(),
            ));
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return Err(GesrError::Config(format!(
                "event length range [{}, {}] is invalid",
                self.events_min, self.events_max
            )));
        }
        if self.candidates == 0 {
            return Err(GesrError::Config("candidates must be positive".to_string()));
        }
        if self.candidates as u32 > self.vocab_size {
            return Err(GesrError::Config(format!(
                "cannot draw {} distinct candidates from {} tokens",
                self.candidates, self.vocab_size
            )));
        }
        if self.overlap_cap == 0 {
            return Err(GesrError::Config("overlap_cap must be positive".to_string()));
        }
        if self.tasks.is_empty() {
            return Err(GesrError::Config("at least one task required".to_string()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            for (name, v) in [
                ("overlap_weight", t.overlap_weight),
                ("recency_weight", t.recency_weight),
                ("bias", t.bias),
            ] {
                if !v.is_finite() {
                    return Err(GesrError::Config(format!(
                        "task {i} {name} must be finite"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// splitmix64: cheap, well-distributed stream derivation so each (seed,
/// user, request) triple gets an independent deterministic RNG.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn derive_rng(parts: &[u64]) -> ChaCha20Rng {
    let mut acc = 0x6A09E667F3BCC908;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    ChaCha20Rng::seed_from_u64(acc)
}

/// The planted quantities the mechanism feeds through the sigmoid:
/// (capped overlap fraction, recency affinity), both in [0, 1].
pub fn mechanism_features(
    events: &[Event],
    candidate_topic: u32,
    topics: u32,
    cap: u32,
) -> (f64, f64) {
    let mut overlap = 0u32;
    let mut weighted_match = 0.0;
    let mut weight_sum = 0.0;
    let n = events.len();
    for (i, e) in events.iter().enumerate() {
        let matches = e.token % topics == candidate_topic;
        overlap += matches as u32;
        let w = RECENCY_DECAY.powi((n - 1 - i) as i32);
        weight_sum += w;
        if matches {
            weighted_match += w;
        }
    }
    let overlap_frac = f64::from(overlap.min(cap)) / f64::from(cap);
    let affinity = if weight_sum > 0.0 {
        weighted_match / weight_sum
    } else {
        0.0
    };
    (overlap_frac, affinity)
}

/// Dense item-tower inputs, a pure function of the post id (so a cached
/// item vector and a freshly computed one always see identical inputs).
/// Angles expose topic and author smoothly; the last-but-one entry is a
/// stable pseudo-random popularity scalar.
pub fn item_tower_inputs(post_id: TokenId, spec: &SyntheticSpec) -> Vec<f64> {
    let topic = post_id % spec.topics;
    let author = (post_id / spec.topics) % spec.authors().max(1);
    let t = f64::from(topic) / f64::from(spec.topics);
    let a = f64::from(author) / f64::from(spec.authors().max(1));
    let tau = std::f64::consts::TAU;
    let mut rng = derive_rng(&[spec.seed, 0xA11CE, u64::from(post_id)]);
    let popularity: f64 = rng.gen_range(0.0..1.0);
    vec![
        t,
        a,
        (tau * t).sin(),
        (tau * t).cos(),
        (tau * a).sin(),
        (tau * a).cos(),
        popularity,
        1.0,
    ]
}

/// Builds the candidate record for a post id: HMA feature slots filled with
/// the same (topic, author-mod) values the user-side extractors produce.
pub fn make_candidate(post_id: TokenId, spec: &SyntheticSpec) -> Candidate {
    Candidate {
        post_id,
        item_features: vec![
            post_id % spec.topics,
            (post_id / spec.topics) % spec.author_feature_modulus,
        ],
        item_tower_inputs: item_tower_inputs(post_id, spec),
    }
}

struct UserProfile {
    old_topics: Vec<u32>,
    recent_topics: Vec<u32>,
    authors: Vec<u32>,
}

fn sample_distinct(rng: &mut ChaCha20Rng, count: usize, bound: u32) -> Vec<u32> {
    let count = count.min(bound as usize);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = rng.gen_range(0..bound);
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn user_profile(spec: &SyntheticSpec, user_id: u64) -> UserProfile {
    let mut rng = derive_rng(&[spec.seed, 0x0F17E, user_id]);
    UserProfile {
        old_topics: sample_distinct(&mut rng, 3, spec.topics),
        recent_topics: sample_distinct(&mut rng, 2, spec.topics),
        authors: sample_distinct(&mut rng, 4, spec.authors()),
    }
}

fn sample_token(rng: &mut ChaCha20Rng, spec: &SyntheticSpec, topic: u32) -> TokenId {
    let author = rng.gen_range(0..spec.authors());
    topic + spec.topics * author
}

/// One request's event stream of `len` interactions. The first ~70% lean
/// on the user's old topics, the tail on the recent ones, so the
/// informative part of the sequence sits where the recency decay looks.
/// Streams are drawn per request (not shared prefixes) so every request
/// carries a live recent segment.
fn request_stream(
    spec: &SyntheticSpec,
    profile: &UserProfile,
    user_id: u64,
    request: u64,
    len: usize,
) -> Vec<Event> {
    let mut rng = derive_rng(&[spec.seed, 0x57AEA, user_id, request]);
    let cut = len * 7 / 10;
    let mut events = Vec::with_capacity(len);
    for p in 0..len {
        let pool = if p < cut {
            &profile.old_topics
        } else {
            &profile.recent_topics
        };
        let topic = if rng.gen_bool(0.8) {
            pool[rng.gen_range(0..pool.len())]
        } else {
            rng.gen_range(0..spec.topics)
        };
        let author = if rng.gen_bool(0.5) {
            profile.authors[rng.gen_range(0..profile.authors.len())]
        } else {
            rng.gen_range(0..spec.authors())
        };
        let mut e = Event::new(topic + spec.topics * author, p as i64 * 60, rng.gen_range(0..6));
        if rng.gen_bool(0.15) {
            e.watch_ratio = Some(rng.gen_range(0.0..1.0));
        }
        events.push(e);
    }
    events
}

/// Candidate mix: 35% exact re-surfaces of recent history tokens
/// (re-engagement traffic, high affinity), 25% old-interest topics under a
/// fresh author (high overlap, low affinity), 40% random.
fn sample_candidates(
    rng: &mut ChaCha20Rng,
    spec: &SyntheticSpec,
    profile: &UserProfile,
    events: &[Event],
) -> Vec<Candidate> {
    let recent_tokens: Vec<TokenId> = events.iter().rev().take(8).map(|e| e.token).collect();
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(spec.candidates);
    while out.len() < spec.candidates {
        let roll: f64 = rng.gen_range(0.0..1.0);
        let mut post_id = if roll < 0.35 && !recent_tokens.is_empty() {
            recent_tokens[rng.gen_range(0..recent_tokens.len())]
        } else {
            let topic = if roll < 0.60 {
                profile.old_topics[rng.gen_range(0..profile.old_topics.len())]
            } else {
                rng.gen_range(0..spec.topics)
            };
            sample_token(rng, spec, topic)
        };
        if seen.contains(&post_id) {
            // Deterministic fallback: walk the vocabulary until a free id
            // appears. Rare at desk scale (n << vocab).
            while seen.contains(&post_id) {
                post_id = (post_id + 1) % spec.vocab_size;
            }
        }
        seen.insert(post_id);
        out.push(make_candidate(post_id, spec));
    }
    out
}

fn label_candidates(
    rng: &mut ChaCha20Rng,
    spec: &SyntheticSpec,
    events: &[Event],
    candidates: &[Candidate],
) -> Vec<Vec<u8>> {
    candidates
        .iter()
        .map(|c| {
            let topic = c.post_id % spec.topics;
            let (overlap_frac, affinity) =
                mechanism_features(events, topic, spec.topics, spec.overlap_cap);
            spec.tasks
                .iter()
                .map(|t| {
                    let logit = t.overlap_weight * overlap_frac
                        + t.recency_weight * affinity
                        - t.bias;
                    u8::from(rng.gen_bool(sigmoid(logit)))
                })
                .collect()
        })
        .collect()
}

/// Generates the full corpus: `users * requests_per_user` requests, byte
/// identical for identical specs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<RankingRequest>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.num_requests());
    for user_id in 0..spec.users as u64 {
        let profile = user_profile(spec, user_id);
        for r in 0..spec.requests_per_user as u64 {
            let mut rng = derive_rng(&[spec.seed, 0x2E9, user_id, r]);
            let len = rng.gen_range(spec.events_min..=spec.events_max);
            let events = request_stream(spec, &profile, user_id, r, len);
            let candidates = sample_candidates(&mut rng, spec, &profile, &events);
            let labels = label_candidates(&mut rng, spec, &events, &candidates);
            // Context tokens encode the user's recent leanings on the
            // request side (RO features, constant across candidates).
            let context: Vec<TokenId> = profile
                .recent_topics
                .iter()
                .zip(&profile.authors)
                .map(|(&t, &a)| t + spec.topics * a)
                .collect();
            let req = RankingRequest {
                user_id,
                user_events: events,
                user_context_tokens: context,
                candidates,
                labels: Some(labels),
            };
            req.validate(spec.tasks.len())?;
            out.push(req);
        }
    }
    Ok(out)
}
