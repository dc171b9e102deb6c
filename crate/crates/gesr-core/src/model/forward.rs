use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attention::{
    build_causal_mask, build_target_aware_mask, nro_cross_attention, ro_cross_attention,
    self_attention_forward, NroCrossParams, RoCrossParams, SelfAttentionStack,
};
use crate::error::{GesrError, Result};
use crate::features::{
    build_queries, preprocess_events, stochastic_length, Event, RankingRequest, Stacking, TokenId,
};
use crate::hma::{hma_forward_from_ids, HmaParams};
use crate::numerics::{DenseMatrix, Graph, ParamId, ParamStore, Var};

use super::config::ModelConfig;
use super::mlpg::{BranchKind, BranchSpec, Mlpg, ZLayout, ZSegment, MOA_SEGMENTS};
use super::two_tower::{item_input_matrix, tower_logits, TwoTowerParams};

/// Engagement embeddings live in a small fixed table; ids index it modulo
/// this row count, so distinct engagement enums stay distinguishable as
/// long as they stay below it.
pub const ENGAGEMENT_TABLE_ROWS: usize = 32;

/// A ranking request after preprocessing: the event sequence is fused,
/// skip-derived, truncated (and optionally length-sampled), and every id
/// is validated against the vocabulary.
pub struct PreparedRequest<'a> {
    pub request: &'a RankingRequest,
    pub events: Vec<Event>,
    pub ro_tokens: Vec<TokenId>,
}

impl<'a> PreparedRequest<'a> {
    pub fn candidates(&self) -> &[crate::features::Candidate] {
        &self.request.candidates
    }

    pub fn num_candidates(&self) -> usize {
        self.request.candidates.len()
    }
}

/// Where candidate item-side inputs come from during scoring.
pub enum ItemSource<'a> {
    /// Run the item tower on the request's dense inputs and read HMA ids
    /// from the candidates' feature slots.
    Direct,
    /// Inject precomputed item-tower outputs and HMA ids (the serving
    /// cache), plus the merged-dedup token plan: `unique_tokens` holds
    /// each distinct token's embedding row once, and the position slices
    /// map events and candidates back into it.
    Cached {
        item_vecs: &'a DenseMatrix,
        hma_ids: &'a [Vec<u32>],
        unique_tokens: &'a [usize],
        event_positions: &'a [usize],
        candidate_positions: &'a [usize],
    },
}

/// Attention-side outputs of one forward pass, kept as graph handles so
/// tests and callers can inspect intermediate blocks.
pub struct MoaBlocks {
    pub t_match: Option<Var>,
    pub t_self: Option<Var>,
    pub t_cross: Option<Var>,
    pub u_cross: Option<Var>,
}

/// Extracted block values (matrices) for callers outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct MoAOutput {
    pub t_match: Option<DenseMatrix>,
    pub t_self: Option<DenseMatrix>,
    pub t_cross: Option<DenseMatrix>,
    pub u_cross: Option<DenseMatrix>,
}

pub struct ForwardArtifacts {
    /// Final per-candidate, per-task logits (n x tasks).
    pub logits: Var,
    /// The tower-only part of the logits; the full logits are always
    /// tower_logits + scoring-branch output (additive wiring).
    pub tower_logits: Var,
    pub blocks: MoaBlocks,
}

/// A built model: configuration plus every registered parameter and the
/// wiring between them. All scoring paths (training, direct inference,
/// cached serving) go through `build_logits` so they share one op order.
pub struct GesrModel {
    config: ModelConfig,
    seed: u64,
    pub store: ParamStore,
    shared_table: ParamId,
    pos_table: Option<ParamId>,
    target_pos: Option<ParamId>,
    eng_table: Option<ParamId>,
    towers: TwoTowerParams,
    hma: Option<HmaParams>,
    stack: Option<SelfAttentionStack>,
    ro: Option<RoCrossParams>,
    nro: Option<NroCrossParams>,
    /// Zero-initialized projection mixing T_match into the NRO queries;
    /// starting at zero keeps the enrichment neutral until trained.
    nro_enrich_w: Option<ParamId>,
    layout: Option<ZLayout>,
    scoring: Option<Mlpg>,
    version: OnceLock<String>,
}

impl GesrModel {
    /// Builds and initializes a model. The same (config, seed) always
    /// produces identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<GesrModel> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let d = config.moa.embed_dim;
        let comp = config.components;

        let shared_table =
            store.register_glorot("embed.shared", config.moa.vocab_size as usize, d, &mut rng)?;
        let (pos_table, target_pos, eng_table) = if comp.has_stack() {
            (
                Some(store.register_glorot("embed.pos", config.moa.seq_len, d, &mut rng)?),
                Some(store.register_glorot("embed.target_pos", 1, d, &mut rng)?),
                Some(store.register_glorot(
                    "embed.engagement",
                    ENGAGEMENT_TABLE_ROWS,
                    d,
                    &mut rng,
                )?),
            )
        } else {
            (None, None, None)
        };

        let towers = TwoTowerParams::register(&mut store, &config, &mut rng)?;

        let hma = if comp.hma {
            Some(HmaParams::register(
                &mut store,
                &config.moa.hma_pairs,
                config.moa.hma_embed_dim,
                &config.hma_head_hidden,
                config.hma_out_dim,
                &mut rng,
            )?)
        } else {
            None
        };

        let stack = if comp.has_stack() {
            Some(SelfAttentionStack::register(
                &mut store,
                "self_attn",
                d,
                config.moa.heads,
                config.moa.self_attn_layers,
                &mut rng,
            )?)
        } else {
            None
        };

        let ro = if comp.ro_cross {
            Some(RoCrossParams::register(
                &mut store,
                "ro",
                config.moa.ro_seeds,
                d,
                &mut rng,
            )?)
        } else {
            None
        };

        let nro = if comp.nro_cross {
            Some(NroCrossParams::register(
                &mut store,
                "nro",
                config.moa.nro_slots,
                d,
                &mut rng,
            )?)
        } else {
            None
        };

        let nro_enrich_w = if comp.nro_cross && comp.hma {
            Some(store.register_zeros("nro.enrich_t_match", config.hma_out_dim, d)?)
        } else {
            None
        };

        let (layout, scoring) = if comp.any_moa() {
            let w = config.tower_out_width();
            let mut parts = vec![
                (ZSegment::UserTower, w),
                (ZSegment::ItemTower, w),
                (ZSegment::TowerProduct, w),
            ];
            if comp.hma {
                parts.push((ZSegment::TMatch, config.hma_out_dim));
            }
            if comp.has_stack() {
                parts.push((ZSegment::TSelf, d));
            }
            if let Some(nro) = &nro {
                parts.push((ZSegment::TCross, nro.out_dim()));
            }
            if let Some(ro) = &ro {
                parts.push((ZSegment::UCross, ro.out_dim()));
            }
            let layout = ZLayout::new(&parts)?;
            let specs = if comp.mlpg {
                super::mlpg::default_branch_specs(&layout, &config.mlpg_hidden)
            } else {
                // Basic variants score with one linear branch over the
                // attention blocks only; the tower part of z stays with
                // the dot-product path, keeping the wiring additive.
                let selector: Vec<ZSegment> = MOA_SEGMENTS
                    .iter()
                    .copied()
                    .filter(|s| layout.contains(*s))
                    .collect();
                vec![BranchSpec {
                    kind: BranchKind::Linear,
                    selector,
                    hidden: vec![],
                }]
            };
            let scoring = Mlpg::register(&mut store, "score", &layout, &specs, config.tasks, &mut rng)?;
            (Some(layout), Some(scoring))
        } else {
            (None, None)
        };

        Ok(GesrModel {
            config,
            seed,
            store,
            shared_table,
            pos_table,
            target_pos,
            eng_table,
            towers,
            hma,
            stack,
            ro,
            nro,
            nro_enrich_w,
            layout,
            scoring,
            version: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hma(&self) -> Option<&HmaParams> {
        self.hma.as_ref()
    }

    pub fn shared_table(&self) -> ParamId {
        self.shared_table
    }

    pub fn layout(&self) -> Option<&ZLayout> {
        self.layout.as_ref()
    }

    pub fn scoring(&self) -> Option<&Mlpg> {
        self.scoring.as_ref()
    }

    pub fn towers(&self) -> &TwoTowerParams {
        &self.towers
    }

    /// Validates and preprocesses a request for this model's config.
    pub fn prepare<'a>(&self, request: &'a RankingRequest) -> Result<PreparedRequest<'a>> {
        self.prepare_inner(request, None)
    }

    /// Like `prepare`, but additionally samples the preprocessed sequence
    /// down to `target_len` (stochastic length regularization).
    pub fn prepare_stochastic<'a>(
        &self,
        request: &'a RankingRequest,
        target_len: usize,
        sl_seed: u64,
    ) -> Result<PreparedRequest<'a>> {
        self.prepare_inner(request, Some((target_len, sl_seed)))
    }

    fn prepare_inner<'a>(
        &self,
        request: &'a RankingRequest,
        sl: Option<(usize, u64)>,
    ) -> Result<PreparedRequest<'a>> {
        request.validate(self.config.tasks)?;
        let vocab = self.config.moa.vocab_size;
        for e in &request.user_events {
            if e.token >= vocab {
                return Err(GesrError::Input(format!(
                    "event token {} outside vocabulary of {vocab}",
                    e.token
                )));
            }
        }
        // Also validates context tokens and candidate post ids against the
        // vocabulary.
        let (ro_tokens, _) = build_queries(request, &self.config.moa)?;
        let mut events = preprocess_events(&request.user_events, &self.config.moa);
        if let Some((target, seed)) = sl {
            events = stochastic_length(&events, target, seed)?;
        }
        Ok(PreparedRequest {
            request,
            events,
            ro_tokens,
        })
    }

    /// Scores a prepared request inside the caller's graph. Training uses
    /// a recording graph; inference and serving use non-recording graphs
    /// with the identical op sequence. The store is passed explicitly
    /// (normally `&self.store`) so gradient checking can probe perturbed
    /// copies.
    pub fn build_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &PreparedRequest,
        source: ItemSource,
    ) -> Result<ForwardArtifacts> {
        let cfg = &self.config;
        let comp = cfg.components;
        let d = cfg.moa.embed_dim;
        let n = prep.num_candidates();
        let len = prep.events.len();
        let event_tokens: Vec<u32> = prep.events.iter().map(|e| e.token).collect();

        // User tower runs per request in every path.
        let user_vec = self.towers.user_forward(
            g,
            store,
            self.shared_table,
            &event_tokens,
            &prep.request.user_context_tokens,
            d,
        )?;

        let item_vecs = match &source {
            ItemSource::Direct => {
                let inputs = item_input_matrix(prep.candidates(), cfg.item_input_dim)?;
                let iv = g.input(inputs);
                self.towers.item_forward(g, store, iv)?
            }
            ItemSource::Cached { item_vecs, .. } => {
                if item_vecs.dims() != (n, cfg.tower_out_width()) {
                    return Err(GesrError::dim(
                        "build_logits",
                        format!(
                            "cached item vectors are {}x{}, expected {}x{}",
                            item_vecs.rows(),
                            item_vecs.cols(),
                            n,
                            cfg.tower_out_width()
                        ),
                    ));
                }
                g.input((*item_vecs).clone())
            }
        };

        let (tt_logits, user_rows, prod) =
            tower_logits(g, user_vec, item_vecs, n, cfg.tasks, cfg.tower_dim)?;

        if !comp.any_moa() {
            return Ok(ForwardArtifacts {
                logits: tt_logits,
                tower_logits: tt_logits,
                blocks: MoaBlocks {
                    t_match: None,
                    t_self: None,
                    t_cross: None,
                    u_cross: None,
                },
            });
        }

        // Token embeddings for the attention paths. The cached plan reads
        // each distinct token once and copies rows back into sequence
        // order; row copies are exact, so both plans yield identical
        // matrices.
        let (u_tok, t_tok) = match &source {
            ItemSource::Direct => {
                let ev_rows: Vec<usize> = event_tokens.iter().map(|&t| t as usize).collect();
                let cand_rows: Vec<usize> = prep
                    .candidates()
                    .iter()
                    .map(|c| c.post_id as usize)
                    .collect();
                let u = g.gather(store, self.shared_table, &ev_rows)?;
                let t = g.gather(store, self.shared_table, &cand_rows)?;
                (u, t)
            }
            ItemSource::Cached {
                unique_tokens,
                event_positions,
                candidate_positions,
                ..
            } => {
                if event_positions.len() != len || candidate_positions.len() != n {
                    return Err(GesrError::dim(
                        "build_logits",
                        format!(
                            "merged plan covers {} events / {} candidates, request has {len} / {n}",
                            event_positions.len(),
                            candidate_positions.len()
                        ),
                    ));
                }
                let uniq = g.gather(store, self.shared_table, unique_tokens)?;
                let u = g.select_rows(uniq, event_positions)?;
                let t = g.select_rows(uniq, candidate_positions)?;
                (u, t)
            }
        };

        // Positions are indexed by age (0 = newest event) so the same table
        // row always means "k steps before now" no matter how long this
        // request's history is; recency weighting is then a property of a
        // fixed set of rows rather than of a per-length index pattern.
        let pos_rows: Vec<usize> = (0..len).map(|p| len - 1 - p).collect();
        let pos = g.gather(store, self.pos_table.expect("stack implies tables"), &pos_rows)?;
        let eng_rows: Vec<usize> = prep
            .events
            .iter()
            .map(|e| e.engagement_type as usize % ENGAGEMENT_TABLE_ROWS)
            .collect();
        let eng = g.gather(store, self.eng_table.unwrap(), &eng_rows)?;
        let u_emb = g.add(u_tok, pos)?;
        let u_emb = g.add(u_emb, eng)?;
        let tp = g.param(store, self.target_pos.unwrap());
        let t_emb = g.add_row(t_tok, tp)?;

        let t_match = match (&self.hma, &source) {
            (Some(hma), ItemSource::Direct) => {
                let ids = prep
                    .candidates()
                    .iter()
                    .map(|c| hma.item_ids(c))
                    .collect::<Result<Vec<_>>>()?;
                Some(hma_forward_from_ids(g, store, hma, &prep.events, &ids)?)
            }
            (Some(hma), ItemSource::Cached { hma_ids, .. }) => Some(hma_forward_from_ids(
                g,
                store,
                hma,
                &prep.events,
                hma_ids,
            )?),
            (None, _) => None,
        };

        let stack = self.stack.as_ref().expect("any_moa implies a stack");
        let (u_self, t_self) = if comp.target_awareness {
            let mask = build_target_aware_mask(len, n)?;
            let (us, ts) = self_attention_forward(g, store, stack, u_emb, t_emb, &mask)?;
            (us, ts)
        } else if len > 0 {
            // Without target awareness the stack runs causally over the
            // user sequence alone; every candidate shares the final
            // user-state row.
            let mask = build_causal_mask(len);
            let us = stack.forward(g, store, u_emb, &mask)?;
            let last = g.slice_rows(us, len - 1, 1)?;
            let ts = g.broadcast_row(last, n)?;
            (us, ts)
        } else {
            let ts = g.input(DenseMatrix::zeros(n, d));
            (u_emb, ts)
        };

        let kv = match cfg.moa.stacking {
            Stacking::Cascaded => u_self,
            Stacking::Parallel => u_emb,
        };

        let u_cross = match &self.ro {
            Some(ro) => {
                let pooled =
                    ro_cross_attention(g, store, ro, self.shared_table, &prep.ro_tokens, kv)?;
                Some(crate::attention::expand_ro(g, pooled, n)?)
            }
            None => None,
        };

        let t_cross = match &self.nro {
            Some(nro) => {
                let mut queries = t_emb;
                if let (Some(tm), Some(w)) = (t_match, self.nro_enrich_w) {
                    let wv = g.param(store, w);
                    let proj = g.matmul(tm, wv)?;
                    queries = g.add(queries, proj)?;
                }
                if cfg.nro_enrich_t_self {
                    queries = g.add(queries, t_self)?;
                }
                Some(nro_cross_attention(g, store, nro, queries, kv)?)
            }
            None => None,
        };

        let blocks = MoaBlocks {
            t_match,
            t_self: Some(t_self),
            t_cross,
            u_cross,
        };

        let layout = self.layout.as_ref().unwrap();
        let mut z_parts = Vec::new();
        for seg in layout.segments() {
            let var = match seg {
                ZSegment::UserTower => user_rows,
                ZSegment::ItemTower => item_vecs,
                ZSegment::TowerProduct => prod,
                ZSegment::TMatch => blocks.t_match.expect("layout includes TMatch only with hma"),
                ZSegment::TSelf => blocks.t_self.expect("layout includes TSelf only with a stack"),
                ZSegment::TCross => blocks.t_cross.expect("layout includes TCross only with nro"),
                ZSegment::UCross => blocks.u_cross.expect("layout includes UCross only with ro"),
            };
            z_parts.push(var);
        }
        let z = g.concat_cols(&z_parts)?;

        let branch_sum = self
            .scoring
            .as_ref()
            .unwrap()
            .forward(g, store, layout, z)?;
        let logits = g.add(tt_logits, branch_sum)?;

        Ok(ForwardArtifacts {
            logits,
            tower_logits: tt_logits,
            blocks,
        })
    }

    /// Direct inference: preprocess, score, and return the n x tasks logit
    /// matrix.
    pub fn model_forward(&self, request: &RankingRequest) -> Result<DenseMatrix> {
        let prep = self.prepare(request)?;
        let mut g = Graph::inference();
        let art = self.build_logits(&mut g, &self.store, &prep, ItemSource::Direct)?;
        Ok(g.value(art.logits).clone())
    }

    /// Runs the attention side only and extracts the block values.
    pub fn moa_forward(&self, request: &RankingRequest) -> Result<MoAOutput> {
        let prep = self.prepare(request)?;
        let mut g = Graph::inference();
        let art = self.build_logits(&mut g, &self.store, &prep, ItemSource::Direct)?;
        let take = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(MoAOutput {
            t_match: take(art.blocks.t_match),
            t_self: take(art.blocks.t_self),
            t_cross: take(art.blocks.t_cross),
            u_cross: take(art.blocks.u_cross),
        })
    }

    /// Content hash of the parameters, memoized on first call. Computed
    /// over the checkpoint byte encoding, so a saved file and the model it
    /// came from always agree.
    pub fn version(&self) -> Result<&str> {
        if let Some(v) = self.version.get() {
            return Ok(v);
        }
        let bytes = super::checkpoint::to_bytes(self)?;
        let hash = super::checkpoint::content_hash(&bytes);
        Ok(self.version.get_or_init(|| hash))
    }

    /// Pins the version (used when loading from a checkpoint whose hash is
    /// already known).
    pub(crate) fn set_version(&mut self, v: String) {
        let _ = self.version.set(v);
    }

    /// Drops the memoized version hash. Must be called after any parameter
    /// mutation (training) so a later `version()` reflects the new values.
    pub(crate) fn reset_version(&mut self) {
        self.version = OnceLock::new();
    }
}
