//! Model assembly: tower baseline, attention blocks, scoring head, and
//! checkpointing. `GesrModel::build_logits` is the single forward path
//! shared by training, direct inference, and cached serving.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod mlpg;
pub mod two_tower;

pub use config::{Components, ModelConfig, ModelVariant};
pub use forward::{
    ForwardArtifacts, GesrModel, ItemSource, MoAOutput, MoaBlocks, PreparedRequest,
    ENGAGEMENT_TABLE_ROWS,
};
pub use mlpg::{mlpg_gate, BranchKind, BranchSpec, Mlpg, ZLayout, ZSegment};
pub use two_tower::{item_input_matrix, tower_logits, TwoTowerParams};
