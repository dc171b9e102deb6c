//! Synthetic data with planted cross-signals, the NE metric, Adam, the
//! training loop, and the ablation/sweep harness built on all of them.

pub mod ablation;
pub mod ne;
pub mod optimizer;
pub mod synthetic;
pub mod train;

pub use ablation::{
    ablation_suite, median, relative_delta_percent, run_config, run_seqlen_sweep,
    run_variant_table, AblationReport, AblationRow, AblationSummary, Addition, SweepPoint,
    SweepReport,
};
pub use ne::{ne_metric, PRED_CLIP};
pub use optimizer::{Adam, AdamConfig};
pub use synthetic::{
    generate_synthetic, item_tower_inputs, make_candidate, mechanism_features, SyntheticSpec,
    TaskMechanism, ITEM_INPUT_DIM, RECENCY_DECAY,
};
pub use train::{evaluate, split_by_user, train_model, TrainConfig, TrainRunResult};
