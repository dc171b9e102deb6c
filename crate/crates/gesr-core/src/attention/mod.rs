//! Attention mechanisms: the target-aware mask, the STU self-attention
//! stack, and RO/NRO cross attention.

pub mod cross;
pub mod mask;
pub mod stu;

pub use cross::{expand_ro, nro_cross_attention, ro_cross_attention, NroCrossParams, RoCrossParams};
pub use mask::{build_causal_mask, build_target_aware_mask, mask_rule, TargetAwareMask};
pub use stu::{self_attention_forward, SelfAttentionStack, StuLayerParams};
