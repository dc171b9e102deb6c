use serde::{Deserialize, Serialize};

use crate::error::{GesrError, Result};
use crate::features::{MoAConfig, Stacking};

/// Which scoring modules a model instance activates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub hma: bool,
    pub target_awareness: bool,
    pub ro_cross: bool,
    pub nro_cross: bool,
    pub mlpg: bool,
}

impl Components {
    pub fn none() -> Self {
        Components {
            hma: false,
            target_awareness: false,
            ro_cross: false,
            nro_cross: false,
            mlpg: false,
        }
    }

    /// True when any attention-side module runs (the baseline path is
    /// towers only).
    pub fn any_moa(&self) -> bool {
        self.hma || self.target_awareness || self.ro_cross || self.nro_cross
    }

    /// The self-attention stack exists for every non-baseline variant:
    /// either target-aware over [U; T] or causal over U alone.
    pub fn has_stack(&self) -> bool {
        self.any_moa()
    }
}

/// Full model hyperparameters: attention config plus tower and scoring
/// widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub moa: MoAConfig,
    /// Number of prediction tasks (independent logit heads).
    pub tasks: usize,
    /// Width of Candidate::item_tower_inputs.
    pub item_input_dim: usize,
    /// Per-task tower output width; towers emit tasks * tower_dim.
    pub tower_dim: usize,
    pub user_tower_hidden: Vec<usize>,
    pub item_tower_hidden: Vec<usize>,
    pub hma_head_hidden: Vec<usize>,
    pub hma_out_dim: usize,
    /// Hidden widths for the nonlinear and gating MLPG branches.
    pub mlpg_hidden: Vec<usize>,
    pub components: Components,
    /// Advanced flag: add T_self into the NRO query enrichment.
    pub nro_enrich_t_self: bool,
}

impl ModelConfig {
    /// Desk-scale base: all components off (a pure two-tower baseline);
    /// variants switch modules on from here.
    pub fn desk_default() -> Self {
        ModelConfig {
            moa: MoAConfig::desk_default(),
            tasks: 2,
            item_input_dim: 8,
            tower_dim: 16,
            user_tower_hidden: vec![32],
            item_tower_hidden: vec![32],
            hma_head_hidden: vec![16],
            hma_out_dim: 8,
            mlpg_hidden: vec![32],
            components: Components::none(),
            nro_enrich_t_self: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.moa.validate()?;
        if self.tasks == 0 {
            return Err(GesrError::Config("tasks must be >= 1".to_string()));
        }
        if self.tower_dim == 0 || self.item_input_dim == 0 {
            return Err(GesrError::Config(
                "tower_dim and item_input_dim must be >= 1".to_string(),
            ));
        }
        if self.components.hma {
            if self.moa.hma_pairs.is_empty() {
                return Err(GesrError::Config(
                    "hma enabled but no hma_pairs configured".to_string(),
                ));
            }
            if self.hma_out_dim == 0 {
                return Err(GesrError::Config("hma_out_dim must be >= 1".to_string()));
            }
        }
        if self.nro_enrich_t_self && !(self.components.nro_cross && self.components.target_awareness)
        {
            return Err(GesrError::Config(
                "nro_enrich_t_self needs both nro_cross and target_awareness".to_string(),
            ));
        }
        Ok(())
    }

    pub fn tower_out_width(&self) -> usize {
        self.tasks * self.tower_dim
    }
}

/// The named experiment variants (ablation rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    TwoTowerBaseline,
    GesrBasic,
    GesrBasicMinusHma,
    GesrBasicMinusTargetAwareness,
    GesrAdvanced,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::TwoTowerBaseline,
        ModelVariant::GesrBasic,
        ModelVariant::GesrBasicMinusHma,
        ModelVariant::GesrBasicMinusTargetAwareness,
        ModelVariant::GesrAdvanced,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::TwoTowerBaseline => "two_tower_baseline",
            ModelVariant::GesrBasic => "gesr_basic",
            ModelVariant::GesrBasicMinusHma => "gesr_basic_minus_hma",
            ModelVariant::GesrBasicMinusTargetAwareness => "gesr_basic_minus_target_awareness",
            ModelVariant::GesrAdvanced => "gesr_advanced",
        }
    }

    /// Applies the variant to a base configuration. The advanced variant
    /// doubles both the embedding width and the sequence length, switches
    /// to cascaded stacking, and turns every module on.
    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.components = match self {
            ModelVariant::TwoTowerBaseline => Components::none(),
            ModelVariant::GesrBasic => Components {
                hma: true,
                target_awareness: true,
                ..Components::none()
            },
            ModelVariant::GesrBasicMinusHma => Components {
                target_awareness: true,
                ..Components::none()
            },
            ModelVariant::GesrBasicMinusTargetAwareness => Components {
                hma: true,
                ..Components::none()
            },
            ModelVariant::GesrAdvanced => Components {
                hma: true,
                target_awareness: true,
                ro_cross: true,
                nro_cross: true,
                mlpg: true,
            },
        };
        if let ModelVariant::GesrAdvanced = self {
            cfg.moa.embed_dim *= 2;
            cfg.moa.seq_len *= 2;
            cfg.moa.stacking = Stacking::Cascaded;
            cfg.nro_enrich_t_self = true;
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_activate_the_documented_module_sets() {
        let base = ModelConfig::desk_default();
        let basic = ModelVariant::GesrBasic.configure(&base);
        assert!(basic.components.hma && basic.components.target_awareness);
        assert!(!basic.components.ro_cross && !basic.components.nro_cross && !basic.components.mlpg);

        let minus_hma = ModelVariant::GesrBasicMinusHma.configure(&base);
        assert!(!minus_hma.components.hma && minus_hma.components.target_awareness);

        let minus_ta = ModelVariant::GesrBasicMinusTargetAwareness.configure(&base);
        assert!(minus_ta.components.hma && !minus_ta.components.target_awareness);

        let baseline = ModelVariant::TwoTowerBaseline.configure(&base);
        assert!(!baseline.components.any_moa());
    }

    #[test]
    fn advanced_doubles_width_and_length_and_cascades() {
        let base = ModelConfig::desk_default();
        let adv = ModelVariant::GesrAdvanced.configure(&base);
        assert_eq!(adv.moa.embed_dim, base.moa.embed_dim * 2);
        assert_eq!(adv.moa.seq_len, base.moa.seq_len * 2);
        assert_eq!(adv.moa.stacking, Stacking::Cascaded);
        assert!(adv.components.mlpg && adv.components.ro_cross && adv.components.nro_cross);
        assert!(adv.nro_enrich_t_self);
        assert!(adv.validate().is_ok());
    }

    #[test]
    fn validation_rejects_inconsistent_flags() {
        let mut cfg = ModelVariant::GesrBasic.configure(&ModelConfig::desk_default());
        cfg.moa.hma_pairs.clear();
        assert!(cfg.validate().is_err());

        let mut cfg2 = ModelVariant::GesrBasic.configure(&ModelConfig::desk_default());
        cfg2.nro_enrich_t_self = true; // but nro_cross is off
        assert!(cfg2.validate().is_err());

        let mut cfg3 = ModelConfig::desk_default();
        cfg3.tasks = 0;
        assert!(cfg3.validate().is_err());
    }
}
