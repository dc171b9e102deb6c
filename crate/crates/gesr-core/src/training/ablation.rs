//! Ablation and sweep harness: trains model families on one dataset and
//! tabulates held-out NE and training throughput, median over seeds.

use crate::error::{GesrError, Result};
use crate::features::RankingRequest;
use crate::model::{GesrModel, ModelConfig, ModelVariant};
use crate::training::train::{train_model, TrainConfig, TrainRunResult};

/// Single additions layered onto `gesr_basic`, one axis at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Addition {
    LongerSeqLen,
    DoubledEmbedDim,
    RoCross,
    NroCross,
    Mlpg,
}

impl Addition {
    pub const ALL: [Addition; 5] = [
        Addition::LongerSeqLen,
        Addition::DoubledEmbedDim,
        Addition::RoCross,
        Addition::NroCross,
        Addition::Mlpg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Addition::LongerSeqLen => "basic+longer_n",
            Addition::DoubledEmbedDim => "basic+doubled_d",
            Addition::RoCross => "basic+ro_cross",
            Addition::NroCross => "basic+nro_cross",
            Addition::Mlpg => "basic+mlpg",
        }
    }

    /// Applies this addition to an already-basic configuration.
    pub fn configure(&self, basic: &ModelConfig) -> ModelConfig {
        let mut cfg = basic.clone();
        match self {
            Addition::LongerSeqLen => cfg.moa.seq_len *= 2,
            Addition::DoubledEmbedDim => cfg.moa.embed_dim *= 2,
            Addition::RoCross => cfg.components.ro_cross = true,
            Addition::NroCross => cfg.components.nro_cross = true,
            Addition::Mlpg => cfg.components.mlpg = true,
        }
        cfg
    }
}

/// One trained configuration under one seed.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub eval_ne: Vec<f64>,
    pub examples_per_second: f64,
    pub train_seconds: f64,
}

/// Median summary for one configuration across seeds, with relative NE
/// deltas against the baseline configuration's medians.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AblationSummary {
    pub name: String,
    pub median_ne: Vec<f64>,
    pub median_eps: f64,
    /// Per task: 100 * (ne - baseline_ne) / baseline_ne. Negative is an
    /// improvement over the baseline.
    pub ne_delta_pct: Vec<f64>,
    pub eps_delta_pct: f64,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

/// One sequence-length setting in the sweep.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SweepPoint {
    pub seq_len: usize,
    pub stochastic_target: Option<usize>,
    pub median_ne: Vec<f64>,
    pub median_eps: f64,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub rows: Vec<AblationRow>,
    pub points: Vec<SweepPoint>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of no values");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in median input"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 100 * (value - reference) / reference.
pub fn relative_delta_percent(value: f64, reference: f64) -> f64 {
    100.0 * (value - reference) / reference
}

/// Trains one configuration under one model seed and records the outcome.
pub fn run_config(
    name: &str,
    cfg: &ModelConfig,
    data: &[RankingRequest],
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<AblationRow> {
    let mut model = GesrModel::new(cfg.clone(), seed)?;
    let result: TrainRunResult = train_model(&mut model, data, train_cfg)?;
    Ok(AblationRow {
        name: name.to_string(),
        seed,
        eval_ne: result.eval_ne,
        examples_per_second: result.examples_per_second,
        train_seconds: result.train_seconds,
    })
}

fn summarize(rows: &[AblationRow], baseline_name: &str) -> Result<Vec<AblationSummary>> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.name) {
            order.push(r.name.clone());
        }
    }
    let collect = |name: &str| -> (Vec<f64>, f64) {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| r.name == name).collect();
        let tasks = group[0].eval_ne.len();
        let med_ne = (0..tasks)
            .map(|t| median(&group.iter().map(|r| r.eval_ne[t]).collect::<Vec<_>>()))
            .collect();
        let med_eps = median(&group.iter().map(|r| r.examples_per_second).collect::<Vec<_>>());
        (med_ne, med_eps)
    };
    if !order.iter().any(|n| n == baseline_name) {
        return Err(GesrError::Contract(format!(
            "baseline configuration {baseline_name} missing from ablation rows"
        )));
    }
    let (base_ne, base_eps) = collect(baseline_name);
    Ok(order
        .iter()
        .map(|name| {
            let (median_ne, median_eps) = collect(name);
            AblationSummary {
                name: name.clone(),
                ne_delta_pct: median_ne
                    .iter()
                    .zip(&base_ne)
                    .map(|(v, b)| relative_delta_percent(*v, *b))
                    .collect(),
                eps_delta_pct: relative_delta_percent(median_eps, base_eps),
                median_ne,
                median_eps,
            }
        })
        .collect())
}

/// Trains every model variant (and optionally every single addition) for
/// every seed. Row order: configuration-major, seed-minor.
pub fn run_variant_table(
    base: &ModelConfig,
    data: &[RankingRequest],
    train_cfg: &TrainConfig,
    seeds: &[u64],
    include_additions: bool,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(GesrError::Config("at least one seed required".to_string()));
    }
    let mut configs: Vec<(String, ModelConfig)> = ModelVariant::ALL
        .iter()
        .map(|v| (v.name().to_string(), v.configure(base)))
        .collect();
    if include_additions {
        let basic = ModelVariant::GesrBasic.configure(base);
        for add in Addition::ALL {
            configs.push((add.name().to_string(), add.configure(&basic)));
        }
    }
    let mut rows = Vec::new();
    for (name, cfg) in &configs {
        for &seed in seeds {
            rows.push(run_config(name, cfg, data, train_cfg, seed)?);
        }
    }
    let summaries = summarize(&rows, ModelVariant::TwoTowerBaseline.name())?;
    Ok(AblationReport { rows, summaries })
}

/// Sequence-length sweep over `gesr_basic`: each length trains at full
/// sequences truncated to that length; when `sl_target` is set, one extra
/// setting trains the longest model with stochastic subsampling down to the
/// target.
pub fn run_seqlen_sweep(
    base: &ModelConfig,
    data: &[RankingRequest],
    train_cfg: &TrainConfig,
    seeds: &[u64],
    lens: &[usize],
    sl_target: Option<usize>,
) -> Result<SweepReport> {
    if seeds.is_empty() || lens.is_empty() {
        return Err(GesrError::Config(
            "sweep needs at least one seed and one length".to_string(),
        ));
    }
    let basic = ModelVariant::GesrBasic.configure(base);
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut settings: Vec<(usize, Option<usize>)> = lens.iter().map(|&n| (n, None)).collect();
    if let Some(target) = sl_target {
        let longest = *lens.iter().max().expect("non-empty lens");
        settings.push((longest, Some(target)));
    }
    for (seq_len, stochastic) in settings {
        let mut cfg = basic.clone();
        cfg.moa.seq_len = seq_len;
        let tcfg = TrainConfig {
            sl_target: stochastic,
            ..*train_cfg
        };
        let name = match stochastic {
            Some(t) => format!("n{seq_len}_sl{t}"),
            None => format!("n{seq_len}"),
        };
        let mut group = Vec::new();
        for &seed in seeds {
            let row = run_config(&name, &cfg, data, &tcfg, seed)?;
            group.push(row.clone());
            rows.push(row);
        }
        let tasks = group[0].eval_ne.len();
        points.push(SweepPoint {
            seq_len,
            stochastic_target: stochastic,
            median_ne: (0..tasks)
                .map(|t| median(&group.iter().map(|r| r.eval_ne[t]).collect::<Vec<_>>()))
                .collect(),
            median_eps: median(
                &group.iter().map(|r| r.examples_per_second).collect::<Vec<_>>(),
            ),
        });
    }
    Ok(SweepReport { rows, points })
}

/// The full suite the CLI exposes: all variants, all single additions, and
/// the sequence-length sweep (desk-scale lengths) with a stochastic-length
/// setting. Requires at least three seeds so medians are meaningful.
pub fn ablation_suite(
    base: &ModelConfig,
    data: &[RankingRequest],
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<(AblationReport, SweepReport)> {
    if seeds.len() < 3 {
        return Err(GesrError::Config(format!(
            "ablation suite needs >= 3 seeds, got {}",
            seeds.len()
        )));
    }
    let table = run_variant_table(base, data, train_cfg, seeds, true)?;
    let full = base.moa.seq_len;
    let lens = vec![full / 4, full / 2, full];
    let sweep = run_seqlen_sweep(base, data, train_cfg, seeds, &lens, Some(full / 4))?;
    Ok((table, sweep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::training::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn median_handles_odd_even_and_order() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn relative_delta_matches_hand_values() {
        assert!((relative_delta_percent(0.99, 1.0) + 1.0).abs() < 1e-12);
        assert!((relative_delta_percent(1.5, 1.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn additions_change_exactly_one_axis() {
        let base = ModelConfig::desk_default();
        let basic = crate::model::ModelVariant::GesrBasic.configure(&base);
        for add in Addition::ALL {
            let cfg = add.configure(&basic);
            cfg.validate().unwrap();
            match add {
                Addition::LongerSeqLen => {
                    assert_eq!(cfg.moa.seq_len, basic.moa.seq_len * 2);
                    assert_eq!(cfg.moa.embed_dim, basic.moa.embed_dim);
                }
                Addition::DoubledEmbedDim => {
                    assert_eq!(cfg.moa.embed_dim, basic.moa.embed_dim * 2)
                }
                Addition::RoCross => assert!(cfg.components.ro_cross),
                Addition::NroCross => assert!(cfg.components.nro_cross),
                Addition::Mlpg => assert!(cfg.components.mlpg),
            }
            assert!(cfg.components.hma && cfg.components.target_awareness);
        }
    }

    fn micro_setup() -> (ModelConfig, Vec<crate::features::RankingRequest>, TrainConfig) {
        let mut base = ModelConfig::desk_default();
        base.moa.embed_dim = 8;
        base.moa.heads = 2;
        base.moa.self_attn_layers = 1;
        base.moa.seq_len = 8;
        base.moa.ro_seeds = 1;
        base.moa.nro_slots = 1;
        base.tower_dim = 4;
        base.user_tower_hidden = vec![8];
        base.item_tower_hidden = vec![8];
        base.hma_out_dim = 4;
        base.mlpg_hidden = vec![8];
        let spec = SyntheticSpec {
            users: 12,
            requests_per_user: 2,
            events_min: 4,
            events_max: 8,
            candidates: 4,
            ..SyntheticSpec::desk_default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let tcfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        (base, data, tcfg)
    }

    #[test]
    fn variant_table_has_one_row_per_config_per_seed() {
        let (base, data, tcfg) = micro_setup();
        let report = run_variant_table(&base, &data, &tcfg, &[1, 2], false).unwrap();
        assert_eq!(report.rows.len(), crate::model::ModelVariant::ALL.len() * 2);
        for v in crate::model::ModelVariant::ALL {
            let n = report.rows.iter().filter(|r| r.name == v.name()).count();
            assert_eq!(n, 2, "{}", v.name());
        }
        let baseline = report
            .summaries
            .iter()
            .find(|s| s.name == "two_tower_baseline")
            .unwrap();
        for d in &baseline.ne_delta_pct {
            assert!(d.abs() < 1e-12, "baseline delta vs itself: {d}");
        }
        assert!(report.summaries.iter().all(|s| s.median_eps > 0.0));
    }

    #[test]
    fn sweep_produces_points_including_stochastic() {
        let (base, data, tcfg) = micro_setup();
        let sweep =
            run_seqlen_sweep(&base, &data, &tcfg, &[5], &[4, 8], Some(4)).unwrap();
        assert_eq!(sweep.points.len(), 3);
        assert_eq!(sweep.rows.len(), 3);
        let sl = sweep.points.last().unwrap();
        assert_eq!(sl.stochastic_target, Some(4));
        assert_eq!(sl.seq_len, 8);
        assert!(sweep.points.iter().all(|p| p.median_eps > 0.0));
    }

    #[test]
    fn suite_rejects_too_few_seeds() {
        let (base, data, tcfg) = micro_setup();
        assert!(matches!(
            ablation_suite(&base, &data, &tcfg, &[1, 2]),
            Err(GesrError::Config(_))
        ));
    }
}
