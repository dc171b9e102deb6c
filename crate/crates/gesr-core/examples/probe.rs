// Diagnostic scratch, round 4: epoch-by-epoch eval trajectory for the
// attention-path variants, to see whether extraction ever beats
// memorization before the final epoch.

use gesr_core::model::{GesrModel, ModelConfig, ModelVariant};
use gesr_core::training::{generate_synthetic, train_model, SyntheticSpec, TrainConfig};

fn main() {
    let spec = SyntheticSpec {
        users: 2500,
        requests_per_user: 2,
        seed: 20240801,
        ..SyntheticSpec::desk_default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let base = ModelConfig::desk_default();
    for variant in [
        ModelVariant::GesrBasicMinusHma,
        ModelVariant::GesrBasic,
        ModelVariant::GesrBasicMinusTargetAwareness,
        ModelVariant::TwoTowerBaseline,
    ] {
        println!("--- {} ---", variant.name());
        for epochs in 1..=6 {
            let cfg = variant.configure(&base);
            let mut model = GesrModel::new(cfg, 0).unwrap();
            let tcfg = TrainConfig {
                epochs,
                batch: 32,
                ..TrainConfig::default()
            };
            let r = train_model(&mut model, &data, &tcfg).unwrap();
            println!(
                "  epochs {epochs}: eval NE [{:.4}, {:.4}]  last loss {:.4}",
                r.eval_ne[0],
                r.eval_ne[1],
                r.epoch_losses.last().unwrap(),
            );
        }
    }
}
