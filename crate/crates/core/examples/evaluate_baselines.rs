//! Scores a trained model on the held-out split against the persistence,
//! seasonal persistence and historical mean forecasters.
//!
//! cargo run --release --example evaluate_baselines

use scnn::data::{generate, SynthSpec};
use scnn::network::{ModelConfig, Scnn};
use scnn::train::{evaluate, evaluate_baseline, fit, origins, Baseline, TrainConfig};

fn main() -> scnn::Result<()> {
    let cycle = 12;
    let (data, _) = generate(&SynthSpec {
        n_vars: 4,
        len: 1000,
        cycle,
        seed: 2,
        ..SynthSpec::default()
    })?;
    let config = ModelConfig {
        d_z: 4,
        layers: 2,
        ..ModelConfig::new(data.n_vars(), 36, 3, cycle)
    };
    let (t_in, t_out) = (config.t_in, config.t_out);
    let mut model = Scnn::new(config, 2)?;
    let train = TrainConfig {
        lr: 3e-3,
        max_epochs: 8,
        windows_per_epoch: Some(96),
        seed: 2,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &data, &train)?;
    let test = origins(data.len(), t_in, t_out, report.split.test.clone());

    let ours = evaluate(&model, &data, &data, &test)?;
    println!("scnn on {} test windows:", ours.windows);
    print!("{}", ours.to_csv_string());
    for kind in [
        Baseline::Persistence,
        Baseline::SeasonalPersistence(cycle),
        Baseline::HistoricalMean,
    ] {
        let r = evaluate_baseline(kind, &data, &data, &test, t_in, t_out)?;
        println!(
            "{kind:<24} MAE {:.4}  RMSE {:.4}  (scnn {:.4} / {:.4})",
            r.overall.mae, r.overall.rmse, ours.overall.mae, ours.overall.rmse
        );
    }
    Ok(())
}
