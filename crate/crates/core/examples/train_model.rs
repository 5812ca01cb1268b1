//! Trains a small model on synthetic data, then saves the checkpoint and
//! the loss curve.
//!
//! cargo run --release --example train_model [out_dir]

use std::path::PathBuf;

use scnn::data::{generate, SynthSpec};
use scnn::network::{ModelConfig, Scnn};
use scnn::train::{fit, TrainConfig};

fn main() -> scnn::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("scnn-examples").join("train_model"));
    let (data, _) = generate(&SynthSpec {
        n_vars: 4,
        len: 800,
        cycle: 12,
        seed: 1,
        ..SynthSpec::default()
    })?;

    let config = ModelConfig {
        d_z: 4,
        layers: 2,
        ..ModelConfig::new(data.n_vars(), 36, 3, 12)
    };
    let mut model = Scnn::new(config, 1)?;
    println!("{} parameters", model.count_parameters());

    let train = TrainConfig {
        lr: 3e-3,
        max_epochs: 6,
        windows_per_epoch: Some(64),
        seed: 1,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &data, &train)?;
    for e in &report.curve {
        println!("epoch {:>2}  train {:>9.4}  val {:>9.4}", e.epoch, e.train_loss, e.val_loss);
    }
    println!("restored epoch {} ({} steps)", report.best_epoch, report.steps);

    std::fs::create_dir_all(&dir).map_err(|e| scnn::Error::io(&dir, e))?;
    model.save(dir.join("model.ckpt"))?;
    report.save_loss_csv(dir.join("loss.csv"))?;
    let back = Scnn::load(dir.join("model.ckpt"))?;
    assert_eq!(back.count_parameters(), model.count_parameters());
    println!("checkpoint written to {}", dir.display());
    Ok(())
}
