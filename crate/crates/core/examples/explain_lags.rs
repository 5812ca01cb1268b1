//! Ranks which past steps drive each horizon's auto-regressive
//! extrapolation, by the norm of each lag's weight matrix.
//!
//! cargo run --release --example explain_lags

use scnn::data::{generate, SynthSpec};
use scnn::extrapolate::{contribution_matrix, AR_STREAMS};
use scnn::network::{ModelConfig, Scnn};
use scnn::train::{fit, TrainConfig};

fn main() -> scnn::Result<()> {
    let (data, _) = generate(&SynthSpec {
        n_vars: 3,
        len: 600,
        cycle: 12,
        seed: 6,
        ..SynthSpec::default()
    })?;
    let config = ModelConfig {
        d_z: 4,
        layers: 2,
        delta_st: 6,
        ..ModelConfig::new(data.n_vars(), 36, 2, 12)
    };
    let mut model = Scnn::new(config, 6)?;
    let train = TrainConfig {
        lr: 3e-3,
        max_epochs: 4,
        windows_per_epoch: Some(64),
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &train)?;

    for (name, ar) in AR_STREAMS.iter().zip(&model.extrap.ar) {
        println!("{name}");
        for (h, row) in contribution_matrix(&model.store, ar).iter().enumerate() {
            let top = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map_or(0, |(j, _)| j + 1);
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  horizon {}: [{}] strongest lag {top}", h + 1, cells.join(" "));
        }
    }
    Ok(())
}
