//! Produces a probabilistic forecast (mean and standard deviation per
//! variable and horizon) from the last window of a series.
//!
//! cargo run --release --example forecast_distribution

use scnn::data::{generate, SynthSpec};
use scnn::network::{ModelConfig, Scnn};
use scnn::train::{fit, TrainConfig, WindowBatch};

fn main() -> scnn::Result<()> {
    let (data, _) = generate(&SynthSpec {
        n_vars: 3,
        len: 700,
        cycle: 12,
        seed: 4,
        ..SynthSpec::default()
    })?;
    let config = ModelConfig {
        d_z: 4,
        layers: 2,
        ..ModelConfig::new(data.n_vars(), 36, 4, 12)
    };
    let mut model = Scnn::new(config, 4)?;
    let train = TrainConfig {
        lr: 3e-3,
        max_epochs: 5,
        windows_per_epoch: Some(64),
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &train)?;

    // Windows go in standardised; forecasts come back in original units.
    let std = model.standardizer.clone().expect("fit stores a standardizer");
    let z = std.transform(&data);
    let origin = data.len() - 1;
    let (t_in, t_out) = (model.config.t_in, model.config.t_out);
    let window = WindowBatch::gather(&z, &z, &[origin], t_in, 0).inputs;
    let (main, aux) = model.forecast(&window.reshaped(&[data.n_vars(), t_in]))?;

    println!("forecast from t = {}", data.times[origin]);
    for v in 0..data.n_vars() {
        for h in 0..t_out {
            let k = v * t_out + h;
            let mean = std.inverse_value(v, main.mean.data()[k]);
            let sd = std.inverse_scale(v, main.std.data()[k]);
            let structural = std.inverse_value(v, aux.mean.data()[k]);
            println!(
                "{} +{}: {mean:8.3} +/- {sd:.3}  (components only: {structural:8.3})",
                data.var_names[v],
                h + 1
            );
        }
    }
    Ok(())
}
