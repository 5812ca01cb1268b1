//! Feeds observations one at a time and forecasts after each arrival,
//! comparing the exact trailing-window mode with the moving-average mode.
//!
//! cargo run --release --example stream_forecasts

use std::time::Instant;

use scnn::data::{generate, SynthSpec};
use scnn::network::{ModelConfig, Scnn};
use scnn::stream::{StreamMode, StreamState};
use scnn::train::{fit, TrainConfig};

fn main() -> scnn::Result<()> {
    let (data, _) = generate(&SynthSpec {
        n_vars: 4,
        len: 900,
        cycle: 12,
        seed: 8,
        ..SynthSpec::default()
    })?;
    let config = ModelConfig {
        d_z: 4,
        layers: 2,
        ..ModelConfig::new(data.n_vars(), 36, 3, 12)
    };
    let mut model = Scnn::new(config, 8)?;
    let train = TrainConfig {
        lr: 3e-3,
        max_epochs: 4,
        windows_per_epoch: Some(64),
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &train)?;

    for mode in [StreamMode::Exact, StreamMode::Ema] {
        let mut state = StreamState::new(mode);
        state.init(&model)?;
        let (mut emitted, mut abs_err, mut scored) = (0, 0.0, 0);
        let mut pending: Option<Vec<f64>> = None;
        let start = Instant::now();
        for t in 0..data.len() {
            let row: Vec<f64> = (0..data.n_vars()).map(|v| data.get(v, t)).collect();
            // Score the previous step's one-ahead forecast on this arrival.
            if let Some(prev) = pending.take() {
                abs_err += prev.iter().zip(&row).map(|(p, y)| (p - y).abs()).sum::<f64>();
                scored += row.len();
            }
            if let Some(f) = state.push(&model, &row)? {
                let t_out = model.config.t_out;
                pending = Some((0..row.len()).map(|v| f.mean.data()[v * t_out]).collect());
                emitted += 1;
            }
        }
        let per_push = start.elapsed().as_secs_f64() / data.len() as f64;
        println!(
            "{mode:?}: {emitted} forecasts, one-ahead MAE {:.4}, {:.0} us per push",
            abs_err / scored.max(1) as f64,
            per_push * 1e6
        );
    }
    Ok(())
}
