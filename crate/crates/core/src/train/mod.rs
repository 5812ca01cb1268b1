//! Windowed training, evaluation and reference forecasters.

mod eval;
mod windows;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use eval::{
    baseline_forecast, evaluate, evaluate_baseline, model_forecasts, score, Baseline, EvalReport, Metrics, MAPE_FLOOR,
};
pub use windows::{make_windows, origins, Split, Window, WindowBatch};

use crate::data::{SeriesBatch, Standardizer};
use crate::error::{Error, Result};
use crate::network::{mle_loss, mse_loss, LossMode, Scnn};
use crate::tape::{Adam, Graph, TapeError};

/// Optimisation settings. The loss weight `alpha` lives in the model
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    /// Random training windows drawn per epoch; all of them when `None`.
    pub windows_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            lr: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            train_frac: 0.7,
            val_frac: 0.1,
            windows_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.windows_per_epoch == Some(0) {
            return Err(Error::config("windows_per_epoch must be positive"));
        }
        Split::chronological(100, self.train_frac, self.val_frac).map(|_| ())
    }

    /// `key = value` pairs in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("train_frac", self.train_frac.to_string()),
            ("val_frac", self.val_frac.to_string()),
            (
                "windows_per_epoch",
                self.windows_per_epoch.map_or("all".into(), |w| w.to_string()),
            ),
        ]
    }

    /// Sets one field from its text form; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("`{value}` is not a valid value for train.{key}")))
        }
        match key {
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "max_epochs" => self.max_epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "train_frac" => self.train_frac = num(key, value)?,
            "val_frac" => self.val_frac = num(key, value)?,
            "windows_per_epoch" => {
                self.windows_per_epoch = if value == "all" { None } else { Some(num(key, value)?) }
            }
            _ => return Err(Error::config(format!("unknown train key `{key}`"))),
        }
        Ok(())
    }
}

/// Losses after one epoch; epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Mean main-branch loss per validation window.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub curve: Vec<EpochLoss>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub split: Split,
}

impl FitReport {
    /// `epoch,train_loss,val_loss`.
    pub fn write_loss_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,train_loss,val_loss")?;
        for e in &self.curve {
            writeln!(out, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }

    pub fn save_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_loss_csv(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::Tape(TapeError::NonFinite { .. }) => Error::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// Training objective of one batch; returns its value after accumulating
/// gradients into the model's store.
fn train_step(model: &mut Scnn, wb: &WindowBatch, opt: &Adam, step: usize) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(wb.inputs.clone());
    let y = g.constant(wb.targets.clone());
    let w = (!wb.fully_observed()).then(|| g.constant(wb.weights.clone()));
    let with_aux = model.config.alpha > 0.0 && model.config.loss_mode == LossMode::Mle;
    let f = model.forward(&mut g, x, with_aux).map_err(|e| diverged(e, step))?;
    let loss = model.loss(&mut g, &f, y, w).map_err(|e| diverged(e, step))?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Divergence { step, loss: value });
    }
    g.backward(loss)?;
    model.store.zero_grad();
    model.store.accumulate(&g);
    opt.step(&mut model.store);
    Ok(value)
}

/// Mean per-window loss of the main branch, without gradients.
pub fn main_loss(model: &Scnn, z: &SeriesBatch, origins: &[usize], batch: usize) -> Result<f64> {
    let cfg = &model.config;
    let mut total = 0.0;
    for chunk in origins.chunks(batch.max(1)) {
        let wb = WindowBatch::gather(z, z, chunk, cfg.t_in, cfg.t_out);
        let mut g = Graph::new();
        let x = g.constant(wb.inputs.clone());
        let y = g.constant(wb.targets.clone());
        let w = (!wb.fully_observed()).then(|| g.constant(wb.weights.clone()));
        let f = model.forward(&mut g, x, false)?;
        let l = match cfg.loss_mode {
            LossMode::Mle => mle_loss(&mut g, y, f.main.mean, f.main.std, w)?,
            LossMode::Mse => mse_loss(&mut g, y, f.main.mean, w)?,
        };
        // Both losses are batch means; weight chunks by their size.
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / origins.len().max(1) as f64)
}

/// Fits `model` on the training part of `data` (original units).
///
/// Fits and stores a standardizer on the training steps, runs Adam over
/// shuffled mini-batches and stops once the validation main loss has not
/// improved for `patience` epochs, restoring the best parameters.
pub fn fit(model: &mut Scnn, data: &SeriesBatch, cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let mc = model.config.clone();
    if data.n_vars() != mc.n_vars {
        return Err(Error::Dimension {
            what: "number of variables",
            expected: mc.n_vars,
            found: data.n_vars(),
        });
    }
    let split = Split::chronological(data.len(), cfg.train_frac, cfg.val_frac)?;
    let train = origins(data.len(), mc.t_in, mc.t_out, split.train.clone());
    let val = origins(data.len(), mc.t_in, mc.t_out, split.val.clone());
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: mc.t_in + mc.t_out,
            available: split.train.len().min(split.val.len()),
        });
    }
    let std = Standardizer::fit(data, split.train.clone())?;
    let z = std.transform(data);
    model.standardizer = Some(std);

    let opt = Adam::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = cfg.windows_per_epoch.unwrap_or(train.len()).min(train.len());
    let initial_train = main_loss(model, &z, &train[..per_epoch], cfg.batch_size).map_err(|e| diverged(e, 0))?;
    let initial_val = main_loss(model, &z, &val, cfg.batch_size).map_err(|e| diverged(e, 0))?;
    if !(initial_train.is_finite() && initial_val.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            loss: initial_train + initial_val,
        });
    }
    let mut curve = vec![EpochLoss {
        epoch: 0,
        train_loss: initial_train,
        val_loss: initial_val,
    }];
    let (mut best_epoch, mut best_val, mut best_store) = (0, initial_val, model.store.clone());
    let mut order = train.clone();
    let mut steps = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order[..per_epoch].chunks(cfg.batch_size) {
            let wb = WindowBatch::gather(&z, &z, chunk, mc.t_in, mc.t_out);
            sum += train_step(model, &wb, &opt, steps)?;
            steps += 1;
            batches += 1;
        }
        let val_loss = main_loss(model, &z, &val, cfg.batch_size).map_err(|e| diverged(e, steps))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { step: steps, loss: val_loss });
        }
        curve.push(EpochLoss {
            epoch,
            train_loss: sum / batches as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_store.copy_values_from(&model.store);
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store.copy_values_from(&best_store);
    Ok(FitReport {
        curve,
        best_epoch,
        best_val_loss: best_val,
        steps,
        stopped_early,
        split,
    })
}
