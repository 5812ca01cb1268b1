use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use super::windows::WindowBatch;
use crate::data::{SeriesBatch, Standardizer};
use crate::error::{Error, Result};
use crate::extrapolate::seasonal_index;
use crate::network::Scnn;

/// Targets with magnitude below this are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1e-3;

/// Windows per forward pass during evaluation.
const EVAL_BATCH: usize = 32;

/// Error metrics of one horizon (or of all horizons pooled).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; 0 when no target is eligible.
    pub mape_pct: f64,
    /// Observed targets scored.
    pub n: usize,
    /// Targets that entered MAPE.
    pub n_mape: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    abs: f64,
    sq: f64,
    pct: f64,
    n: usize,
    n_mape: usize,
}

impl Accum {
    fn push(&mut self, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.n += 1;
        if truth.abs() >= MAPE_FLOOR {
            self.pct += (e / truth).abs();
            self.n_mape += 1;
        }
    }

    fn finish(&self) -> Metrics {
        let k = self.n.max(1) as f64;
        Metrics {
            mae: self.abs / k,
            rmse: (self.sq / k).sqrt(),
            mape_pct: if self.n_mape == 0 {
                0.0
            } else {
                100.0 * self.pct / self.n_mape as f64
            },
            n: self.n,
            n_mape: self.n_mape,
        }
    }
}

/// Per-horizon and pooled metrics in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Entry `i` scores horizon `i + 1`.
    pub horizons: Vec<Metrics>,
    pub overall: Metrics,
    pub windows: usize,
    /// Mean wall-clock inference time per window.
    pub secs_per_window: f64,
}

impl EvalReport {
    /// `horizon,mae,rmse,mape_pct,n`, then a pooled row labelled `all`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "horizon,mae,rmse,mape_pct,n")?;
        for (i, m) in self.horizons.iter().enumerate() {
            writeln!(out, "{},{},{},{},{}", i + 1, m.mae, m.rmse, m.mape_pct, m.n)?;
        }
        let m = &self.overall;
        writeln!(out, "all,{},{},{},{}", m.mae, m.rmse, m.mape_pct, m.n)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }
}

/// Scores forecasts against `truth`. `preds[k]` is `[N * t_out]` for
/// window origin `origins[k]`, in original units; masked targets are
/// skipped.
pub fn score(truth: &SeriesBatch, origins: &[usize], preds: &[Vec<f64>], t_out: usize) -> EvalReport {
    let n = truth.n_vars();
    let mut per = vec![Accum::default(); t_out];
    let mut all = Accum::default();
    for (&o, p) in origins.iter().zip(preds) {
        for v in 0..n {
            for i in 0..t_out {
                let t = o + 1 + i;
                if truth.is_missing(v, t) {
                    continue;
                }
                let (yhat, y) = (p[v * t_out + i], truth.get(v, t));
                per[i].push(yhat, y);
                all.push(yhat, y);
            }
        }
    }
    EvalReport {
        horizons: per.iter().map(Accum::finish).collect(),
        overall: all.finish(),
        windows: origins.len(),
        secs_per_window: 0.0,
    }
}

/// Main-branch forecasts of `model` in original units, one `[N * t_out]`
/// vector per origin. `inputs` is in original units; the model's
/// standardizer (identity if absent) maps it in and out.
pub fn model_forecasts(model: &Scnn, inputs: &SeriesBatch, origins: &[usize]) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    check_width(model, inputs)?;
    let std = model
        .standardizer
        .clone()
        .unwrap_or_else(|| Standardizer::identity(cfg.n_vars));
    let z = std.transform(inputs);
    let per = cfg.n_vars * cfg.t_out;
    let mut out = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(EVAL_BATCH) {
        let wb = WindowBatch::gather(&z, &z, chunk, cfg.t_in, cfg.t_out);
        let p = model.predict(&wb.inputs)?;
        for k in 0..chunk.len() {
            let mean = &p.mean.data()[k * per..(k + 1) * per];
            out.push(
                mean.iter()
                    .enumerate()
                    .map(|(j, &m)| std.inverse_value(j / cfg.t_out, m))
                    .collect(),
            );
        }
    }
    Ok(out)
}

fn check_width(model: &Scnn, data: &SeriesBatch) -> Result<()> {
    if data.n_vars() != model.config.n_vars {
        return Err(Error::Dimension {
            what: "number of variables",
            expected: model.config.n_vars,
            found: data.n_vars(),
        });
    }
    Ok(())
}

/// Scores `model` on `origins`, reading inputs from `inputs` and targets
/// from `truth` (pass the same batch twice for a clean evaluation).
pub fn evaluate(model: &Scnn, inputs: &SeriesBatch, truth: &SeriesBatch, origins: &[usize]) -> Result<EvalReport> {
    check_width(model, truth)?;
    if inputs.len() != truth.len() {
        return Err(Error::Data(format!(
            "input series has {} steps but the target series has {}",
            inputs.len(),
            truth.len()
        )));
    }
    let start = Instant::now();
    let preds = model_forecasts(model, inputs, origins)?;
    let secs = start.elapsed().as_secs_f64();
    let mut report = score(truth, origins, &preds, model.config.t_out);
    report.secs_per_window = secs / origins.len().max(1) as f64;
    Ok(report)
}

/// Reference forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Repeats the last observation.
    Persistence,
    /// Copies the value one cycle back.
    SeasonalPersistence(usize),
    /// Repeats the window mean.
    HistoricalMean,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "persistence" => Ok(Baseline::Persistence),
            None if s == "historical_mean" => Ok(Baseline::HistoricalMean),
            Some(("seasonal_persistence", m)) => m
                .parse()
                .ok()
                .filter(|&m: &usize| m > 0)
                .map(Baseline::SeasonalPersistence)
                .ok_or_else(|| Error::config(format!("bad cycle length `{m}`"))),
            _ => Err(Error::config(format!(
                "unknown baseline `{s}`; use persistence, seasonal_persistence:<m> or historical_mean"
            ))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Persistence => write!(f, "persistence"),
            Baseline::SeasonalPersistence(m) => write!(f, "seasonal_persistence:{m}"),
            Baseline::HistoricalMean => write!(f, "historical_mean"),
        }
    }
}

/// Forecast of one variable's `history` (oldest first) for `t_out` steps.
pub fn baseline_forecast(kind: Baseline, history: &[f64], t_out: usize) -> Result<Vec<f64>> {
    let len = history.len();
    if len == 0 {
        return Err(Error::InsufficientHistory { needed: 1, available: 0 });
    }
    Ok(match kind {
        Baseline::Persistence => vec![history[len - 1]; t_out],
        Baseline::HistoricalMean => vec![history.iter().sum::<f64>() / len as f64; t_out],
        Baseline::SeasonalPersistence(m) => (1..=t_out)
            .map(|i| seasonal_index(len - 1, i, m).map(|k| history[k]))
            .collect::<Result<_>>()?,
    })
}

/// Scores a baseline that sees the same `t_in` inputs as the model.
pub fn evaluate_baseline(
    kind: Baseline,
    inputs: &SeriesBatch,
    truth: &SeriesBatch,
    origins: &[usize],
    t_in: usize,
    t_out: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut preds = Vec::with_capacity(origins.len());
    for &o in origins {
        let mut p = Vec::with_capacity(inputs.n_vars() * t_out);
        for v in 0..inputs.n_vars() {
            p.extend(baseline_forecast(kind, &inputs.row(v)[o + 1 - t_in..=o], t_out)?);
        }
        preds.push(p);
    }
    let secs = start.elapsed().as_secs_f64();
    let mut report = score(truth, origins, &preds, t_out);
    report.secs_per_window = secs / origins.len().max(1) as f64;
    Ok(report)
}
