//! Command-line front end. Every subcommand maps onto a library call.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{corrupt, detect_fundamental_cycle, generate, Corruption, SeriesBatch};
use crate::decouple::COMPONENT_NAMES;
use crate::error::{Error, Result};
use crate::extrapolate::{contribution_matrix, AR_STREAMS};
use crate::network::Scnn;
use crate::stream::{StreamMode, StreamState};
use crate::tape::{Adam, Graph, Tensor};
use crate::train::{evaluate, evaluate_baseline, fit, origins, Baseline, Split, WindowBatch};

/// Longest cycle searched for when the configuration does not give one.
const MAX_DETECTED_CYCLE: usize = 512;

#[derive(Debug, Parser)]
#[command(name = "scnn", version, about = "Structured-component forecasting of multivariate series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Configuration file with [model], [train] and [data] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override written section.key=value; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Score every window instead of the test split only.
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 0.7)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

impl SplitArgs {
    fn origins(&self, len: usize, t_in: usize, t_out: usize) -> Result<Vec<usize>> {
        let range = if self.all {
            0..len
        } else {
            Split::chronological(len, self.train_frac, self.val_frac)?.test
        };
        let o = origins(len, t_in, t_out, range);
        if o.is_empty() {
            return Err(Error::InsufficientHistory {
                needed: t_in + t_out,
                available: len,
            });
        }
        Ok(o)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes a synthetic data set and its ground-truth factors.
    Generate {
        /// Configuration whose [data] section describes the series.
        #[arg(long = "spec")]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fits a model and writes its checkpoint, loss curve and configuration.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints per-horizon error metrics as CSV.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Score a reference forecaster instead, e.g. seasonal_persistence:24.
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Prints the forecast issued at time label `at`.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        at: i64,
    },
    /// Writes channel-mean traces of one block's components.
    Decompose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Block index, from 0.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Time label of the last input step; the final step by default.
        #[arg(long)]
        at: Option<i64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the per-lag contribution matrix of every extrapolation stream.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a corrupted copy of a data set.
    Corrupt {
        /// gaussian:<std> or missing:<rate>.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: PathBuf,
        /// Destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecasts rows read from standard input as they arrive.
    Stream {
        #[arg(long)]
        model: PathBuf,
        /// Moving-average statistics instead of window recomputation.
        #[arg(long)]
        ema: bool,
    },
    /// Prints per-sample training and inference timings as CSV.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Samples timed per measurement.
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status. Errors go to `err` as `ERROR <code>: <message>`.
pub fn run<I, T>(args: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "ERROR 1: {}", first.trim_start_matches("error: "));
            return 1;
        }
    };
    match dispatch(cli.command, input, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let _ = writeln!(err, "ERROR {code}: {e}");
            code
        }
    }
}

fn write_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(write_err(dir))
}

fn dispatch(cmd: Command, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Generate { spec, set, out: dir } => {
            let mut cfg = match spec {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for s in &set {
                cfg.apply_override(s)?;
            }
            let (batch, truth) = generate(&cfg.data)?;
            create_dir(&dir)?;
            batch.save_csv(dir.join("data.csv"))?;
            truth.save_csvs(&dir, "truth", &batch)?;
            let mc = cfg.model_config(cfg.data.n_vars, cfg.data.cycle)?;
            let path = dir.join("config.resolved.ini");
            std::fs::write(&path, cfg.resolved(&mc)).map_err(write_err(&path))
        }
        Command::Train {
            overrides,
            data,
            out: dir,
        } => {
            let cfg = overrides.resolve()?;
            let batch = SeriesBatch::load_csv(&data)?;
            let cycle = match cfg.model.iter().find(|(k, _)| k == "cycle") {
                Some(_) => 0,
                None => {
                    let diffs = batch.differenced();
                    let max = MAX_DETECTED_CYCLE.min(diffs.len() / 2);
                    let est = detect_fundamental_cycle(&diffs, max)?;
                    if !est.reliable() {
                        let _ = writeln!(
                            err,
                            "warning: weak cycle estimate {} (autocorrelation {:.3}); set model.cycle to override",
                            est.period, est.peak
                        );
                    }
                    est.period
                }
            };
            let mc = cfg.model_config(batch.n_vars(), cycle)?;
            let mut model = Scnn::new(mc.clone(), cfg.train.seed)?;
            let report = fit(&mut model, &batch, &cfg.train)?;
            create_dir(&dir)?;
            model.save(dir.join("model.ckpt"))?;
            report.save_loss_csv(dir.join("loss.csv"))?;
            let path = dir.join("config.resolved.ini");
            std::fs::write(&path, cfg.resolved(&mc)).map_err(write_err(&path))?;
            let _ = writeln!(
                err,
                "trained {} epochs ({} steps); best validation loss {:.6} at epoch {}",
                report.curve.len() - 1,
                report.steps,
                report.best_val_loss,
                report.best_epoch
            );
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            baseline,
            split,
        } => {
            let model = Scnn::load(&model)?;
            let batch = SeriesBatch::load_csv(&data)?;
            check_vars(&model, &batch)?;
            let (t_in, t_out) = (model.config.t_in, model.config.t_out);
            let o = split.origins(batch.len(), t_in, t_out)?;
            let report = match baseline {
                Some(b) => evaluate_baseline(b.parse::<Baseline>()?, &batch, &batch, &o, t_in, t_out)?,
                None => evaluate(&model, &batch, &batch, &o)?,
            };
            report.write_csv(out).map_err(stdout_err)
        }
        Command::Forecast { model, data, at } => {
            let model = Scnn::load(&model)?;
            let batch = SeriesBatch::load_csv(&data)?;
            check_vars(&model, &batch)?;
            let t = window_end(&batch, at, model.config.t_in)?;
            let z = model
                .standardizer
                .as_ref()
                .map_or_else(|| batch.clone(), |s| s.transform(&batch));
            let wb = WindowBatch::gather(&z, &z, &[t], model.config.t_in, 0);
            let window = wb.inputs.reshaped(&[batch.n_vars(), model.config.t_in]);
            let (f, _) = model.forecast(&window)?;
            writeln!(out, "origin_t,var,horizon,mean,std").map_err(stdout_err)?;
            write_forecast(out, &model, &batch.var_names, at.to_string(), &f.mean, &f.std, true)
        }
        Command::Decompose {
            model,
            data,
            layer,
            at,
            out: dir,
        } => {
            let model = Scnn::load(&model)?;
            let batch = SeriesBatch::load_csv(&data)?;
            check_vars(&model, &batch)?;
            decompose(&model, &batch, layer, at, &dir)
        }
        Command::Explain { model, out: dir } => {
            let model = Scnn::load(&model)?;
            create_dir(&dir)?;
            for (name, ar) in AR_STREAMS.iter().zip(&model.extrap.ar) {
                let m = contribution_matrix(&model.store, ar);
                let lags = m.first().map_or(0, Vec::len);
                let mut text = String::from("horizon");
                for j in 1..=lags {
                    text.push_str(&format!(",lag{j}"));
                }
                text.push('\n');
                for (i, row) in m.iter().enumerate() {
                    text.push_str(&(i + 1).to_string());
                    for v in row {
                        text.push_str(&format!(",{v}"));
                    }
                    text.push('\n');
                }
                let path = dir.join(format!("contrib.{name}.csv"));
                std::fs::write(&path, text).map_err(write_err(&path))?;
            }
            Ok(())
        }
        Command::Corrupt {
            kind,
            seed,
            data,
            out: dest,
        } => {
            let batch = SeriesBatch::load_csv(&data)?;
            let c = corrupt(&batch, kind.parse::<Corruption>()?, seed)?;
            match dest {
                Some(p) => c.save_csv(p),
                None => c.write_csv(out),
            }
        }
        Command::Stream { model, ema } => {
            let model = Scnn::load(&model)?;
            stream(&model, ema, input, out)
        }
        Command::Bench { model, data, samples } => {
            let model = Scnn::load(&model)?;
            let batch = SeriesBatch::load_csv(&data)?;
            check_vars(&model, &batch)?;
            bench(&model, &batch, samples.max(1), out)
        }
    }
}

fn check_vars(model: &Scnn, batch: &SeriesBatch) -> Result<()> {
    if model.config.n_vars != batch.n_vars() {
        return Err(Error::Dimension {
            what: "number of variables",
            expected: model.config.n_vars,
            found: batch.n_vars(),
        });
    }
    Ok(())
}

/// Index of time label `at`, which must close a full input window.
fn window_end(batch: &SeriesBatch, at: i64, t_in: usize) -> Result<usize> {
    let t = batch
        .index_of(at)
        .ok_or_else(|| Error::Data(format!("time {at} is not in the data")))?;
    if t + 1 < t_in {
        return Err(Error::InsufficientHistory {
            needed: t_in,
            available: t + 1,
        });
    }
    Ok(t)
}

fn write_forecast(
    out: &mut dyn Write,
    model: &Scnn,
    names: &[String],
    origin: String,
    mean: &Tensor,
    std: &Tensor,
    standardised: bool,
) -> Result<()> {
    let t_out = model.config.t_out;
    for (v, name) in names.iter().enumerate() {
        for i in 0..t_out {
            let (mut m, mut s) = (mean.data()[v * t_out + i], std.data()[v * t_out + i]);
            if let (true, Some(st)) = (standardised, &model.standardizer) {
                m = st.inverse_value(v, m);
                s = st.inverse_scale(v, s);
            }
            writeln!(out, "{origin},{name},{},{m},{s}", i + 1).map_err(stdout_err)?;
        }
    }
    Ok(())
}

fn decompose(model: &Scnn, batch: &SeriesBatch, layer: usize, at: Option<i64>, dir: &Path) -> Result<()> {
    let cfg = &model.config;
    if layer >= model.blocks.len() {
        return Err(Error::config(format!(
            "layer {layer} does not exist; the model has {} blocks",
            model.blocks.len()
        )));
    }
    let t = match at {
        Some(a) => window_end(batch, a, cfg.t_in)?,
        None => window_end(batch, *batch.times.last().unwrap_or(&0), cfg.t_in)?,
    };
    let z = model
        .standardizer
        .as_ref()
        .map_or_else(|| batch.clone(), |s| s.transform(batch));
    let wb = WindowBatch::gather(&z, &z, &[t], cfg.t_in, 0);
    let mut g = Graph::new();
    let x = g.constant(wb.inputs);
    let f = model.forward(&mut g, x, false)?;
    let block = &f.stacked.blocks[layer];
    let names = COMPONENT_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain((1..=4).map(|k| format!("z{k}")));
    let vars = block.components.to_array().into_iter().chain(block.residuals.to_array());
    create_dir(dir)?;
    let window = batch.slice(t + 1 - cfg.t_in..t + 1);
    for (name, v) in names.zip(vars) {
        let value = g.value(v);
        let d = cfg.d_z;
        let trace = Tensor::from_fn(&[cfg.n_vars, cfg.t_in], |i| {
            value.data()[i * d..(i + 1) * d].iter().sum::<f64>() / d as f64
        });
        let mut b = window.clone();
        b.values = trace;
        b.missing = vec![false; cfg.n_vars * cfg.t_in];
        b.save_csv(dir.join(format!("layer{layer}.{name}.csv")))?;
    }
    Ok(())
}

fn stream(model: &Scnn, ema: bool, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mode = if ema { StreamMode::Ema } else { StreamMode::Exact };
    let mut state = StreamState::new(mode);
    state.init(model)?;
    let n = model.config.n_vars;
    let names: Vec<String> = (0..n).map(|v| format!("v{v}")).collect();
    writeln!(out, "t,var,horizon,mean,std").map_err(stdout_err)?;
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        let read = input.read_line(&mut line).map_err(|e| Error::io("<stdin>", e))?;
        if read == 0 {
            return Ok(());
        }
        number += 1;
        let row = line.trim();
        if row.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: "<stdin>".into(),
            line: number,
            message,
        };
        let fields: Vec<&str> = row.split(',').map(str::trim).collect();
        if fields.len() != n + 1 {
            return Err(parse_err(format!("expected {} fields, found {}", n + 1, fields.len())));
        }
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(format!("`{f}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(f) = state.push(model, &values)? {
            write_forecast(out, model, &names, fields[0].to_string(), &f.mean, &f.std, false)?;
            out.flush().map_err(stdout_err)?;
        }
    }
}

fn bench(model: &Scnn, batch: &SeriesBatch, samples: usize, out: &mut dyn Write) -> Result<()> {
    let cfg = &model.config;
    let z = model
        .standardizer
        .as_ref()
        .map_or_else(|| batch.clone(), |s| s.transform(batch));
    let all = origins(batch.len(), cfg.t_in, cfg.t_out, 0..batch.len());
    if all.is_empty() {
        return Err(Error::InsufficientHistory {
            needed: cfg.t_in + cfg.t_out,
            available: batch.len(),
        });
    }
    let picked: Vec<usize> = (0..samples).map(|k| all[k % all.len()]).collect();
    let mut trainee = model.clone();
    let opt = Adam::default();
    let start = Instant::now();
    for chunk in picked.chunks(8) {
        let wb = WindowBatch::gather(&z, &z, chunk, cfg.t_in, cfg.t_out);
        let mut g = Graph::new();
        let x = g.constant(wb.inputs);
        let y = g.constant(wb.targets);
        let f = trainee.forward(&mut g, x, cfg.alpha > 0.0)?;
        let l = trainee.loss(&mut g, &f, y, None)?;
        g.backward(l)?;
        trainee.store.zero_grad();
        trainee.store.accumulate(&g);
        opt.step(&mut trainee.store);
    }
    let train = start.elapsed().as_secs_f64() / samples as f64;
    let start = Instant::now();
    for chunk in picked.chunks(8) {
        let wb = WindowBatch::gather(&z, &z, chunk, cfg.t_in, cfg.t_out);
        model.predict(&wb.inputs)?;
    }
    let infer = start.elapsed().as_secs_f64() / samples as f64;
    let mut rows = vec![("train_step", train), ("inference", infer)];
    for (name, mode) in [("stream_exact_push", StreamMode::Exact), ("stream_ema_push", StreamMode::Ema)] {
        let mut s = StreamState::new(mode);
        s.init(model)?;
        let t0 = all[0] + 1 - cfg.t_in;
        let column = |t: usize| (0..batch.n_vars()).map(|v| batch.get(v, t)).collect::<Vec<_>>();
        let warm = cfg.t_in.max(cfg.cycle).max(cfg.delta_st);
        for t in t0..(t0 + warm).min(batch.len()) {
            s.push(model, &column(t))?;
        }
        let start = Instant::now();
        for k in 0..samples {
            s.push(model, &column(t0 + (warm + k) % (batch.len() - t0)))?;
        }
        rows.push((name, start.elapsed().as_secs_f64() / samples as f64));
    }
    writeln!(out, "measurement,seconds_per_sample").map_err(stdout_err)?;
    for (name, secs) in rows {
        writeln!(out, "{name},{secs}").map_err(stdout_err)?;
    }
    Ok(())
}
