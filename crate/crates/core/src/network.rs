//! The full model: embedding, stacked blocks, extrapolation and Gaussian
//! output heads, plus the training objectives and checkpoint format.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Standardizer;
use crate::decouple::{AttentionParams, DecoupleConfig};
use crate::error::{Error, Result};
use crate::extrapolate::{extrapolate_all, gate, ExtrapConfig, ExtrapParams, Extrapolated};
use crate::fuse::{stack_blocks, BlockParams, FusionParams, Stacked};
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Gaussian negative log-likelihood.
    Mle,
    /// Squared error of the mean only.
    Mse,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(LossMode::Mle),
            "mse" => Ok(LossMode::Mse),
            _ => Err(Error::config(format!("loss mode must be `mle` or `mse`, got `{s}`"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Mle => "mle",
            LossMode::Mse => "mse",
        })
    }
}

/// Architecture and objective settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub d_z: usize,
    /// Number of stacked blocks.
    pub layers: usize,
    /// Fusion kernel size.
    pub kernel: usize,
    pub delta_lt: usize,
    pub cycle: usize,
    pub tau: usize,
    /// Short-term window, also the auto-regressive lookback.
    pub delta_st: usize,
    pub eps: f64,
    /// Weight of the auxiliary objective.
    pub alpha: f64,
    pub gate_bias: bool,
    pub conv_bias: bool,
    pub per_var_embed: bool,
    pub loss_mode: LossMode,
    pub aux_loss_mode: LossMode,
}

impl ModelConfig {
    /// Default architecture for the given data shape.
    pub fn new(n_vars: usize, t_in: usize, t_out: usize, cycle: usize) -> Self {
        Self {
            n_vars,
            t_in,
            t_out,
            d_z: 8,
            layers: 4,
            kernel: 2,
            delta_lt: t_in,
            cycle,
            tau: t_in / cycle.max(1),
            delta_st: 8,
            eps: 1.0,
            alpha: 0.5,
            gate_bias: true,
            conv_bias: true,
            per_var_embed: false,
            loss_mode: LossMode::Mle,
            aux_loss_mode: LossMode::Mle,
        }
    }

    pub fn decouple(&self) -> DecoupleConfig {
        DecoupleConfig {
            delta_lt: self.delta_lt,
            cycle: self.cycle,
            tau: self.tau,
            delta_st: self.delta_st,
            eps: self.eps,
            n_vars: self.n_vars,
            d_z: self.d_z,
        }
    }

    pub fn extrapolation(&self) -> ExtrapConfig {
        ExtrapConfig {
            t_out: self.t_out,
            delta_ar: self.delta_st,
            cycle: self.cycle,
            d_z: self.d_z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.decouple().validate()?;
        self.extrapolation().validate()?;
        if self.kernel < 1 {
            return Err(Error::config("kernel must be at least 1"));
        }
        if self.delta_lt > self.t_in {
            return Err(Error::config(format!(
                "long-term window {} exceeds the input length {}",
                self.delta_lt, self.t_in
            )));
        }
        if self.cycle >= self.t_in {
            return Err(Error::config(format!(
                "cycle {} must be shorter than the input length {}",
                self.cycle, self.t_in
            )));
        }
        if self.delta_st > self.t_in {
            return Err(Error::config(format!(
                "short-term window {} exceeds the input length {}",
                self.delta_st, self.t_in
            )));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }

    /// `(key, value)` pairs; [`ModelConfig::set`] accepts them back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_vars", self.n_vars.to_string()),
            ("t_in", self.t_in.to_string()),
            ("t_out", self.t_out.to_string()),
            ("d_z", self.d_z.to_string()),
            ("layers", self.layers.to_string()),
            ("kernel", self.kernel.to_string()),
            ("delta_lt", self.delta_lt.to_string()),
            ("cycle", self.cycle.to_string()),
            ("tau", self.tau.to_string()),
            ("delta_st", self.delta_st.to_string()),
            ("eps", self.eps.to_string()),
            ("alpha", self.alpha.to_string()),
            ("gate_bias", self.gate_bias.to_string()),
            ("conv_bias", self.conv_bias.to_string()),
            ("per_var_embed", self.per_var_embed.to_string()),
            ("loss_mode", self.loss_mode.to_string()),
            ("aux_loss_mode", self.aux_loss_mode.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "n_vars" => self.n_vars = p(key, value)?,
            "t_in" => self.t_in = p(key, value)?,
            "t_out" => self.t_out = p(key, value)?,
            "d_z" => self.d_z = p(key, value)?,
            "layers" => self.layers = p(key, value)?,
            "kernel" => self.kernel = p(key, value)?,
            "delta_lt" => self.delta_lt = p(key, value)?,
            "cycle" => self.cycle = p(key, value)?,
            "tau" => self.tau = p(key, value)?,
            "delta_st" => self.delta_st = p(key, value)?,
            "eps" => self.eps = p(key, value)?,
            "alpha" => self.alpha = p(key, value)?,
            "gate_bias" => self.gate_bias = p(key, value)?,
            "conv_bias" => self.conv_bias = p(key, value)?,
            "per_var_embed" => self.per_var_embed = p(key, value)?,
            "loss_mode" => self.loss_mode = value.parse()?,
            "aux_loss_mode" => self.aux_loss_mode = value.parse()?,
            _ => return Err(Error::config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }
}

/// Scalar-to-channel input map.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub w: ParamId,
    pub b: ParamId,
}

/// Affine mean head and SoftPlus-affine std head, shared by both branches.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub mean_w: ParamId,
    pub mean_b: ParamId,
    pub std_w: ParamId,
    pub std_b: ParamId,
}

/// Per-horizon Gaussian forecast, `[n_vars, t_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDistribution {
    pub mean: Tensor,
    pub std: Tensor,
}

/// Graph nodes of one branch's output, each `[B, N, t_out]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    pub mean: Var,
    pub std: Var,
}

/// Everything a forward pass leaves on the graph.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub embedded: Var,
    pub stacked: Stacked,
    pub extrapolated: Extrapolated,
    pub main: BranchOutput,
    /// The branch whose residual streams are zero-masked.
    pub aux: Option<BranchOutput>,
}

/// Batched forecasts, each `[B, N, t_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Tensor,
    pub std: Tensor,
    pub aux_mean: Tensor,
    pub aux_std: Tensor,
}

/// A model: configuration, parameters and the standardiser of its data.
#[derive(Debug, Clone)]
pub struct Scnn {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: Embedding,
    pub blocks: Vec<BlockParams>,
    pub extrap: ExtrapParams,
    pub heads: Heads,
    pub standardizer: Option<Standardizer>,
}

const STD_BIAS_INIT: f64 = 0.541_324_854_612_918_1; // ln(e - 1): SoftPlus gives 1

impl Scnn {
    /// Initialises parameters from `seed`. Zero layers is accepted so that
    /// the non-block parameters can be counted, but such a model cannot
    /// run.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_z;
        let unit = Normal::new(0.0, 1.0).unwrap();
        let embedding = if config.per_var_embed {
            let n = config.n_vars;
            Embedding {
                w: store.insert("embed.w", Tensor::from_fn(&[n, 1, d], |_| unit.sample(&mut rng))),
                b: store.insert("embed.b", Tensor::zeros(&[n, 1, d])),
            }
        } else {
            Embedding {
                w: store.insert("embed.w", Tensor::from_fn(&[d, 1], |_| unit.sample(&mut rng))),
                b: store.insert("embed.b", Tensor::zeros(&[d])),
            }
        };
        let blocks = (0..config.layers)
            .map(|l| {
                let attention = AttentionParams::init(&mut store, &format!("block{l}"), config.n_vars, &mut rng);
                let fusion = (l + 1 < config.layers).then(|| {
                    FusionParams::init(
                        &mut store,
                        &format!("block{l}.fusion"),
                        config.kernel,
                        d,
                        config.conv_bias,
                        &mut rng,
                    )
                });
                BlockParams { attention, fusion }
            })
            .collect();
        let extrap = ExtrapParams::init(&mut store, &config.extrapolation(), config.gate_bias, &mut rng);
        let limit = (6.0 / (d + 1) as f64).sqrt();
        let head_w = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[1, d], |_| rng.gen_range(-limit..limit));
        let mean_w = head_w(&mut rng);
        let std_w = head_w(&mut rng).map(|v| 0.1 * v);
        let heads = Heads {
            mean_w: store.insert("head.mean.w", mean_w),
            mean_b: store.insert("head.mean.b", Tensor::zeros(&[1])),
            std_w: store.insert("head.std.w", std_w),
            std_b: store.insert("head.std.b", Tensor::full(&[1], STD_BIAS_INIT)),
        };
        Ok(Self {
            config,
            store,
            embedding,
            blocks,
            extrap,
            heads,
            standardizer: None,
        })
    }

    /// Total number of scalar parameters.
    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.t_in {
            return Err(Error::config(format!(
                "expected input windows [batch, {}, {}], got {s:?}",
                self.config.n_vars, self.config.t_in
            )));
        }
        if s[1] != self.config.n_vars {
            return Err(Error::Dimension {
                what: "number of variables",
                expected: self.config.n_vars,
                found: s[1],
            });
        }
        if let Some(i) = x.first_non_finite() {
            return Err(Error::Data(format!("non-finite input value at flat index {i}")));
        }
        Ok(())
    }

    /// Mean and spread heads on a `[B, N, t_out, d_z]` forecast state.
    pub fn head(&self, g: &mut Graph, s: Var) -> Result<BranchOutput> {
        let shape = g.shape(s).to_vec();
        let out = [shape[0], shape[1], shape[2]];
        let h = &self.heads;
        let (mw, mb) = (g.param(&self.store, h.mean_w), g.param(&self.store, h.mean_b));
        let mean = g.linear(s, mw)?;
        let mean = g.add(mean, mb)?;
        let mean = g.reshape(mean, &out)?;
        let (sw, sb) = (g.param(&self.store, h.std_w), g.param(&self.store, h.std_b));
        let raw = g.linear(s, sw)?;
        let raw = g.add(raw, sb)?;
        let std = g.softplus(raw)?;
        let std = g.reshape(std, &out)?;
        Ok(BranchOutput { mean, std })
    }

    /// Maps `[B, N, T]` standardised values to `[B, N, T, d_z]`.
    pub fn embed(&self, g: &mut Graph, windows: Var) -> Result<Var> {
        let s = g.shape(windows).to_vec();
        let x = g.reshape(windows, &[s[0], s[1], s[2], 1])?;
        let w = g.param(&self.store, self.embedding.w);
        let b = g.param(&self.store, self.embedding.b);
        let y = if self.config.per_var_embed {
            g.mul(x, w)?
        } else {
            g.linear(x, w)?
        };
        Ok(g.add(y, b)?)
    }

    /// Runs the model on `windows` (`[B, N, t_in]`, standardised). The aux
    /// branch re-runs the gate with every residual stream zeroed.
    pub fn forward(&self, g: &mut Graph, windows: Var, with_aux: bool) -> Result<ForwardPass> {
        self.check_input(g.value(windows))?;
        if self.blocks.is_empty() {
            return Err(Error::config("a model needs at least one block to run"));
        }
        let embedded = self.embed(g, windows)?;
        let stacked = stack_blocks(g, embedded, &self.blocks, &self.store, &self.config.decouple())?;
        let extrapolated = extrapolate_all(
            g,
            stacked.last(),
            &self.store,
            &self.extrap,
            &self.config.extrapolation(),
        )?;
        let main = self.head(g, extrapolated.s_hat)?;
        let aux = if with_aux {
            let mask = vec![true; 4 * self.config.d_z];
            let masked = g.zero_mask(extrapolated.z_hat, &mask)?;
            let s = gate(g, masked, extrapolated.h_hat, &self.store, &self.extrap.gate)?;
            Some(self.head(g, s)?)
        } else {
            None
        };
        Ok(ForwardPass {
            embedded,
            stacked,
            extrapolated,
            main,
            aux,
        })
    }

    /// Forecasts for a `[B, N, t_in]` or `[N, t_in]` block of standardised
    /// windows.
    pub fn predict(&self, windows: &Tensor) -> Result<Prediction> {
        let x = if windows.ndim() == 2 {
            windows.clone().reshaped(&[1, windows.shape()[0], windows.shape()[1]])
        } else {
            windows.clone()
        };
        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = self.forward(&mut g, xv, true)?;
        let aux = f.aux.expect("aux requested");
        Ok(Prediction {
            mean: g.value(f.main.mean).clone(),
            std: g.value(f.main.std).clone(),
            aux_mean: g.value(aux.mean).clone(),
            aux_std: g.value(aux.std).clone(),
        })
    }

    /// Main and aux forecasts for one `[N, t_in]` window.
    pub fn forecast(&self, window: &Tensor) -> Result<(ForecastDistribution, ForecastDistribution)> {
        let p = self.predict(window)?;
        let shape = [self.config.n_vars, self.config.t_out];
        Ok((
            ForecastDistribution {
                mean: p.mean.reshaped(&shape),
                std: p.std.reshaped(&shape),
            },
            ForecastDistribution {
                mean: p.aux_mean.reshaped(&shape),
                std: p.aux_std.reshaped(&shape),
            },
        ))
    }

    /// Objective of one batch: `alpha * aux + main` under the likelihood
    /// objective, the squared error of the main mean otherwise. `weight`
    /// zeroes masked targets.
    pub fn loss(&self, g: &mut Graph, f: &ForwardPass, truth: Var, weight: Option<Var>) -> Result<Var> {
        let aux = if self.config.alpha > 0.0 { f.aux } else { None };
        total_loss(
            g,
            truth,
            &f.main,
            aux.as_ref(),
            self.config.alpha,
            self.config.loss_mode,
            self.config.aux_loss_mode,
            weight,
        )
    }
}

fn batch_size(g: &Graph, x: Var) -> f64 {
    let s = g.shape(x);
    if s.len() >= 3 {
        s[0] as f64
    } else {
        1.0
    }
}

/// `Σ [log σ + (y - ŷ)² / (2σ²)]` over variables and horizons, averaged
/// over the batch axis when present.
pub fn mle_loss(g: &mut Graph, truth: Var, mean: Var, std: Var, weight: Option<Var>) -> Result<Var> {
    let e = g.sub(truth, mean)?;
    let e2 = g.square(e)?;
    let s2 = g.square(std)?;
    let q = g.div(e2, s2)?;
    let q = g.scale(q, 0.5)?;
    let ls = g.log(std)?;
    let mut l = g.add(ls, q)?;
    if let Some(w) = weight {
        l = g.mul(l, w)?;
    }
    let total = g.sum_all(l)?;
    let b = batch_size(g, truth);
    Ok(g.scale(total, 1.0 / b)?)
}

/// Mean squared error over the (weighted) targets.
pub fn mse_loss(g: &mut Graph, truth: Var, mean: Var, weight: Option<Var>) -> Result<Var> {
    let e = g.sub(truth, mean)?;
    let mut e2 = g.square(e)?;
    let count = match weight {
        Some(w) => {
            e2 = g.mul(e2, w)?;
            g.value(w).sum().max(1.0)
        }
        None => g.value(e2).numel() as f64,
    };
    let total = g.sum_all(e2)?;
    Ok(g.scale(total, 1.0 / count)?)
}

fn branch_loss(g: &mut Graph, truth: Var, b: &BranchOutput, mode: LossMode, weight: Option<Var>) -> Result<Var> {
    match mode {
        LossMode::Mle => mle_loss(g, truth, b.mean, b.std, weight),
        LossMode::Mse => mse_loss(g, truth, b.mean, weight),
    }
}

/// `alpha * aux + main` in likelihood mode; plain squared error of the main
/// mean in squared-error mode.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    truth: Var,
    main: &BranchOutput,
    aux: Option<&BranchOutput>,
    alpha: f64,
    mode: LossMode,
    aux_mode: LossMode,
    weight: Option<Var>,
) -> Result<Var> {
    if mode == LossMode::Mse {
        return mse_loss(g, truth, main.mean, weight);
    }
    let l_main = mle_loss(g, truth, main.mean, main.std, weight)?;
    match aux {
        Some(a) if alpha > 0.0 => {
            let l_aux = branch_loss(g, truth, a, aux_mode, weight)?;
            let l_aux = g.scale(l_aux, alpha)?;
            Ok(g.add(l_aux, l_main)?)
        }
        _ => Ok(l_main),
    }
}

const MAGIC: &str = "# scnn checkpoint v1";

impl Scnn {
    /// Non-trainable tensors stored after the parameters.
    fn extras(&self) -> Vec<(String, Tensor)> {
        match &self.standardizer {
            Some(s) => vec![
                ("standardizer.mean".into(), Tensor::new(vec![s.mean.len()], s.mean.clone())),
                ("standardizer.std".into(), Tensor::new(vec![s.std.len()], s.std.clone())),
            ],
            None => Vec::new(),
        }
    }

    /// Text manifest (config as `# key = value`, then `name d0,d1,...`
    /// per tensor), a blank line, then little-endian `f64` data.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{MAGIC}")?;
        for (k, v) in self.config.entries() {
            writeln!(out, "# {k} = {v}")?;
        }
        let extras = self.extras();
        let tensors: Vec<(&str, &Tensor)> = self
            .store
            .iter()
            .map(|(_, p)| (p.name.as_str(), &p.value))
            .chain(extras.iter().map(|(n, t)| (n.as_str(), t)))
            .collect();
        for (name, t) in &tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(out, "{name} {}", dims.join(","))?;
        }
        writeln!(out)?;
        for (_, t) in &tensors {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint<R: BufRead>(mut input: R, source: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = Vec::new();
        loop {
            let mut s = String::new();
            let n = input
                .read_line(&mut s)
                .map_err(|e| perr(lines.len() + 1, e.to_string()))?;
            if n == 0 {
                return Err(perr(lines.len() + 1, "manifest is not terminated by a blank line".into()));
            }
            let s = s.trim_end_matches(['\n', '\r']).to_string();
            if s.is_empty() {
                break;
            }
            lines.push(s);
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(perr(1, "not a checkpoint file".into()));
        }
        let mut config = ModelConfig::new(1, 2, 1, 1);
        let mut entries = Vec::new();
        for (i, l) in lines.iter().enumerate().skip(1) {
            if let Some(kv) = l.strip_prefix('#') {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| perr(i + 1, format!("malformed config line `{l}`")))?;
                config.set(k.trim(), v.trim()).map_err(|e| perr(i + 1, e.to_string()))?;
                continue;
            }
            let (name, dims) = l
                .rsplit_once(' ')
                .ok_or_else(|| perr(i + 1, format!("malformed tensor line `{l}`")))?;
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| perr(i + 1, format!("bad shape `{dims}`")))?;
            entries.push((i + 1, name.to_string(), shape));
        }
        let mut model = Scnn::new(config, 0)?;
        let mut bytes = Vec::new();
        input
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Data(format!("{source}: {e}")))?;
        let mut floats = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let expected: usize = entries.iter().map(|(_, _, s)| s.iter().product::<usize>()).sum();
        if bytes.len() != expected * 8 {
            return Err(Error::Data(format!(
                "{source}: expected {} data bytes, found {}",
                expected * 8,
                bytes.len()
            )));
        }
        let n_params = model.store.len();
        if entries.len() != n_params && entries.len() != n_params + 2 {
            return Err(Error::Data(format!(
                "{source}: manifest lists {} tensors, the configured model has {n_params} parameters",
                entries.len()
            )));
        }
        let mut extras = Vec::new();
        for (k, (line, name, shape)) in entries.into_iter().enumerate() {
            let data: Vec<f64> = floats.by_ref().take(shape.iter().product()).collect();
            if k < n_params {
                let id = model
                    .store
                    .id(&name)
                    .ok_or_else(|| perr(line, format!("unexpected parameter `{name}`")))?;
                let p = model.store.get_mut(id);
                if p.value.shape() != shape.as_slice() {
                    return Err(perr(
                        line,
                        format!("`{name}` has shape {shape:?}, the model expects {:?}", p.value.shape()),
                    ));
                }
                p.value = Tensor::new(shape, data);
            } else {
                extras.push((line, name, data));
            }
        }
        if !extras.is_empty() {
            let (mut mean, mut std) = (None, None);
            for (line, name, data) in extras {
                if data.len() != model.config.n_vars {
                    return Err(perr(line, format!("`{name}` must have one entry per variable")));
                }
                match name.as_str() {
                    "standardizer.mean" => mean = Some(data),
                    "standardizer.std" => std = Some(data),
                    _ => return Err(perr(line, format!("unexpected tensor `{name}`"))),
                }
            }
            match (mean, std) {
                (Some(mean), Some(std)) => model.standardizer = Some(Standardizer { mean, std }),
                _ => return Err(Error::Data(format!("{source}: incomplete standardizer"))),
            }
        }
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(f), &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_z: 2,
            layers: 2,
            delta_st: 4,
            ..ModelConfig::new(3, 16, 2, 4)
        }
    }

    fn windows(seed: u64, b: usize, cfg: &ModelConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, cfg.n_vars, cfg.t_in], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn output_shapes_and_positive_std() {
        let cfg = tiny();
        let m = Scnn::new(cfg.clone(), 1).unwrap();
        let p = m.predict(&windows(2, 4, &cfg)).unwrap();
        assert_eq!(p.mean.shape(), &[4, 3, 2]);
        assert_eq!(p.aux_std.shape(), &[4, 3, 2]);
        assert!(p.std.data().iter().chain(p.aux_std.data()).all(|&s| s > 0.0));
        let (main, _) = m.forecast(&windows(2, 1, &cfg).reshaped(&[3, 16])).unwrap();
        assert_eq!(main.mean.shape(), &[3, 2]);
        assert_eq!(p, m.predict(&windows(2, 4, &cfg)).unwrap());
    }

    #[test]
    fn constant_input_makes_branches_agree() {
        let cfg = tiny();
        let m = Scnn::new(cfg.clone(), 5).unwrap();
        let x = Tensor::full(&[1, 3, 16], 0.7);
        let p = m.predict(&x).unwrap();
        assert!(p.mean.max_abs_diff(&p.aux_mean) < 1e-12);
        assert!(p.std.max_abs_diff(&p.aux_std) < 1e-12);
    }

    #[test]
    fn aux_ignores_residual_ar_parameters() {
        let cfg = tiny();
        let mut m = Scnn::new(cfg.clone(), 6).unwrap();
        let x = windows(3, 2, &cfg);
        let before = m.predict(&x).unwrap();
        for k in 0..4 {
            let ar = m.extrap.ar[k];
            m.store.value_mut(ar.w).scale_in_place(-3.0);
            m.store.value_mut(ar.b).data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        let after = m.predict(&x).unwrap();
        assert_eq!(before.aux_mean, after.aux_mean);
        assert_eq!(before.aux_std, after.aux_std);
        assert_ne!(before.mean, after.mean);

        let mut g = Graph::new();
        let xv = g.constant(x);
        let f = m.forward(&mut g, xv, true).unwrap();
        let truth = g.constant(Tensor::zeros(&[2, 3, 2]));
        let aux = f.aux.unwrap();
        let l = mle_loss(&mut g, truth, aux.mean, aux.std, None).unwrap();
        g.backward(l).unwrap();
        m.store.zero_grad();
        m.store.accumulate(&g);
        for k in 0..4 {
            let ar = m.extrap.ar[k];
            assert!(m.store.grad(ar.w).data().iter().all(|&v| v == 0.0));
            assert!(m.store.grad(ar.b).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny();
        let m = Scnn::new(cfg.clone(), 1).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 4, 16])),
            Err(Error::Dimension { expected: 3, found: 4, .. })
        ));
        assert!(m.predict(&Tensor::zeros(&[1, 3, 15])).is_err());
        let mut x = Tensor::zeros(&[1, 3, 16]);
        x.data_mut()[5] = f64::NAN;
        assert!(matches!(m.predict(&x), Err(Error::Data(_))));
        let zero = Scnn::new(ModelConfig { layers: 0, ..cfg.clone() }, 1).unwrap();
        assert!(zero.predict(&Tensor::zeros(&[1, 3, 16])).is_err());
    }

    #[test]
    fn mle_examples() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::new(vec![1, 1], vec![3.0]));
        let m = g.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let s = g.constant(Tensor::new(vec![1, 1], vec![1.0]));
        let l = mle_loss(&mut g, y, m, s, None).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
        let l0 = mle_loss(&mut g, y, y, s, None).unwrap();
        assert_eq!(g.value(l0).item(), 0.0);
        // Batched inputs average over the leading axis.
        let yb = g.constant(Tensor::new(vec![2, 1, 1], vec![3.0, 3.0]));
        let mb = g.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]));
        let sb = g.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]));
        let l = mle_loss(&mut g, yb, mb, sb, None).unwrap();
        assert_eq!(g.value(l).item(), 2.0);
    }

    #[test]
    fn sigma_stationary_at_error_magnitude() {
        for e in [0.5, 2.0, -3.0] {
            let mut g = Graph::new();
            let y = g.constant(Tensor::new(vec![1, 1], vec![e]));
            let m = g.constant(Tensor::new(vec![1, 1], vec![0.0]));
            let s = g.leaf(Tensor::new(vec![1, 1], vec![f64::abs(e)]));
            let l = mle_loss(&mut g, y, m, s, None).unwrap();
            g.backward(l).unwrap();
            assert!(g.grad(s).unwrap()[0].abs() < 1e-8);
        }
    }

    #[test]
    fn total_loss_modes() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let b = BranchOutput {
            mean: g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.5])),
            std: g.constant(Tensor::new(vec![1, 2], vec![0.8, 1.3])),
        };
        let main = total_loss(&mut g, y, &b, None, 0.5, LossMode::Mle, LossMode::Mle, None).unwrap();
        let a0 = total_loss(&mut g, y, &b, Some(&b), 0.0, LossMode::Mle, LossMode::Mle, None).unwrap();
        let both = total_loss(&mut g, y, &b, Some(&b), 0.5, LossMode::Mle, LossMode::Mle, None).unwrap();
        assert_eq!(g.value(a0).item(), g.value(main).item());
        assert!((g.value(both).item() - 1.5 * g.value(main).item()).abs() < 1e-15);
        let perfect = BranchOutput { mean: y, std: b.std };
        let mse = total_loss(&mut g, y, &perfect, Some(&b), 0.5, LossMode::Mse, LossMode::Mle, None).unwrap();
        assert_eq!(g.value(mse).item(), 0.0);
        let mse = mse_loss(&mut g, y, b.mean, None).unwrap();
        assert_eq!(g.value(mse).item(), 1.625);
    }

    #[test]
    fn parameter_count_closed_form() {
        let (n, l, d, k, delta, t_out) = (228, 4, 8, 2, 8, 3);
        let mut cfg = ModelConfig::new(n, 288, t_out, 24);
        cfg.layers = l;
        let m = Scnn::new(cfg.clone(), 0).unwrap();
        let expect = 2 * d
            + l * n * n
            + (l - 1) * (2 * k * d * 12 * d + 2 * d)
            + 8 * (t_out * delta * d * d + t_out * d)
            + (2 * d * 12 * d + 2 * d)
            + 2 * (d + 1);
        assert_eq!(m.count_parameters(), expect);
        assert_eq!(expect, 231_266);
        let counts: Vec<usize> = [72, 144, 288]
            .iter()
            .map(|&t| Scnn::new(ModelConfig::new(n, t, t_out, 24), 0).unwrap().count_parameters())
            .collect();
        assert!(counts.iter().all(|&c| c == counts[0]));
        let none = Scnn::new(ModelConfig { layers: 0, ..cfg }, 0).unwrap();
        assert_eq!(none.count_parameters(), expect - l * n * n - (l - 1) * (2 * k * d * 12 * d + 2 * d));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cfg = tiny();
        cfg.per_var_embed = true;
        cfg.alpha = 0.25;
        let mut m = Scnn::new(cfg.clone(), 9).unwrap();
        m.standardizer = Some(Standardizer {
            mean: vec![0.1, -2.0, 1.0 / 3.0],
            std: vec![1.0, 0.5, 7.25],
        });
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = Scnn::read_checkpoint(&buf[..], "mem").unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.standardizer, m.standardizer);
        for ((_, a), (_, b)) in back.store.iter().zip(m.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let x = windows(4, 2, &cfg);
        assert_eq!(back.predict(&x).unwrap(), m.predict(&x).unwrap());

        let text = String::from_utf8_lossy(&buf);
        assert!(text.starts_with(MAGIC));
        assert!(text.contains("\nembed.w 3,1,2\n"));
        assert!(Scnn::read_checkpoint(&buf[..buf.len() - 3], "mem").is_err());
        assert!(Scnn::read_checkpoint(&b"hello\n\n"[..], "mem").is_err());
    }

    #[test]
    fn config_entries_round_trip() {
        let mut cfg = tiny();
        cfg.loss_mode = LossMode::Mse;
        cfg.eps = 0.3;
        let mut other = ModelConfig::new(1, 2, 1, 1);
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
        assert!(other.set("depth", "3").is_err());
        assert!(other.set("layers", "x").is_err());
    }
}
