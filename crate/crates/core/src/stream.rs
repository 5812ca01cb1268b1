//! Online inference, one observation at a time.
//!
//! Exact mode keeps the last `t_in` observations and re-runs the offline
//! forward pass, so its forecasts equal batch inference. EMA mode replaces
//! every windowed statistic with an exponential moving average and caches
//! only what extrapolation and fusion read back, so a push costs the same
//! however long the stream has run.

use std::collections::VecDeque;

use crate::data::Standardizer;
use crate::decouple::{concat_zh, ComponentSet, Decoupled, ResidualStack};
use crate::error::{Error, Result};
use crate::extrapolate::extrapolate_all;
use crate::network::{ForecastDistribution, Scnn};
use crate::tape::{Graph, Tensor};

/// `lambda * acc + (1 - lambda) * x`.
pub fn ema_update(acc: f64, x: f64, lambda: f64) -> f64 {
    lambda * acc + (1.0 - lambda) * x
}

/// Decay matched to a window of `w` steps.
pub fn window_decay(w: usize) -> f64 {
    1.0 - 1.0 / w.max(1) as f64
}

/// Moving first and second moments of a vector, started from zero and
/// bias-corrected on read.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub lambda: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u32,
}

impl Moments {
    pub fn new(width: usize, lambda: f64) -> Self {
        Self {
            lambda,
            first: vec![0.0; width],
            second: vec![0.0; width],
            steps: 0,
        }
    }

    pub fn update(&mut self, x: &[f64]) {
        for ((m, s), &v) in self.first.iter_mut().zip(&mut self.second).zip(x) {
            *m = ema_update(*m, v, self.lambda);
            *s = ema_update(*s, v * v, self.lambda);
        }
        self.steps = self.steps.saturating_add(1);
    }

    fn correction(&self) -> f64 {
        1.0 - self.lambda.powi(self.steps.min(i32::MAX as u32) as i32)
    }

    /// Bias-corrected mean.
    pub fn mean(&self) -> Vec<f64> {
        let c = self.correction();
        self.first.iter().map(|m| m / c).collect()
    }

    /// Bias-corrected mean of squares.
    pub fn mean_square(&self) -> Vec<f64> {
        let c = self.correction();
        self.second.iter().map(|m| m / c).collect()
    }

    pub fn steps(&self) -> u32 {
        self.steps
    }
}

/// How a stream computes its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    /// Re-runs the offline forward pass on the trailing window.
    Exact,
    /// Moving averages with decays matched to the layer windows.
    Ema,
}

/// Moment trackers of one decoupling block.
#[derive(Debug, Clone)]
struct BlockState {
    lt: Moments,
    /// One tracker per phase of the cycle.
    se: Vec<Moments>,
    st: Moments,
    /// Softmax of the attention logits, `[N, N]` row-major.
    attention: Vec<f64>,
    /// Latest fusion inputs `[Z, H]`, newest first.
    taps: VecDeque<Vec<f64>>,
}

/// Components and residuals of the last block at one step, each `[N, d]`.
#[derive(Debug, Clone)]
struct Snapshot {
    components: [Vec<f64>; 8],
    residuals: [Vec<f64>; 4],
}

#[derive(Debug, Clone)]
enum Inner {
    Exact {
        rows: VecDeque<Vec<f64>>,
    },
    Ema {
        blocks: Vec<BlockState>,
        history: VecDeque<Snapshot>,
        history_len: usize,
    },
}

/// Per-consumer streaming state over a frozen model.
#[derive(Debug, Clone)]
pub struct StreamState {
    mode: StreamMode,
    inner: Option<Inner>,
    standardizer: Option<Standardizer>,
    steps: u64,
}

impl StreamState {
    /// An empty state; [`StreamState::init`] must run before any push.
    pub fn new(mode: StreamMode) -> Self {
        Self {
            mode,
            inner: None,
            standardizer: None,
            steps: 0,
        }
    }

    /// Sizes every buffer for `model`. Capacities depend only on the
    /// configuration.
    pub fn init(&mut self, model: &Scnn) -> Result<()> {
        let cfg = &model.config;
        cfg.validate()?;
        self.standardizer = Some(
            model
                .standardizer
                .clone()
                .unwrap_or_else(|| Standardizer::identity(cfg.n_vars)),
        );
        self.steps = 0;
        self.inner = Some(match self.mode {
            StreamMode::Exact => Inner::Exact {
                rows: VecDeque::with_capacity(cfg.t_in),
            },
            StreamMode::Ema => {
                let width = cfg.n_vars * cfg.d_z;
                let mut blocks = Vec::with_capacity(model.blocks.len());
                for bp in &model.blocks {
                    let mut g = Graph::new();
                    let a = g.param(&model.store, bp.attention.alpha);
                    let sm = g.softmax_rows(a)?;
                    blocks.push(BlockState {
                        lt: Moments::new(width, window_decay(cfg.delta_lt)),
                        se: vec![Moments::new(width, window_decay(cfg.tau)); cfg.cycle],
                        st: Moments::new(width, window_decay(cfg.delta_st)),
                        attention: g.value(sm).data().to_vec(),
                        taps: VecDeque::with_capacity(cfg.kernel),
                    });
                }
                let history_len = cfg.cycle.max(cfg.delta_st);
                Inner::Ema {
                    blocks,
                    history: VecDeque::with_capacity(history_len),
                    history_len,
                }
            }
        });
        Ok(())
    }

    pub fn mode(&self) -> StreamMode {
        self.mode
    }

    /// Observations pushed since `init`.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bias-corrected long-term mean of the first block, `[N * d_z]`;
    /// EMA mode only.
    pub fn longterm_mean(&self) -> Option<Vec<f64>> {
        match &self.inner {
            Some(Inner::Ema { blocks, .. }) => blocks.first().map(|b| b.lt.mean()),
            _ => None,
        }
    }

    /// Takes one observation `y` in original units and returns the forecast
    /// made at this step, in original units, once enough history exists.
    pub fn push(&mut self, model: &Scnn, y: &[f64]) -> Result<Option<ForecastDistribution>> {
        let cfg = &model.config;
        let (Some(inner), Some(std)) = (self.inner.as_mut(), self.standardizer.as_ref()) else {
            return Err(Error::StreamNotInitialised);
        };
        if y.len() != cfg.n_vars {
            return Err(Error::Dimension {
                what: "number of variables",
                expected: cfg.n_vars,
                found: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("observation of variable {i} is not finite")));
        }
        let z: Vec<f64> = y.iter().enumerate().map(|(n, &v)| std.transform_value(n, v)).collect();
        let phase = (self.steps % cfg.cycle as u64) as usize;
        self.steps += 1;
        let raw = match inner {
            Inner::Exact { rows } => {
                if rows.len() == cfg.t_in {
                    rows.pop_front();
                }
                rows.push_back(z);
                if rows.len() < cfg.t_in {
                    return Ok(None);
                }
                exact_forecast(model, rows)?
            }
            Inner::Ema {
                blocks,
                history,
                history_len,
            } => {
                let snap = ema_step(model, blocks, &z, phase)?;
                if history.len() == *history_len {
                    history.pop_front();
                }
                history.push_back(snap);
                if history.len() < *history_len {
                    return Ok(None);
                }
                ema_forecast(model, history)?
            }
        };
        Ok(Some(to_original(std, raw, cfg.t_out)))
    }
}

fn to_original(std: &Standardizer, f: ForecastDistribution, t_out: usize) -> ForecastDistribution {
    let mean = Tensor::from_fn(f.mean.shape(), |i| std.inverse_value(i / t_out, f.mean.data()[i]));
    let spread = Tensor::from_fn(f.std.shape(), |i| std.inverse_scale(i / t_out, f.std.data()[i]));
    ForecastDistribution { mean, std: spread }
}

fn exact_forecast(model: &Scnn, rows: &VecDeque<Vec<f64>>) -> Result<ForecastDistribution> {
    let (n, t) = (model.config.n_vars, model.config.t_in);
    let window = Tensor::from_fn(&[n, t], |i| rows[i % t][i / t]);
    Ok(model.forecast(&window)?.0)
}

/// Normalises `x` in place against a location and raw second moment and
/// returns `(mu, sigma)`.
fn normalise(x: &mut [f64], mu: Vec<f64>, second: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let sigma: Vec<f64> = mu
        .iter()
        .zip(second)
        .map(|(m, s)| ((s - m * m).max(0.0) + eps).sqrt())
        .collect();
    for ((v, m), s) in x.iter_mut().zip(&mu).zip(&sigma) {
        *v = (*v - m) / s;
    }
    (mu, sigma)
}

/// Advances every block by one step and returns the last block's output.
fn ema_step(model: &Scnn, blocks: &mut [BlockState], y: &[f64], phase: usize) -> Result<Snapshot> {
    let cfg = &model.config;
    let (n, d) = (cfg.n_vars, cfg.d_z);
    let mut g = Graph::new();
    let obs = g.constant(Tensor::new(vec![1, n, 1], y.to_vec()));
    let emb = model.embed(&mut g, obs)?;
    let mut x = g.value(emb).data().to_vec();
    let mut snap = None;
    for (state, bp) in blocks.iter_mut().zip(&model.blocks) {
        state.lt.update(&x);
        let (mu_lt, s_lt) = normalise(&mut x, state.lt.mean(), &state.lt.mean_square(), cfg.eps);
        let z1 = x.clone();
        let se = &mut state.se[phase];
        se.update(&x);
        let (mu_se, s_se) = normalise(&mut x, se.mean(), &se.mean_square(), cfg.eps);
        let z2 = x.clone();
        state.st.update(&x);
        let (mu_st, s_st) = normalise(&mut x, state.st.mean(), &state.st.mean_square(), cfg.eps);
        let z3 = x.clone();
        // Cross-variable moments need no history.
        let (mut mu, mut second) = (vec![0.0; n * d], vec![0.0; n * d]);
        for i in 0..n {
            for j in 0..n {
                let a = state.attention[i * n + j];
                for c in 0..d {
                    let v = z3[j * d + c];
                    mu[i * d + c] += a * v;
                    second[i * d + c] += a * v * v;
                }
            }
        }
        let (mu_ce, s_ce) = normalise(&mut x, mu, &second, cfg.eps);
        let z4 = x.clone();
        let s = Snapshot {
            components: [mu_lt, s_lt, mu_se, s_se, mu_st, s_st, mu_ce, s_ce],
            residuals: [z1, z2, z3, z4],
        };
        if let Some(f) = &bp.fusion {
            // Per variable: [z1..z4, eight components], d channels each.
            let mut input = Vec::with_capacity(n * 12 * d);
            for v in 0..n {
                for part in s.residuals.iter().chain(&s.components) {
                    input.extend_from_slice(&part[v * d..(v + 1) * d]);
                }
            }
            if state.taps.len() == f.k {
                state.taps.pop_back();
            }
            state.taps.push_front(input);
            x = fuse_step(model, f, &state.taps, n, d);
        }
        snap = Some(s);
    }
    Ok(snap.expect("a model has at least one block"))
}

/// One output step of the fusion convolution. Taps older than the first
/// step repeat it.
fn fuse_step(model: &Scnn, f: &crate::fuse::FusionParams, taps: &VecDeque<Vec<f64>>, n: usize, d: usize) -> Vec<f64> {
    let cin = 12 * d;
    let (w1, w2) = (model.store.value(f.w1).data(), model.store.value(f.w2).data());
    let bias = |p: Option<crate::tape::ParamId>, fill: f64| {
        p.map(|b| model.store.value(b).data().to_vec()).unwrap_or(vec![fill; d])
    };
    let (b1, b2) = (bias(f.b1, 0.0), bias(f.b2, 0.0));
    let mut out = vec![0.0; n * d];
    for v in 0..n {
        for o in 0..d {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..f.k {
                let tap = &taps[j.min(taps.len() - 1)][v * cin..(v + 1) * cin];
                let row = (j * d + o) * cin;
                for (c, &xc) in tap.iter().enumerate() {
                    a += w1[row + c] * xc;
                    b += w2[row + c] * xc;
                }
            }
            out[v * d + o] = (a + b1[o]) * (b + b2[o]);
        }
    }
    out
}

fn ema_forecast(model: &Scnn, history: &VecDeque<Snapshot>) -> Result<ForecastDistribution> {
    let cfg = &model.config;
    let (n, d, len) = (cfg.n_vars, cfg.d_z, history.len());
    let mut g = Graph::new();
    let mut var = |pick: &dyn Fn(&Snapshot) -> &Vec<f64>| {
        let t = Tensor::from_fn(&[1, n, len, d], |i| {
            let (v, rest) = (i / (len * d), i % (len * d));
            pick(&history[rest / d])[v * d + rest % d]
        });
        g.constant(t)
    };
    let c: Vec<_> = (0..8).map(|k| var(&|s: &Snapshot| &s.components[k])).collect();
    let r: Vec<_> = (0..4).map(|k| var(&|s: &Snapshot| &s.residuals[k])).collect();
    let components = ComponentSet {
        mu_lt: c[0],
        sigma_lt: c[1],
        mu_se: c[2],
        sigma_se: c[3],
        mu_st: c[4],
        sigma_st: c[5],
        mu_ce: c[6],
        sigma_ce: c[7],
    };
    let residuals = ResidualStack {
        z1: r[0],
        z2: r[1],
        z3: r[2],
        z4: r[3],
    };
    let zh = concat_zh(&mut g, &components, &residuals)?;
    let block = Decoupled {
        components,
        residuals,
        zh,
    };
    let ex = extrapolate_all(&mut g, &block, &model.store, &model.extrap, &cfg.extrapolation())?;
    let out = model.head(&mut g, ex.s_hat)?;
    let shape = [n, cfg.t_out];
    Ok(ForecastDistribution {
        mean: g.value(out.mean).clone().reshaped(&shape),
        std: g.value(out.std).clone().reshaped(&shape),
    })
}
