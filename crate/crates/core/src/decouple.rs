//! Component decoupling: four stacked normalisation layers.
//!
//! Each layer estimates a location/scale pair from a (possibly dilated or
//! cross-variable) window, then standardises its input with it:
//!
//! ```text
//! mu    = mean(window(x))
//! sigma = sqrt(max(mean(window(x²)) - mu², 0) + eps)
//! z     = (x - mu) / sigma
//! ```
//!
//! Tensors are laid out `[batch, variable, time, channel]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) const TIME_AXIS: usize = 2;

/// Window sizes and variance floor for one decoupling block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupleConfig {
    /// Long-term window, in steps.
    pub delta_lt: usize,
    /// Cycle length, in steps.
    pub cycle: usize,
    /// Seasonal window, in seasons.
    pub tau: usize,
    /// Short-term window, in steps.
    pub delta_st: usize,
    /// Variance floor added before the square root.
    pub eps: f64,
    pub n_vars: usize,
    pub d_z: usize,
}

impl DecoupleConfig {
    /// Defaults for an input window of `t_in` steps: the long-term window
    /// spans the whole input and the seasonal window every full season in it.
    pub fn new(n_vars: usize, t_in: usize, cycle: usize) -> Self {
        Self {
            delta_lt: t_in,
            cycle,
            tau: (t_in / cycle.max(1)).max(1),
            delta_st: 8,
            eps: 1.0,
            n_vars,
            d_z: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle < 1 {
            return Err(Error::config("cycle length must be at least 1"));
        }
        if self.tau < 1 {
            return Err(Error::config("seasonal window tau must be at least 1"));
        }
        if self.delta_lt < self.cycle * self.tau {
            return Err(Error::config(format!(
                "long-term window {} is shorter than cycle x tau = {}",
                self.delta_lt,
                self.cycle * self.tau
            )));
        }
        if self.delta_st < 1 {
            return Err(Error::config("short-term window must be at least 1"));
        }
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.n_vars < 1 || self.d_z < 1 {
            return Err(Error::config("n_vars and d_z must be at least 1"));
        }
        Ok(())
    }
}

/// Location/scale pairs of the four structured components.
#[derive(Debug, Clone, Copy)]
pub struct ComponentSet {
    pub mu_lt: Var,
    pub sigma_lt: Var,
    pub mu_se: Var,
    pub sigma_se: Var,
    pub mu_st: Var,
    pub sigma_st: Var,
    pub mu_ce: Var,
    pub sigma_ce: Var,
}

impl ComponentSet {
    /// The eight tensors in concatenation order.
    pub fn to_array(&self) -> [Var; 8] {
        [
            self.mu_lt,
            self.sigma_lt,
            self.mu_se,
            self.sigma_se,
            self.mu_st,
            self.sigma_st,
            self.mu_ce,
            self.sigma_ce,
        ]
    }
}

/// Names of the component tensors, in concatenation order.
pub const COMPONENT_NAMES: [&str; 8] = [
    "lt.mu", "lt.sigma", "se.mu", "se.sigma", "st.mu", "st.sigma", "ce.mu", "ce.sigma",
];

/// Layer residuals; `z4` is the final residual.
#[derive(Debug, Clone, Copy)]
pub struct ResidualStack {
    pub z1: Var,
    pub z2: Var,
    pub z3: Var,
    pub z4: Var,
}

impl ResidualStack {
    pub fn to_array(&self) -> [Var; 4] {
        [self.z1, self.z2, self.z3, self.z4]
    }
}

/// Unnormalised cross-variable attention logits, `[N, N]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub alpha: ParamId,
}

impl AttentionParams {
    /// Logits drawn i.i.d. from N(0, 0.01²), so attention starts near uniform.
    pub fn init(store: &mut ParamStore, prefix: &str, n_vars: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).unwrap();
        let alpha = Tensor::from_fn(&[n_vars, n_vars], |_| normal.sample(rng));
        Self {
            alpha: store.insert(format!("{prefix}.alpha"), alpha),
        }
    }
}

/// Output of one decoupling block.
#[derive(Debug, Clone, Copy)]
pub struct Decoupled {
    pub components: ComponentSet,
    pub residuals: ResidualStack,
    /// `[Z, H]`: residuals then components on the channel axis, width
    /// `12 d_z`.
    pub zh: Var,
}

fn time_len(g: &Graph, x: Var) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::config(format!(
            "expected a [batch, variable, time, channel] tensor, got shape {s:?}"
        )));
    }
    Ok(s[TIME_AXIS])
}

/// Standardises `x` with a location and a raw second moment.
fn standardize(g: &mut Graph, x: Var, mu: Var, second: Var, eps: f64) -> Result<(Var, Var)> {
    let sigma = g.moment_std(second, mu, eps)?;
    let z = g.standardize(x, mu, sigma)?;
    Ok((sigma, z))
}

fn windowed(g: &mut Graph, x: Var, window: usize, dilation: usize, eps: f64) -> Result<(Var, Var, Var)> {
    let mu = g.window_mean(x, TIME_AXIS, window, dilation)?;
    let sq = g.square(x)?;
    let second = g.window_mean(sq, TIME_AXIS, window, dilation)?;
    let (sigma, z) = standardize(g, x, mu, second, eps)?;
    Ok((mu, sigma, z))
}

/// Long-term layer: window `delta_lt`, no dilation.
pub fn longterm_layer(g: &mut Graph, z0: Var, cfg: &DecoupleConfig) -> Result<(Var, Var, Var)> {
    let len = time_len(g, z0)?;
    if len < 1 {
        return Err(Error::InsufficientHistory {
            needed: 1,
            available: 0,
        });
    }
    windowed(g, z0, cfg.delta_lt, 1, cfg.eps)
}

/// Seasonal layer: window `tau` dilated by the cycle length.
pub fn seasonal_layer(g: &mut Graph, z1: Var, cfg: &DecoupleConfig) -> Result<(Var, Var, Var)> {
    let len = time_len(g, z1)?;
    if cfg.cycle >= len {
        return Err(Error::config(format!(
            "cycle length {} must be shorter than the sequence ({len} steps)",
            cfg.cycle
        )));
    }
    windowed(g, z1, cfg.tau, cfg.cycle, cfg.eps)
}

/// Short-term layer: window `delta_st`, no dilation.
pub fn shortterm_layer(g: &mut Graph, z2: Var, cfg: &DecoupleConfig) -> Result<(Var, Var, Var)> {
    time_len(g, z2)?;
    windowed(g, z2, cfg.delta_st, 1, cfg.eps)
}

/// Co-evolving layer: attention-weighted moments across variables at each
/// time step.
pub fn coevolving_layer(
    g: &mut Graph,
    z3: Var,
    alpha: Var,
    cfg: &DecoupleConfig,
) -> Result<(Var, Var, Var)> {
    time_len(g, z3)?;
    let weights = g.softmax_rows(alpha)?;
    let mu = g.left_matmul(weights, z3)?;
    let sq = g.square(z3)?;
    let second = g.left_matmul(weights, sq)?;
    let (sigma, z) = standardize(g, z3, mu, second, cfg.eps)?;
    Ok((mu, sigma, z))
}

/// Runs the four layers in order (long-term, seasonal, short-term,
/// co-evolving) and concatenates their outputs.
pub fn decouple_block(g: &mut Graph, z0: Var, alpha: Var, cfg: &DecoupleConfig) -> Result<Decoupled> {
    let (mu_lt, sigma_lt, z1) = longterm_layer(g, z0, cfg)?;
    let (mu_se, sigma_se, z2) = seasonal_layer(g, z1, cfg)?;
    let (mu_st, sigma_st, z3) = shortterm_layer(g, z2, cfg)?;
    let (mu_ce, sigma_ce, z4) = coevolving_layer(g, z3, alpha, cfg)?;
    let components = ComponentSet {
        mu_lt,
        sigma_lt,
        mu_se,
        sigma_se,
        mu_st,
        sigma_st,
        mu_ce,
        sigma_ce,
    };
    let residuals = ResidualStack { z1, z2, z3, z4 };
    let zh = concat_zh(g, &components, &residuals)?;
    Ok(Decoupled {
        components,
        residuals,
        zh,
    })
}

/// `[Z, H]` in one copy: the four residuals, then the eight components.
pub fn concat_zh(g: &mut Graph, components: &ComponentSet, residuals: &ResidualStack) -> Result<Var> {
    let mut parts = residuals.to_array().to_vec();
    parts.extend(components.to_array());
    Ok(g.concat(&parts, 3)?)
}

/// Inverts the four normalisations, rebuilding the block input from the
/// final residual.
pub fn reconstruct(components: &[Tensor; 8], residual: &Tensor) -> Tensor {
    let [mu_lt, s_lt, mu_se, s_se, mu_st, s_st, mu_ce, s_ce] = components;
    Tensor::from_fn(residual.shape(), |i| {
        let z3 = s_ce.data()[i] * residual.data()[i] + mu_ce.data()[i];
        let z2 = s_st.data()[i] * z3 + mu_st.data()[i];
        let z1 = s_se.data()[i] * z2 + mu_se.data()[i];
        s_lt.data()[i] * z1 + mu_lt.data()[i]
    })
}
