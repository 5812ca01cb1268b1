//! Synthetic series drawn from the nested generative process
//!
//! ```text
//! z3 = sigma_ce * r  + mu_ce
//! z2 = sigma_st * z3 + mu_st
//! z1 = sigma_se * z2 + mu_se
//! y  = sigma_lt * z1 + mu_lt
//! ```
//!
//! with every factor returned alongside the observations.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::SeriesBatch;
use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Generator settings. Scale factors are `exp` of smoothed Gaussian noise,
/// so any non-negative volatility gives positive scales.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_vars: usize,
    pub len: usize,
    pub cycle: usize,
    pub seed: u64,
    /// Typical long-term level; each variable draws a level in `[0.5, 1.5]`
    /// times this.
    pub lt_level: f64,
    /// Amplitude of the slow additive drift.
    pub lt_drift: f64,
    /// Correlation time of the drift and of the long-term scale, in steps.
    pub lt_timescale: f64,
    /// Volatility of `log sigma_lt`.
    pub lt_scale_vol: f64,
    /// Fractional increase of the long-term location reached at the last
    /// step, applied linearly from `lt_ramp_start`. Draws do not depend on
    /// it, so a zero-ramp spec is an exact shift-free clone.
    pub lt_ramp: f64,
    pub lt_ramp_start: usize,
    pub se_amplitude: f64,
    /// Explicit per-phase seasonal location shared by all variables. When
    /// absent, each variable gets a shifted two-harmonic profile.
    pub se_profile: Option<Vec<f64>>,
    /// Amplitude of the per-phase modulation of `log sigma_se`.
    pub se_scale_amp: f64,
    /// Probability per step and variable that a short-term shock starts.
    pub st_rate: f64,
    pub st_magnitude: f64,
    pub st_duration: usize,
    pub st_scale_vol: f64,
    /// Variables are assigned round-robin to this many co-moving groups.
    pub ce_groups: usize,
    /// Probability per step and group that a shared shock starts.
    pub ce_rate: f64,
    pub ce_magnitude: f64,
    pub ce_duration: usize,
    pub ce_scale_vol: f64,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_vars: 16,
            len: 4000,
            cycle: 24,
            seed: 0,
            lt_level: 10.0,
            lt_drift: 2.0,
            lt_timescale: 400.0,
            lt_scale_vol: 0.15,
            lt_ramp: 0.0,
            lt_ramp_start: 0,
            se_amplitude: 2.0,
            se_profile: None,
            se_scale_amp: 0.2,
            st_rate: 0.02,
            st_magnitude: 1.5,
            st_duration: 12,
            st_scale_vol: 0.2,
            ce_groups: 4,
            ce_rate: 0.02,
            ce_magnitude: 1.5,
            ce_duration: 8,
            ce_scale_vol: 0.1,
            noise_std: 0.3,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("synthetic spec: {m}")));
        if self.n_vars == 0 || self.len == 0 || self.cycle == 0 {
            return bad("n_vars, len and cycle must be positive");
        }
        let nonneg = [
            ("lt_level", self.lt_level.abs()),
            ("lt_drift", self.lt_drift),
            ("lt_scale_vol", self.lt_scale_vol),
            ("se_amplitude", self.se_amplitude),
            ("se_scale_amp", self.se_scale_amp),
            ("st_magnitude", self.st_magnitude),
            ("st_scale_vol", self.st_scale_vol),
            ("ce_magnitude", self.ce_magnitude),
            ("ce_scale_vol", self.ce_scale_vol),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.lt_timescale >= 1.0) {
            return bad("lt_timescale must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.st_rate) || !(0.0..=1.0).contains(&self.ce_rate) {
            return bad("shock rates must lie in [0, 1]");
        }
        if self.st_duration == 0 || self.ce_duration == 0 || self.ce_groups == 0 {
            return bad("shock durations and ce_groups must be positive");
        }
        if !self.lt_ramp.is_finite() {
            return bad("lt_ramp must be finite");
        }
        if let Some(p) = &self.se_profile {
            if p.len() != self.cycle || p.iter().any(|v| !v.is_finite()) {
                return bad("se_profile needs one finite value per phase");
            }
        }
        Ok(())
    }
    /// `(key, value)` pairs; [`SynthSpec::set`] accepts them back.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_vars", self.n_vars.to_string()),
            ("len", self.len.to_string()),
            ("cycle", self.cycle.to_string()),
            ("seed", self.seed.to_string()),
            ("lt_level", self.lt_level.to_string()),
            ("lt_drift", self.lt_drift.to_string()),
            ("lt_timescale", self.lt_timescale.to_string()),
            ("lt_scale_vol", self.lt_scale_vol.to_string()),
            ("lt_ramp", self.lt_ramp.to_string()),
            ("lt_ramp_start", self.lt_ramp_start.to_string()),
            ("se_amplitude", self.se_amplitude.to_string()),
            ("se_profile", self.profile_text()),
            ("se_scale_amp", self.se_scale_amp.to_string()),
            ("st_rate", self.st_rate.to_string()),
            ("st_magnitude", self.st_magnitude.to_string()),
            ("st_duration", self.st_duration.to_string()),
            ("st_scale_vol", self.st_scale_vol.to_string()),
            ("ce_groups", self.ce_groups.to_string()),
            ("ce_rate", self.ce_rate.to_string()),
            ("ce_magnitude", self.ce_magnitude.to_string()),
            ("ce_duration", self.ce_duration.to_string()),
            ("ce_scale_vol", self.ce_scale_vol.to_string()),
            ("noise_std", self.noise_std.to_string()),
        ]
    }

    fn profile_text(&self) -> String {
        match &self.se_profile {
            None => "none".into(),
            Some(p) => p.iter().map(f64::to_string).collect::<Vec<_>>().join(" "),
        }
    }

    /// Sets one field from its text form; `se_profile` takes
    /// space-separated values or `none`. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("`{value}` is not a valid value for data.{key}")))
        }
        match key {
            "n_vars" => self.n_vars = num(key, value)?,
            "len" => self.len = num(key, value)?,
            "cycle" => self.cycle = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "lt_level" => self.lt_level = num(key, value)?,
            "lt_drift" => self.lt_drift = num(key, value)?,
            "lt_timescale" => self.lt_timescale = num(key, value)?,
            "lt_scale_vol" => self.lt_scale_vol = num(key, value)?,
            "lt_ramp" => self.lt_ramp = num(key, value)?,
            "lt_ramp_start" => self.lt_ramp_start = num(key, value)?,
            "se_amplitude" => self.se_amplitude = num(key, value)?,
            "se_scale_amp" => self.se_scale_amp = num(key, value)?,
            "st_rate" => self.st_rate = num(key, value)?,
            "st_magnitude" => self.st_magnitude = num(key, value)?,
            "st_duration" => self.st_duration = num(key, value)?,
            "st_scale_vol" => self.st_scale_vol = num(key, value)?,
            "ce_groups" => self.ce_groups = num(key, value)?,
            "ce_rate" => self.ce_rate = num(key, value)?,
            "ce_magnitude" => self.ce_magnitude = num(key, value)?,
            "ce_duration" => self.ce_duration = num(key, value)?,
            "ce_scale_vol" => self.ce_scale_vol = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "se_profile" => {
                self.se_profile = if value == "none" {
                    None
                } else {
                    Some(value.split_whitespace().map(|v| num(key, v)).collect::<Result<_>>()?)
                }
            }
            _ => return Err(Error::config(format!("unknown data key `{key}`"))),
        }
        Ok(())
    }
}

/// Every factor of the generative process, each `[n_vars, len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mu_lt: Tensor,
    pub sigma_lt: Tensor,
    pub mu_se: Tensor,
    pub sigma_se: Tensor,
    pub mu_st: Tensor,
    pub sigma_st: Tensor,
    pub mu_ce: Tensor,
    pub sigma_ce: Tensor,
    pub residual: Tensor,
}

impl GroundTruth {
    /// `(component, "mu" | "sigma", trace)` in component order.
    pub fn traces(&self) -> [(&'static str, &'static str, &Tensor); 8] {
        [
            ("lt", "mu", &self.mu_lt),
            ("lt", "sigma", &self.sigma_lt),
            ("se", "mu", &self.mu_se),
            ("se", "sigma", &self.sigma_se),
            ("st", "mu", &self.mu_st),
            ("st", "sigma", &self.sigma_st),
            ("ce", "mu", &self.mu_ce),
            ("ce", "sigma", &self.sigma_ce),
        ]
    }

    /// Writes `<dataset>.<component>.<mu|sigma>.csv` files into `dir`,
    /// laid out like `like`.
    pub fn save_csvs(&self, dir: impl AsRef<Path>, dataset: &str, like: &SeriesBatch) -> Result<()> {
        for (comp, kind, t) in self.traces() {
            let mut b = like.clone();
            b.values = t.clone();
            b.missing = vec![false; t.numel()];
            b.save_csv(dir.as_ref().join(format!("{dataset}.{comp}.{kind}.csv")))?;
        }
        Ok(())
    }
}

/// Unit-variance AR(1) noise with correlation time `tau`.
fn smooth_noise(rng: &mut ChaCha8Rng, len: usize, tau: f64) -> Vec<f64> {
    let phi = 1.0 - 1.0 / tau.max(1.0);
    let innov = (1.0 - phi * phi).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..len)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            x = phi * x + innov * e;
            x
        })
        .collect()
}

/// Sum of box-shaped shocks started at rate `rate`.
fn shocks(rng: &mut ChaCha8Rng, len: usize, rate: f64, magnitude: f64, duration: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let normal = Normal::new(0.0, magnitude.max(f64::MIN_POSITIVE)).unwrap();
    for t in 0..len {
        if rng.gen::<f64>() < rate {
            let a = if magnitude > 0.0 { normal.sample(rng) } else { 0.0 };
            for v in &mut out[t..(t + duration).min(len)] {
                *v += a;
            }
        }
    }
    out
}

/// Samples observations and ground-truth factors; identical specs give
/// bit-identical outputs.
pub fn generate(spec: &SynthSpec) -> Result<(SeriesBatch, GroundTruth)> {
    spec.validate()?;
    let (n, len, m) = (spec.n_vars, spec.len, spec.cycle);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shape = [n, len];
    let mut gt = GroundTruth {
        mu_lt: Tensor::zeros(&shape),
        sigma_lt: Tensor::zeros(&shape),
        mu_se: Tensor::zeros(&shape),
        sigma_se: Tensor::zeros(&shape),
        mu_st: Tensor::zeros(&shape),
        sigma_st: Tensor::zeros(&shape),
        mu_ce: Tensor::zeros(&shape),
        sigma_ce: Tensor::zeros(&shape),
        residual: Tensor::zeros(&shape),
    };
    let group_shocks: Vec<Vec<f64>> = (0..spec.ce_groups)
        .map(|_| shocks(&mut rng, len, spec.ce_rate, spec.ce_magnitude, spec.ce_duration))
        .collect();
    let ramp_span = len.saturating_sub(spec.lt_ramp_start).max(1) as f64;
    for v in 0..n {
        let level = spec.lt_level * rng.gen_range(0.5..1.5);
        let drift = smooth_noise(&mut rng, len, spec.lt_timescale);
        let lt_vol = smooth_noise(&mut rng, len, spec.lt_timescale);
        let amp = spec.se_amplitude * rng.gen_range(0.5..1.5);
        let shift = rng.gen_range(0..m);
        let st = shocks(&mut rng, len, spec.st_rate, spec.st_magnitude, spec.st_duration);
        let st_vol = smooth_noise(&mut rng, len, spec.st_duration as f64);
        let loading = rng.gen_range(0.5..1.5);
        let ce_vol = smooth_noise(&mut rng, len, spec.ce_duration as f64);
        let group = &group_shocks[v % spec.ce_groups];
        for t in 0..len {
            let i = v * len + t;
            let ramp = if t >= spec.lt_ramp_start {
                spec.lt_ramp * (t - spec.lt_ramp_start + 1) as f64 / ramp_span
            } else {
                0.0
            };
            gt.mu_lt.data_mut()[i] = (level + spec.lt_drift * drift[t]) * (1.0 + ramp);
            gt.sigma_lt.data_mut()[i] = (spec.lt_scale_vol * lt_vol[t]).exp();
            let phase = (t + shift) % m;
            let angle = 2.0 * PI * phase as f64 / m as f64;
            gt.mu_se.data_mut()[i] = match &spec.se_profile {
                Some(p) => p[t % m],
                None => amp * (angle.sin() + 0.5 * (2.0 * angle + 1.0).sin()),
            };
            gt.sigma_se.data_mut()[i] = (spec.se_scale_amp * angle.cos()).exp();
            gt.mu_st.data_mut()[i] = st[t];
            gt.sigma_st.data_mut()[i] = (spec.st_scale_vol * st_vol[t]).exp();
            gt.mu_ce.data_mut()[i] = loading * group[t];
            gt.sigma_ce.data_mut()[i] = (spec.ce_scale_vol * ce_vol[t]).exp();
        }
    }
    for r in gt.residual.data_mut() {
        *r = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
    }
    let values = compose(&gt);
    let mut batch = SeriesBatch::from_values(values);
    batch.cycle = Some(m);
    Ok((batch, gt))
}

/// Applies the four factor pairs to the residual, innermost first.
pub(crate) fn compose(gt: &GroundTruth) -> Tensor {
    let d = |t: &Tensor, i: usize| t.data()[i];
    Tensor::from_fn(gt.residual.shape(), |i| {
        let z3 = d(&gt.sigma_ce, i) * d(&gt.residual, i) + d(&gt.mu_ce, i);
        let z2 = d(&gt.sigma_st, i) * z3 + d(&gt.mu_st, i);
        let z1 = d(&gt.sigma_se, i) * z2 + d(&gt.mu_se, i);
        d(&gt.sigma_lt, i) * z1 + d(&gt.mu_lt, i)
    })
}
