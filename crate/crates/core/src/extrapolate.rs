//! Projection of components and residuals onto the forecast horizons.
//!
//! Long-term statistics are replicated, seasonal ones are copied from the
//! same phase of the most recent season, and the remaining streams
//! (residuals, short-term and co-evolving statistics) each get a per-horizon
//! auto-regressive model. An interaction gate then merges everything into
//! one state vector per horizon.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::decouple::{Decoupled, TIME_AXIS};
use crate::error::{Error, Result};
use crate::tape::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtrapConfig {
    pub t_out: usize,
    /// Auto-regressive lookback.
    pub delta_ar: usize,
    pub cycle: usize,
    pub d_z: usize,
}

impl ExtrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_out < 1 || self.delta_ar < 1 || self.cycle < 1 || self.d_z < 1 {
            return Err(Error::config(format!(
                "t_out, delta_ar, cycle and d_z must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Streams with an auto-regressive extrapolator, in parameter order.
pub const AR_STREAMS: [&str; 8] = ["z1", "z2", "z3", "z4", "st.mu", "st.sigma", "ce.mu", "ce.sigma"];

/// Per-horizon AR weights `w[t_out, delta_ar, d, d]` and bias `b[t_out, d]`.
#[derive(Debug, Clone, Copy)]
pub struct ArExtrapolator {
    pub w: ParamId,
    pub b: ParamId,
}

impl ArExtrapolator {
    /// Starts near persistence: the lag-0 weight is `0.9 I`, other lags are
    /// small noise and the bias is zero.
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &ExtrapConfig, rng: &mut impl Rng) -> Self {
        let (h, l, d) = (cfg.t_out, cfg.delta_ar, cfg.d_z);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut w = Tensor::zeros(&[h, l, d, d]);
        for i in 0..h {
            for j in 0..l {
                for r in 0..d {
                    for c in 0..d {
                        let v = if j == 0 {
                            if r == c {
                                0.9
                            } else {
                                0.0
                            }
                        } else {
                            noise.sample(rng)
                        };
                        w.set(&[i, j, r, c], v);
                    }
                }
            }
        }
        Self {
            w: store.insert(format!("{prefix}.w"), w),
            b: store.insert(format!("{prefix}.b"), Tensor::zeros(&[h, d])),
        }
    }
}

/// Two affine maps of `[Ẑ, Ĥ]` (width `12 d`) combined element-wise.
#[derive(Debug, Clone, Copy)]
pub struct InteractionGate {
    pub w1: ParamId,
    pub w2: ParamId,
    pub b1: Option<ParamId>,
    pub b2: Option<ParamId>,
}

impl InteractionGate {
    /// Glorot-scaled weights; with biases, `b2 = 1` so the second branch
    /// starts close to a pass-through.
    pub fn init(store: &mut ParamStore, prefix: &str, d_z: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let (w1, w2) = glorot_pair(&[d_z, 12 * d_z], rng);
        Self {
            w1: store.insert(format!("{prefix}.w1"), w1),
            w2: store.insert(format!("{prefix}.w2"), w2),
            b1: bias.then(|| store.insert(format!("{prefix}.b1"), Tensor::zeros(&[d_z]))),
            b2: bias.then(|| store.insert(format!("{prefix}.b2"), Tensor::full(&[d_z], 1.0))),
        }
    }
}

/// Two independent uniform Glorot draws for a `[.., out, in]` weight.
pub(crate) fn glorot_pair(shape: &[usize], rng: &mut impl Rng) -> (Tensor, Tensor) {
    let n = shape.len();
    let (fan_out, fan_in) = (shape[n - 2], shape[n - 1]);
    let taps: usize = shape[..n - 2].iter().product();
    let limit = (6.0 / ((fan_in * taps + fan_out) as f64)).sqrt();
    let a = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit));
    let b = Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit));
    (a, b)
}

/// All parameters of the extrapolation stage.
#[derive(Debug, Clone, Copy)]
pub struct ExtrapParams {
    /// Indexed like [`AR_STREAMS`].
    pub ar: [ArExtrapolator; 8],
    pub gate: InteractionGate,
}

impl ExtrapParams {
    pub fn init(store: &mut ParamStore, cfg: &ExtrapConfig, gate_bias: bool, rng: &mut impl Rng) -> Self {
        let ar = AR_STREAMS.map(|s| ArExtrapolator::init(store, &format!("ar.{s}"), cfg, rng));
        let gate = InteractionGate::init(store, "gate", cfg.d_z, gate_bias, rng);
        Self { ar, gate }
    }
}

/// Extrapolated quantities, each `[B, N, t_out, ·]`.
#[derive(Debug, Clone, Copy)]
pub struct Extrapolated {
    /// Gate output, width `d`.
    pub s_hat: Var,
    /// Width `8 d`, ordered like the historical components.
    pub h_hat: Var,
    /// Width `4 d`.
    pub z_hat: Var,
}

/// Time index read for horizon `i` (1-based) by the seasonal rule.
///
/// Horizons beyond one season wrap back whole seasons.
pub fn seasonal_index(t: usize, i: usize, m: usize) -> Result<usize> {
    let back = m * i.div_ceil(m);
    (t + i).checked_sub(back).ok_or(Error::InsufficientHistory {
        needed: back - i + 1,
        available: t + 1,
    })
}

/// Replicates the value at `t` across horizons (long-term rule).
pub fn extrapolate_longterm(g: &mut Graph, x: Var, t: usize, t_out: usize) -> Result<Var> {
    Ok(g.gather(x, TIME_AXIS, &vec![t; t_out])?)
}

/// Copies each horizon's value from the same phase of the latest season.
pub fn extrapolate_seasonal(g: &mut Graph, x: Var, t: usize, t_out: usize, m: usize) -> Result<Var> {
    let idx = (1..=t_out)
        .map(|i| seasonal_index(t, i, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.gather(x, TIME_AXIS, &idx)?)
}

/// The `lags` most recent positions up to `t`, newest first.
pub fn ar_history(g: &mut Graph, x: Var, t: usize, lags: usize) -> Result<Var> {
    if lags > t + 1 {
        return Err(Error::InsufficientHistory {
            needed: lags,
            available: t + 1,
        });
    }
    let idx: Vec<usize> = (0..lags).map(|j| t - j).collect();
    Ok(g.gather(x, TIME_AXIS, &idx)?)
}

/// Applies the AR model to a `[.., lags, d]` history, newest first.
pub fn extrapolate_ar(g: &mut Graph, history: Var, store: &ParamStore, ar: &ArExtrapolator) -> Result<Var> {
    let w = g.param(store, ar.w);
    let b = g.param(store, ar.b);
    let s = g.shape(history);
    let (lags, d) = (s[s.len() - 2], s[s.len() - 1]);
    let ws = g.shape(w);
    if ws[1] != lags || ws[2] != d {
        return Err(Error::InsufficientHistory {
            needed: ws[1],
            available: lags,
        });
    }
    let y = g.ar_project(history, w)?;
    Ok(g.add(y, b)?)
}

/// `(W1 x + b1) ⊗ (W2 x + b2)` with `x = [ẑ, ĥ]`.
pub fn gate(g: &mut Graph, z_hat: Var, h_hat: Var, store: &ParamStore, p: &InteractionGate) -> Result<Var> {
    let x = g.concat(&[z_hat, h_hat], 3)?;
    let w1 = g.param(store, p.w1);
    let w2 = g.param(store, p.w2);
    let mut a = g.linear(x, w1)?;
    let mut b = g.linear(x, w2)?;
    if let Some(b1) = p.b1 {
        let v = g.param(store, b1);
        a = g.add(a, v)?;
    }
    if let Some(b2) = p.b2 {
        let v = g.param(store, b2);
        b = g.add(b, v)?;
    }
    Ok(g.mul(a, b)?)
}

/// Extrapolates the output of a decoupling block from its last position.
pub fn extrapolate_all(
    g: &mut Graph,
    block: &Decoupled,
    store: &ParamStore,
    params: &ExtrapParams,
    cfg: &ExtrapConfig,
) -> Result<Extrapolated> {
    let t_len = g.shape(block.components.mu_lt)[TIME_AXIS];
    let t = t_len - 1;
    let c = &block.components;
    let r = &block.residuals;
    let ar_inputs = [r.z1, r.z2, r.z3, r.z4, c.mu_st, c.sigma_st, c.mu_ce, c.sigma_ce];
    let mut ar_out = [c.mu_lt; 8];
    for (k, &x) in ar_inputs.iter().enumerate() {
        let hist = ar_history(g, x, t, cfg.delta_ar)?;
        ar_out[k] = extrapolate_ar(g, hist, store, &params.ar[k])?;
    }
    let mu_lt = extrapolate_longterm(g, c.mu_lt, t, cfg.t_out)?;
    let sigma_lt = extrapolate_longterm(g, c.sigma_lt, t, cfg.t_out)?;
    let mu_se = extrapolate_seasonal(g, c.mu_se, t, cfg.t_out, cfg.cycle)?;
    let sigma_se = extrapolate_seasonal(g, c.sigma_se, t, cfg.t_out, cfg.cycle)?;
    let h_hat = g.concat(
        &[mu_lt, sigma_lt, mu_se, sigma_se, ar_out[4], ar_out[5], ar_out[6], ar_out[7]],
        3,
    )?;
    let z_hat = g.concat(&ar_out[..4], 3)?;
    let s_hat = gate(g, z_hat, h_hat, store, &params.gate)?;
    Ok(Extrapolated { s_hat, h_hat, z_hat })
}

/// Frobenius norm of each lag's weight matrix: rows are horizons, columns
/// lags.
pub fn contribution_matrix(store: &ParamStore, ar: &ArExtrapolator) -> Vec<Vec<f64>> {
    let w = store.value(ar.w);
    let s = w.shape();
    let (h, l, dd) = (s[0], s[1], s[2] * s[3]);
    (0..h)
        .map(|i| {
            (0..l)
                .map(|j| {
                    let at = (i * l + j) * dd;
                    w.data()[at..at + dd].iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::decouple::{decouple_block, DecoupleConfig};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn seasonal_indices() {
        assert_eq!(seasonal_index(30, 1, 24).unwrap(), 7);
        assert_eq!(seasonal_index(30, 24, 24).unwrap(), 30);
        assert_eq!(seasonal_index(30, 25, 24).unwrap(), 7);
        assert_eq!(seasonal_index(23, 1, 24).unwrap(), 0);
        assert!(matches!(
            seasonal_index(22, 1, 24),
            Err(Error::InsufficientHistory { .. })
        ));
        for t in 23..60 {
            for i in 1..80 {
                let k = seasonal_index(t, i, 24).unwrap();
                assert!(k <= t);
                assert_eq!(k % 24, (t + i) % 24);
            }
        }
    }

    #[test]
    fn longterm_and_seasonal_copy() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 30, 1], |i| i as f64));
        let lt = extrapolate_longterm(&mut g, x, 29, 3).unwrap();
        assert_eq!(g.value(lt).data(), &[29.0; 3]);
        let se = extrapolate_seasonal(&mut g, x, 29, 3, 24).unwrap();
        assert_eq!(g.value(se).data(), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn ar_copy_last_and_bias_only() {
        let cfg = ExtrapConfig {
            t_out: 3,
            delta_ar: 4,
            cycle: 2,
            d_z: 2,
        };
        let mut store = ParamStore::new();
        let ar = ArExtrapolator::init(&mut store, "ar", &cfg, &mut rng());
        let w = store.value_mut(ar.w);
        *w = Tensor::zeros(&[3, 4, 2, 2]);
        for i in 0..3 {
            w.set(&[i, 0, 0, 0], 1.0);
            w.set(&[i, 0, 1, 1], 1.0);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 1, 6, 2], |i| (i as f64).sin()));
        let hist = ar_history(&mut g, x, 5, 4).unwrap();
        let y = extrapolate_ar(&mut g, hist, &store, &ar).unwrap();
        let (xv, yv) = (g.value(x).clone(), g.value(y).clone());
        for b in 0..2 {
            for i in 0..3 {
                for c in 0..2 {
                    assert_eq!(yv.get(&[b, 0, i, c]), xv.get(&[b, 0, 5, c]));
                }
            }
        }

        *store.value_mut(ar.w) = Tensor::zeros(&[3, 4, 2, 2]);
        *store.value_mut(ar.b) = Tensor::full(&[3, 2], 0.7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 1, 6, 2], |i| i as f64));
        let hist = ar_history(&mut g, x, 5, 4).unwrap();
        let y = extrapolate_ar(&mut g, hist, &store, &ar).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
        assert!(matches!(
            ar_history(&mut g, x, 2, 4),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn ar_matches_direct_formula() {
        let cfg = ExtrapConfig {
            t_out: 2,
            delta_ar: 2,
            cycle: 1,
            d_z: 1,
        };
        let mut r = rng();
        let mut store = ParamStore::new();
        let ar = ArExtrapolator::init(&mut store, "ar", &cfg, &mut r);
        *store.value_mut(ar.w) = Tensor::from_fn(&[2, 2, 1, 1], |_| r.gen_range(-1.0..1.0));
        *store.value_mut(ar.b) = Tensor::from_fn(&[2, 1], |_| r.gen_range(-1.0..1.0));
        let series = [0.3, -1.4, 2.2];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 3, 1], series.to_vec()));
        let hist = ar_history(&mut g, x, 2, 2).unwrap();
        let y = extrapolate_ar(&mut g, hist, &store, &ar).unwrap();
        let (w, b) = (store.value(ar.w).data(), store.value(ar.b).data());
        for i in 0..2 {
            let expect = w[i * 2] * series[2] + w[i * 2 + 1] * series[1] + b[i];
            assert!((g.value(y).data()[i] - expect).abs() < 1e-14);
        }
    }

    fn gate_oracle(x: &[f64], w1: &Tensor, w2: &Tensor, b1: &[f64], b2: &[f64]) -> Vec<f64> {
        let d = b1.len();
        let w = x.len();
        (0..d)
            .map(|r| {
                let a: f64 = (0..w).map(|c| w1.data()[r * w + c] * x[c]).sum::<f64>() + b1[r];
                let b: f64 = (0..w).map(|c| w2.data()[r * w + c] * x[c]).sum::<f64>() + b2[r];
                a * b
            })
            .collect()
    }

    #[test]
    fn gate_transparent_annihilator_and_oracle() {
        let d = 2;
        let mut r = rng();
        let mut store = ParamStore::new();
        let p = InteractionGate::init(&mut store, "gate", d, true, &mut r);
        let z = Tensor::from_fn(&[1, 3, 2, 4 * d], |_| r.gen_range(-1.0..1.0));
        let h = Tensor::from_fn(&[1, 3, 2, 8 * d], |_| r.gen_range(-1.0..1.0));
        *store.value_mut(p.b1.unwrap()) = Tensor::new(vec![d], vec![0.2, -0.3]);
        *store.value_mut(p.b2.unwrap()) = Tensor::new(vec![d], vec![0.5, 1.5]);

        let mut g = Graph::new();
        let (zv, hv) = (g.constant(z.clone()), g.constant(h.clone()));
        let s = gate(&mut g, zv, hv, &store, &p).unwrap();
        let (w1, w2) = (store.value(p.w1), store.value(p.w2));
        for row in 0..6 {
            let mut x = z.data()[row * 4 * d..(row + 1) * 4 * d].to_vec();
            x.extend_from_slice(&h.data()[row * 8 * d..(row + 1) * 8 * d]);
            let expect = gate_oracle(&x, w1, w2, &[0.2, -0.3], &[0.5, 1.5]);
            for c in 0..d {
                assert!((g.value(s).data()[row * d + c] - expect[c]).abs() < 1e-12);
            }
        }

        *store.value_mut(p.w2) = Tensor::zeros(&[d, 12 * d]);
        *store.value_mut(p.b2.unwrap()) = Tensor::full(&[d], 1.0);
        let mut g = Graph::new();
        let (zv, hv) = (g.constant(z.clone()), g.constant(h.clone()));
        let s = gate(&mut g, zv, hv, &store, &p).unwrap();
        let x = g.concat(&[zv, hv], 3).unwrap();
        let w1v = g.param(&store, p.w1);
        let a = g.linear(x, w1v).unwrap();
        let b1v = g.param(&store, p.b1.unwrap());
        let a = g.add(a, b1v).unwrap();
        assert_eq!(g.value(s).data(), g.value(a).data());

        *store.value_mut(p.w1) = Tensor::zeros(&[d, 12 * d]);
        *store.value_mut(p.b1.unwrap()) = Tensor::zeros(&[d]);
        let mut g = Graph::new();
        let (zv, hv) = (g.constant(z), g.constant(h));
        let s = gate(&mut g, zv, hv, &store, &p).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_without_bias_is_quadratic() {
        let d = 2;
        let mut r = rng();
        let mut store = ParamStore::new();
        let p = InteractionGate::init(&mut store, "gate", d, false, &mut r);
        let z = Tensor::from_fn(&[1, 1, 1, 4 * d], |_| r.gen_range(-1.0..1.0));
        let h = Tensor::from_fn(&[1, 1, 1, 8 * d], |_| r.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (zv, hv) = (g.constant(z.clone()), g.constant(h.clone()));
        let s1 = gate(&mut g, zv, hv, &store, &p).unwrap();
        let (zv, hv) = (g.constant(z.map(|v| 3.0 * v)), g.constant(h.map(|v| 3.0 * v)));
        let s3 = gate(&mut g, zv, hv, &store, &p).unwrap();
        for (a, b) in g.value(s1).data().iter().zip(g.value(s3).data()) {
            assert!((9.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contribution_matrix_norms() {
        let cfg = ExtrapConfig {
            t_out: 2,
            delta_ar: 3,
            cycle: 1,
            d_z: 8,
        };
        let mut store = ParamStore::new();
        let ar = ArExtrapolator::init(&mut store, "ar", &cfg, &mut rng());
        *store.value_mut(ar.w) = Tensor::from_fn(&[2, 3, 8, 8], |i| if (i % 64) % 9 == 0 { 1.0 } else { 0.0 });
        let c = contribution_matrix(&store, &ar);
        assert!(c.iter().flatten().all(|&v| (v - 8f64.sqrt()).abs() < 1e-14));
        let base = contribution_matrix(&store, &ar);
        store.value_mut(ar.w).scale_in_place(2.0);
        let doubled = contribution_matrix(&store, &ar);
        for (a, b) in base.iter().flatten().zip(doubled.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
        *store.value_mut(ar.w) = Tensor::zeros(&[2, 3, 8, 8]);
        assert!(contribution_matrix(&store, &ar).iter().flatten().all(|&v| v == 0.0));
    }

    fn setup(d: usize) -> (ParamStore, ExtrapParams, ExtrapConfig, DecoupleConfig) {
        let cfg = ExtrapConfig {
            t_out: 3,
            delta_ar: 4,
            cycle: 3,
            d_z: d,
        };
        let dc = DecoupleConfig {
            delta_st: 4,
            d_z: d,
            ..DecoupleConfig::new(2, 12, 3)
        };
        let mut store = ParamStore::new();
        let p = ExtrapParams::init(&mut store, &cfg, true, &mut rng());
        (store, p, cfg, dc)
    }

    #[test]
    fn extrapolate_all_shapes_and_copy_last() {
        let d = 2;
        let (mut store, p, cfg, dc) = setup(d);
        for ar in &p.ar {
            let w = store.value_mut(ar.w);
            *w = Tensor::from_fn(&[3, 4, d, d], |i| {
                let (j, rc) = ((i / (d * d)) % 4, i % (d * d));
                if j == 0 && rc % (d + 1) == 0 {
                    1.0
                } else {
                    0.0
                }
            });
        }
        let mut r = rng();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 2, 12, d], |_| r.gen_range(-2.0..2.0)));
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let block = decouple_block(&mut g, x, a, &dc).unwrap();
        let e = extrapolate_all(&mut g, &block, &store, &p, &cfg).unwrap();
        assert_eq!(g.shape(e.s_hat), &[1, 2, 3, d]);
        assert_eq!(g.shape(e.h_hat), &[1, 2, 3, 8 * d]);
        assert_eq!(g.shape(e.z_hat), &[1, 2, 3, 4 * d]);
        let z = g.concat(&block.residuals.to_array(), 3).unwrap();
        let h = g.concat(&block.components.to_array(), 3).unwrap();
        let last = g.gather(z, 2, &[11, 11, 11]).unwrap();
        assert_eq!(g.value(e.z_hat).data(), g.value(last).data());
        let hist_h = g.gather(h, 2, &[11, 11, 11]).unwrap();
        let (hh, hl) = (g.value(e.h_hat), g.value(hist_h));
        for row in 0..6 {
            for c in 4 * d..8 * d {
                assert_eq!(hh.data()[row * 8 * d + c], hl.data()[row * 8 * d + c]);
            }
            // Long-term slice is replicated as well.
            for c in 0..2 * d {
                assert_eq!(hh.data()[row * 8 * d + c], hl.data()[row * 8 * d + c]);
            }
        }
    }

    #[test]
    fn extrapolate_all_ar_gradients() {
        let d = 2;
        let (mut store, p, cfg, dc) = setup(d);
        let mut r = rng();
        for ar in &p.ar {
            *store.value_mut(ar.b) = Tensor::from_fn(&[3, d], |_| r.gen_range(-0.5..0.5));
        }
        let x = Tensor::from_fn(&[1, 2, 12, d], |_| r.gen_range(-2.0..2.0));
        let weights = Tensor::from_fn(&[1, 2, 3, d], |_| r.gen_range(-1.0..1.0));
        let loss = |store: &ParamStore, g: &mut Graph| {
            let xv = g.constant(x.clone());
            let a = g.constant(Tensor::zeros(&[2, 2]));
            let block = decouple_block(g, xv, a, &dc).unwrap();
            let e = extrapolate_all(g, &block, store, &p, &cfg).unwrap();
            let wv = g.constant(weights.clone());
            let m = g.mul(e.s_hat, wv).unwrap();
            g.sum_all(m).unwrap()
        };
        let mut g = Graph::new();
        let l = loss(&store, &mut g);
        g.backward(l).unwrap();
        store.accumulate(&g);
        let h = 1e-5;
        for ar in &p.ar {
            for id in [ar.w, ar.b] {
                let grad = store.grad(id).clone();
                let n = store.value(id).numel();
                for k in (0..n).step_by(3) {
                    let orig = store.value(id).data()[k];
                    store.value_mut(id).data_mut()[k] = orig + h;
                    let up = {
                        let mut g = Graph::new();
                        let l = loss(&store, &mut g);
                        g.value(l).item()
                    };
                    store.value_mut(id).data_mut()[k] = orig - h;
                    let down = {
                        let mut g = Graph::new();
                        let l = loss(&store, &mut g);
                        g.value(l).item()
                    };
                    store.value_mut(id).data_mut()[k] = orig;
                    let num = (up - down) / (2.0 * h);
                    let ana = grad.data()[k];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{} [{k}]: {ana} vs {num}", store.get(id).name);
                }
            }
        }
    }

    #[test]
    fn parameter_count_ignores_input_length() {
        let cfg = ExtrapConfig {
            t_out: 3,
            delta_ar: 8,
            cycle: 24,
            d_z: 8,
        };
        let mut store = ParamStore::new();
        ExtrapParams::init(&mut store, &cfg, true, &mut rng());
        assert_eq!(store.scalar_count(), 8 * (3 * 8 * 64 + 3 * 8) + 2 * 8 * 96 + 2 * 8);
    }
}
