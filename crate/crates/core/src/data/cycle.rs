use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::SeriesBatch;
use crate::error::{Error, Result};

/// Autocorrelation peaks below this are flagged unreliable.
pub const RELIABLE_PEAK: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleEstimate {
    pub period: usize,
    /// Mean autocorrelation at `period`.
    pub peak: f64,
}

impl CycleEstimate {
    pub fn reliable(&self) -> bool {
        self.peak >= RELIABLE_PEAK
    }
}

/// Sample autocorrelation of `x` for lags `0..=max_lag`, computed through
/// the power spectrum. A constant series yields all zeros.
pub fn autocorrelation(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n.max(1) as f64;
    let ss: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    // Centering a constant can leave rounding dust; treat it as flat.
    if ss <= n as f64 * (mean.abs() * 1e-14).powi(2) {
        return vec![0.0; max_lag + 1];
    }
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in &mut buf {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let r0 = buf[0].re;
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| buf[k].re / r0)
        .chain(std::iter::repeat(0.0))
        .take(max_lag + 1)
        .collect()
}

/// Lag in `[2, max_period]` maximising the autocorrelation averaged over
/// variables; ties go to the smaller lag.
pub fn detect_cycle(batch: &SeriesBatch, max_period: usize) -> Result<CycleEstimate> {
    if max_period < 2 {
        return Err(Error::config("max_period must be at least 2"));
    }
    if batch.len() < 2 * max_period {
        return Err(Error::InsufficientHistory {
            needed: 2 * max_period,
            available: batch.len(),
        });
    }
    let mean = mean_autocorrelation(batch, max_period);
    let mut best = CycleEstimate {
        period: 2,
        peak: mean[2],
    };
    for (lag, &a) in mean.iter().enumerate().skip(3) {
        if a > best.peak {
            best = CycleEstimate { period: lag, peak: a };
        }
    }
    Ok(best)
}

/// Share of the argmax peak a divisor lag must reach to be preferred.
pub const HARMONIC_SHARE: f64 = 0.9;

/// Like [`detect_cycle`], but when a divisor of the argmax lag reaches
/// [`HARMONIC_SHARE`] of its autocorrelation, the smallest such divisor wins.
/// Whole multiples of the true period often peak about as high as the
/// period itself.
pub fn detect_fundamental_cycle(batch: &SeriesBatch, max_period: usize) -> Result<CycleEstimate> {
    let best = detect_cycle(batch, max_period)?;
    let mean = mean_autocorrelation(batch, max_period);
    let found = (2..best.period)
        .filter(|p| best.period % p == 0)
        .find(|&p| mean[p] >= HARMONIC_SHARE * best.peak)
        .map(|p| CycleEstimate { period: p, peak: mean[p] });
    Ok(found.unwrap_or(best))
}

fn mean_autocorrelation(batch: &SeriesBatch, max_period: usize) -> Vec<f64> {
    let mut mean = vec![0.0; max_period + 1];
    for n in 0..batch.n_vars() {
        for (m, a) in mean.iter_mut().zip(autocorrelation(batch.row(n), max_period)) {
            *m += a / batch.n_vars() as f64;
        }
    }
    mean
}
