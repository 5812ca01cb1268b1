use std::ops::Range;

use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::tape::Tensor;

/// One forecasting sample. `origin` is the index of the last input step.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub origin: usize,
    /// `[N, t_in]`, steps `origin + 1 - t_in ..= origin`.
    pub input: Tensor,
    /// `[N, t_out]`, steps `origin + 1 ..= origin + t_out`.
    pub target: Tensor,
}

/// Every valid window of `batch`, oldest origin first.
pub fn make_windows(batch: &SeriesBatch, t_in: usize, t_out: usize) -> impl Iterator<Item = Window> + '_ {
    origins(batch.len(), t_in, t_out, 0..batch.len()).into_iter().map(move |origin| Window {
        origin,
        input: slice_steps(batch, origin + 1 - t_in, t_in),
        target: slice_steps(batch, origin + 1, t_out),
    })
}

fn slice_steps(batch: &SeriesBatch, start: usize, len: usize) -> Tensor {
    let n = batch.n_vars();
    let mut data = Vec::with_capacity(n * len);
    for v in 0..n {
        data.extend_from_slice(&batch.row(v)[start..start + len]);
    }
    Tensor::new(vec![n, len], data)
}

/// Origins whose whole target block lies in `targets`; inputs may reach
/// back before it.
pub fn origins(len: usize, t_in: usize, t_out: usize, targets: Range<usize>) -> Vec<usize> {
    if t_in == 0 || t_out == 0 {
        return Vec::new();
    }
    let first = (t_in - 1).max(targets.start.saturating_sub(1));
    let end = targets.end.min(len);
    (first..)
        .take_while(|&o| o + t_out < end)
        .collect()
}

/// Chronological time ranges. A window belongs to the part holding all of
/// its targets, so no target is shared across parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// Cuts `len` steps into train, validation and test fractions.
    pub fn chronological(len: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        let ok = |f: f64| f.is_finite() && f > 0.0;
        if !ok(train_frac) || !(val_frac.is_finite() && val_frac >= 0.0) || train_frac + val_frac >= 1.0 {
            return Err(Error::config(format!(
                "split fractions train={train_frac}, val={val_frac} must be positive and sum below 1"
            )));
        }
        let a = (len as f64 * train_frac).round() as usize;
        let b = (len as f64 * (train_frac + val_frac)).round() as usize;
        Ok(Self {
            train: 0..a,
            val: a..b,
            test: b..len,
        })
    }

    pub fn len(&self) -> usize {
        self.test.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacked windows ready for the network.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub origins: Vec<usize>,
    /// `[B, N, t_in]`.
    pub inputs: Tensor,
    /// `[B, N, t_out]`.
    pub targets: Tensor,
    /// `[B, N, t_out]`: 1 for observed targets, 0 for imputed ones.
    pub weights: Tensor,
}

impl WindowBatch {
    /// Inputs are read from `inputs`, targets and their mask from `truth`;
    /// both must cover the same steps.
    pub fn gather(inputs: &SeriesBatch, truth: &SeriesBatch, origins: &[usize], t_in: usize, t_out: usize) -> Self {
        let n = inputs.n_vars();
        let b = origins.len();
        let (mut x, mut y, mut w) = (
            Vec::with_capacity(b * n * t_in),
            Vec::with_capacity(b * n * t_out),
            Vec::with_capacity(b * n * t_out),
        );
        for &o in origins {
            for v in 0..n {
                x.extend_from_slice(&inputs.row(v)[o + 1 - t_in..=o]);
                y.extend_from_slice(&truth.row(v)[o + 1..=o + t_out]);
                w.extend((o + 1..=o + t_out).map(|t| if truth.is_missing(v, t) { 0.0 } else { 1.0 }));
            }
        }
        Self {
            origins: origins.to_vec(),
            inputs: Tensor::new(vec![b, n, t_in], x),
            targets: Tensor::new(vec![b, n, t_out], y),
            weights: Tensor::new(vec![b, n, t_out], w),
        }
    }

    pub fn fully_observed(&self) -> bool {
        self.weights.data().iter().all(|&w| w == 1.0)
    }
}
