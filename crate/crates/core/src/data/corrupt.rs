use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::SeriesBatch;
use crate::error::{Error, Result};

/// A data corruption, written `gaussian:<std>` or `missing:<rate>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    /// Additive i.i.d. noise with this standard deviation.
    Gaussian(f64),
    /// Each cell is dropped with this probability.
    Missing(f64),
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::config(format!("corruption `{s}` must look like gaussian:0.1 or missing:0.2")))?;
        let v: f64 = arg
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("corruption parameter `{arg}` is not a number")))?;
        let c = match kind.trim() {
            "gaussian" => Corruption::Gaussian(v),
            "missing" => Corruption::Missing(v),
            other => return Err(Error::config(format!("unknown corruption kind `{other}`"))),
        };
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Corruption::Gaussian(s) => write!(f, "gaussian:{s}"),
            Corruption::Missing(r) => write!(f, "missing:{r}"),
        }
    }
}

impl Corruption {
    fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Gaussian(s) if !(s >= 0.0 && s.is_finite()) => {
                Err(Error::config(format!("noise std must be non-negative, got {s}")))
            }
            Corruption::Missing(r) if !(0.0..=1.0).contains(&r) => {
                Err(Error::config(format!("missing rate must lie in [0, 1], got {r}")))
            }
            _ => Ok(()),
        }
    }
}

/// Returns a corrupted copy of `batch`. Dropped cells are masked and
/// re-imputed by carrying the last observation forward.
pub fn corrupt(batch: &SeriesBatch, kind: Corruption, seed: u64) -> Result<SeriesBatch> {
    kind.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    match kind {
        Corruption::Gaussian(s) => {
            if s > 0.0 {
                let normal = Normal::new(0.0, s).unwrap();
                for v in out.values.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        Corruption::Missing(rate) => {
            for (v, m) in out.values.data_mut().iter_mut().zip(out.missing.iter_mut()) {
                if rng.gen::<f64>() < rate {
                    *v = 0.0;
                    *m = true;
                }
            }
            out.impute_locf();
        }
    }
    Ok(out)
}
