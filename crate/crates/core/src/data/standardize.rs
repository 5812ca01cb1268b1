use super::SeriesBatch;
use crate::error::{Error, Result};

/// Smallest standard deviation a variable is scaled by.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable affine standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on steps `range` of `batch`, ignoring missing cells.
    pub fn fit(batch: &SeriesBatch, range: std::ops::Range<usize>) -> Result<Self> {
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for n in 0..batch.n_vars() {
            let obs: Vec<f64> = range
                .clone()
                .filter(|&t| !batch.is_missing(n, t))
                .map(|t| batch.get(n, t))
                .collect();
            if obs.is_empty() {
                return Err(Error::Data(format!(
                    "variable `{}` has no observed values in the fitting range",
                    batch.var_names[n]
                )));
            }
            let k = obs.len() as f64;
            let m = obs.iter().sum::<f64>() / k;
            let v = obs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / k;
            mean.push(m);
            std.push(v.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    /// Leaves values unchanged.
    pub fn identity(n_vars: usize) -> Self {
        Self {
            mean: vec![0.0; n_vars],
            std: vec![1.0; n_vars],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_value(&self, n: usize, x: f64) -> f64 {
        (x - self.mean[n]) / self.std[n]
    }

    pub fn inverse_value(&self, n: usize, z: f64) -> f64 {
        z * self.std[n] + self.mean[n]
    }

    /// Scales a standardised spread (or error) back to original units.
    pub fn inverse_scale(&self, n: usize, s: f64) -> f64 {
        s * self.std[n]
    }

    pub fn transform(&self, batch: &SeriesBatch) -> SeriesBatch {
        self.map(batch, |s, n, x| s.transform_value(n, x))
    }

    pub fn inverse(&self, batch: &SeriesBatch) -> SeriesBatch {
        self.map(batch, |s, n, x| s.inverse_value(n, x))
    }

    fn map(&self, batch: &SeriesBatch, f: impl Fn(&Self, usize, f64) -> f64) -> SeriesBatch {
        assert_eq!(batch.n_vars(), self.n_vars(), "standardizer width mismatch");
        let t = batch.len();
        let mut out = batch.clone();
        for (i, v) in out.values.data_mut().iter_mut().enumerate() {
            *v = f(self, i / t, *v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tape::Tensor;

    #[test]
    fn fitted_split_is_unit_scaled() {
        let b = SeriesBatch::from_values(Tensor::from_fn(&[3, 50], |i| ((i * 7919) % 101) as f64 * 0.37 - 4.0));
        let s = Standardizer::fit(&b, 0..30).unwrap();
        let z = s.transform(&b);
        for n in 0..3 {
            let row = &z.row(n)[..30];
            let m = row.iter().sum::<f64>() / 30.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 30.0;
            assert!(m.abs() < 1e-10);
            assert!((v.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_variable_uses_floor() {
        let b = SeriesBatch::from_values(Tensor::full(&[1, 10], 4.0));
        let s = Standardizer::fit(&b, 0..10).unwrap();
        assert_eq!(s.std, vec![STD_FLOOR]);
        assert!(s.transform(&b).values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_cells_are_ignored() {
        let mut b = SeriesBatch::from_values(Tensor::new(vec![1, 4], vec![1.0, 100.0, 3.0, 5.0]));
        b.missing[1] = true;
        let s = Standardizer::fit(&b, 0..4).unwrap();
        assert_eq!(s.mean, vec![3.0]);
        b.missing = vec![true; 4];
        assert!(Standardizer::fit(&b, 0..4).is_err());
    }

    proptest! {
        #[test]
        fn inverse_undoes_transform(values in prop::collection::vec(-1e3f64..1e3, 12..40)) {
            let t = values.len() / 2;
            let b = SeriesBatch::from_values(Tensor::new(vec![2, t], values[..2 * t].to_vec()));
            let s = Standardizer::fit(&b, 0..t).unwrap();
            let back = s.inverse(&s.transform(&b));
            for (x, y) in back.values.data().iter().zip(b.values.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
