//! Series container, CSV ingestion, standardisation, synthetic data,
//! corruptions and cycle detection.

mod corrupt;
mod cycle;
mod standardize;
mod synth;

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

pub use corrupt::{corrupt, Corruption};
pub use cycle::{autocorrelation, detect_cycle, detect_fundamental_cycle, CycleEstimate, HARMONIC_SHARE, RELIABLE_PEAK};
pub use standardize::{Standardizer, STD_FLOOR};
pub use synth::{generate, GroundTruth, SynthSpec};

use crate::error::{Error, Result};
use crate::tape::Tensor;

/// A dense multivariate series, `values[n, t]`, with an explicit
/// missing-value mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesBatch {
    /// `[n_vars, len]`. Missing cells hold an imputed value.
    pub values: Tensor,
    /// Row-major like `values`; `true` marks an imputed cell.
    pub missing: Vec<bool>,
    pub var_names: Vec<String>,
    /// Integer time label of each step, strictly increasing.
    pub times: Vec<i64>,
    /// Steps per cycle, when known.
    pub cycle: Option<usize>,
}

impl SeriesBatch {
    /// Builds a fully observed series with times `0..len`.
    pub fn from_values(values: Tensor) -> Self {
        assert_eq!(values.ndim(), 2, "values must be [n_vars, len]");
        let (n, t) = (values.shape()[0], values.shape()[1]);
        Self {
            missing: vec![false; n * t],
            var_names: (0..n).map(|i| format!("v{i}")).collect(),
            times: (0..t as i64).collect(),
            cycle: None,
            values,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, n: usize, t: usize) -> f64 {
        self.values.data()[n * self.len() + t]
    }

    pub fn is_missing(&self, n: usize, t: usize) -> bool {
        self.missing[n * self.len() + t]
    }

    /// One variable's trace.
    pub fn row(&self, n: usize) -> &[f64] {
        let t = self.len();
        &self.values.data()[n * t..(n + 1) * t]
    }

    /// Step-to-step changes of every variable, one step shorter.
    /// Autocorrelation of the differences shows the seasonal peak that
    /// persistence hides in raw levels.
    pub fn differenced(&self) -> SeriesBatch {
        let t = self.len().saturating_sub(1);
        let diffs = (0..self.n_vars())
            .flat_map(|n| self.row(n).windows(2).map(|w| w[1] - w[0]))
            .collect();
        let mut out = SeriesBatch::from_values(Tensor::new(vec![self.n_vars(), t], diffs));
        out.var_names = self.var_names.clone();
        out.times = self.times.iter().skip(1).copied().collect();
        out.cycle = self.cycle;
        out
    }

    /// Position of a time label.
    pub fn index_of(&self, time: i64) -> Option<usize> {
        self.times.binary_search(&time).ok()
    }

    /// Steps `range` of every variable.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let (n, t) = (self.n_vars(), self.len());
        let w = range.len();
        let mut values = Vec::with_capacity(n * w);
        let mut missing = Vec::with_capacity(n * w);
        for v in 0..n {
            values.extend_from_slice(&self.values.data()[v * t + range.start..v * t + range.end]);
            missing.extend_from_slice(&self.missing[v * t + range.start..v * t + range.end]);
        }
        Self {
            values: Tensor::new(vec![n, w], values),
            missing,
            var_names: self.var_names.clone(),
            times: self.times[range].to_vec(),
            cycle: self.cycle,
        }
    }

    /// Replaces each missing cell by the last observed value of its
    /// variable; leading gaps take the first observed value and a variable
    /// with no observation becomes 0.
    pub fn impute_locf(&mut self) {
        let t = self.len();
        for n in 0..self.n_vars() {
            let row = &mut self.values.data_mut()[n * t..(n + 1) * t];
            let miss = &self.missing[n * t..(n + 1) * t];
            let first = miss.iter().position(|&m| !m).map(|i| row[i]).unwrap_or(0.0);
            let mut last = first;
            for (v, &m) in row.iter_mut().zip(miss) {
                if m {
                    *v = last;
                } else {
                    last = *v;
                }
            }
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let map = |e: csv::Error| Error::Data(e.to_string());
        let mut header = vec!["time".to_string()];
        header.extend(self.var_names.iter().cloned());
        w.write_record(&header).map_err(map)?;
        let mut rec = Vec::with_capacity(self.n_vars() + 1);
        for t in 0..self.len() {
            rec.clear();
            rec.push(self.times[t].to_string());
            for n in 0..self.n_vars() {
                rec.push(if self.is_missing(n, t) {
                    String::new()
                } else {
                    self.get(n, t).to_string()
                });
            }
            w.write_record(&rec).map_err(map)?;
        }
        w.flush().map_err(|e| Error::Data(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Parses `time,<var>,...` rows. `source` names the input in errors.
    pub fn read_csv<R: Read>(input: R, source: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(input);
        let parse_err = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.len() < 2 || header.get(0) != Some("time") {
            return Err(parse_err(1, "header must be `time,<var>,...`".into()));
        }
        let var_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let n = var_names.len();
        let mut times = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut miss: Vec<Vec<bool>> = vec![Vec::new(); n];
        for rec in reader.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            Self::push_record(&rec, line, n, &mut times, &mut cols, &mut miss).map_err(|m| parse_err(line, m))?;
        }
        Self::assemble(var_names, times, cols, miss)
    }

    fn push_record(
        rec: &csv::StringRecord,
        line: usize,
        n: usize,
        times: &mut Vec<i64>,
        cols: &mut [Vec<f64>],
        miss: &mut [Vec<bool>],
    ) -> std::result::Result<(), String> {
        if rec.len() != n + 1 {
            return Err(format!("expected {} fields, found {}", n + 1, rec.len()));
        }
        let time: i64 = rec[0]
            .parse()
            .map_err(|_| format!("time `{}` is not an integer", &rec[0]))?;
        if let Some(&prev) = times.last() {
            if time <= prev {
                return Err(format!("time {time} does not follow {prev} (line {line})"));
            }
        }
        times.push(time);
        for (i, cell) in rec.iter().skip(1).enumerate() {
            if cell.is_empty() {
                cols[i].push(0.0);
                miss[i].push(true);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| format!("`{cell}` in column {} is not a number", i + 1))?;
            if !v.is_finite() {
                return Err(format!("non-finite value `{cell}` in column {}", i + 1));
            }
            cols[i].push(v);
            miss[i].push(false);
        }
        Ok(())
    }

    fn assemble(var_names: Vec<String>, times: Vec<i64>, cols: Vec<Vec<f64>>, miss: Vec<Vec<bool>>) -> Result<Self> {
        let (n, t) = (var_names.len(), times.len());
        let mut out = Self {
            values: Tensor::new(vec![n, t], cols.concat()),
            missing: miss.concat(),
            var_names,
            times,
            cycle: None,
        };
        out.impute_locf();
        Ok(out)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f), &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let values = Tensor::new(vec![2, 3], vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 7e300, -0.0]);
        let mut b = SeriesBatch::from_values(values);
        b.var_names = vec!["a".into(), "b".into()];
        b.times = vec![-1, 5, 6];
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let back = SeriesBatch::read_csv(&buf[..], "mem").unwrap();
        assert_eq!(back, b);
        for (x, y) in back.values.data().iter().zip(b.values.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_cells_are_masked_and_carried_forward() {
        let text = "time,a,b\n0,1.5,\n1,,2\n2,4,3\n";
        let b = SeriesBatch::read_csv(text.as_bytes(), "mem").unwrap();
        assert!(b.is_missing(0, 1));
        assert_eq!(b.get(0, 1), 1.5);
        assert!(b.is_missing(1, 0));
        assert_eq!(b.get(1, 0), 2.0);
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn parse_errors_cite_lines() {
        let ragged = "time,a,b\n0,1,2\n1,3,4\n2,5\n";
        match SeriesBatch::read_csv(ragged.as_bytes(), "f.csv") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let bad = "time,a\n0,1\n1,x\n";
        match SeriesBatch::read_csv(bad.as_bytes(), "f.csv") {
            Err(e @ Error::Parse { line: 3, .. }) => assert!(e.to_string().contains("f.csv")),
            other => panic!("{other:?}"),
        }
        let order = "time,a\n0,1\n2,1\n1,1\n";
        assert!(matches!(
            SeriesBatch::read_csv(order.as_bytes(), "f"),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(SeriesBatch::read_csv("t,a\n0,1\n".as_bytes(), "f").is_err());
    }

    #[test]
    fn slice_and_lookup() {
        let b = SeriesBatch::from_values(Tensor::from_fn(&[2, 5], |i| i as f64));
        let s = b.slice(1..4);
        assert_eq!(s.row(1), &[6.0, 7.0, 8.0]);
        assert_eq!(s.times, vec![1, 2, 3]);
        assert_eq!(b.index_of(3), Some(3));
        assert_eq!(b.index_of(9), None);
    }
}
