//! INI run configuration with `[model]`, `[train]` and `[data]` sections.

use std::fmt::Write as _;
use std::path::Path;

use ini::Ini;

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::train::TrainConfig;

/// Input window used when a configuration does not set `t_in`.
pub const DEFAULT_T_IN: usize = 48;
/// Forecast horizon used when a configuration does not set `t_out`.
pub const DEFAULT_T_OUT: usize = 3;

/// Keys that fix a model's shape, applied before the rest so defaults
/// derived from them (long-term and seasonal windows) follow.
const SHAPE_KEYS: [&str; 4] = ["n_vars", "t_in", "t_out", "cycle"];

/// A parsed run configuration. Model keys are kept as overrides because
/// the number of variables and the cycle come from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: Vec<(String, String)>,
    pub train: TrainConfig,
    pub data: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Vec::new(),
            train: TrainConfig::default(),
            data: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    /// Parses INI text. Unknown sections and keys are errors.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: e.line,
            message: e.msg.to_string(),
        })?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            for (key, value) in props.iter() {
                let section = section.ok_or_else(|| {
                    Error::config(format!("{source}: key `{key}` appears before any section"))
                })?;
                cfg.set(section, key, value).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{source}: [{section}] {m}")),
                    other => other,
                })?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Sets `section.key`; model values are checked eagerly.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match section {
            "model" => {
                ModelConfig::new(1, DEFAULT_T_IN, DEFAULT_T_OUT, 1).set(key, value)?;
                self.model.retain(|(k, _)| k != key);
                self.model.push((key.to_string(), value.to_string()));
                Ok(())
            }
            "train" => self.train.set(key, value),
            "data" => self.data.set(key, value),
            other => Err(Error::config(format!("unknown section `[{other}]`"))),
        }
    }

    /// Applies a command-line override written `section.key=value`.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{spec}` must look like section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::config(format!("override `{spec}` must name a section, e.g. train.lr=0.001")))?;
        self.set(section, key, value.trim())
    }

    fn model_value(&self, key: &str) -> Option<&str> {
        self.model.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Model configuration for data with `n_vars` variables and cycle
    /// `cycle`. Explicit `n_vars` or `cycle` keys must agree with the data.
    pub fn model_config(&self, n_vars: usize, cycle: usize) -> Result<ModelConfig> {
        let parse = |key: &str, default: usize| -> Result<usize> {
            self.model_value(key).map_or(Ok(default), |v| {
                v.parse()
                    .map_err(|_| Error::config(format!("invalid value `{v}` for `{key}`")))
            })
        };
        let (n, m) = (parse("n_vars", n_vars)?, parse("cycle", cycle)?);
        if n != n_vars {
            return Err(Error::Dimension {
                what: "number of variables",
                expected: n,
                found: n_vars,
            });
        }
        let mut mc = ModelConfig::new(n, parse("t_in", DEFAULT_T_IN)?, parse("t_out", DEFAULT_T_OUT)?, m);
        mc.tau = mc.tau.max(1);
        for (k, v) in self.model.iter().filter(|(k, _)| !SHAPE_KEYS.contains(&k.as_str())) {
            mc.set(k, v)?;
        }
        mc.validate()?;
        Ok(mc)
    }

    /// Fully resolved INI text for `model`; parsing it back reproduces the
    /// same run.
    pub fn resolved(&self, model: &ModelConfig) -> String {
        let mut out = String::from("# resolved run configuration\n");
        let mut section = |name: &str, entries: Vec<(&'static str, String)>| {
            let _ = writeln!(out, "\n[{name}]");
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
        };
        section("model", model.entries());
        section("train", self.train.entries());
        section("data", self.data.entries());
        out
    }
}
