//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, nesting by dotted keys
//! (`condense.lr = 0.05`). Unknown keys, malformed values and out-of-range
//! settings are rejected. `preset = desk` switches the base defaults to the
//! four-client desk task before any other key applies, wherever it appears.

use super::SyntheticSpec;
use crate::condense::KernelSpec;
use crate::fed::{Method, RunConfig};
use crate::numerics::Precision;
use crate::select::Normalization;
use crate::{Error, Result};

/// Everything a run needs: protocol settings and the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub preset: Preset,
    pub run: RunConfig,
    pub data: SyntheticSpec,
    /// `None` follows the master seed.
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Standard,
    Desk,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::Desk => "desk",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Preset::Standard),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }
}

/// Every accepted key, in emission order.
pub const KEYS: &[&str] = &[
    "preset",
    "method",
    "rounds",
    "percent",
    "clients",
    "beta",
    "seed",
    "precision",
    "parallel",
    "encoder.depth",
    "encoder.width",
    "condense.epochs",
    "condense.lr",
    "condense.momentum",
    "condense.batch_size",
    "condense.kernel",
    "condense.degree",
    "condense.offset",
    "condense.bandwidth",
    "condense.median_bandwidth",
    "condense.grad_clip",
    "select.alpha",
    "select.b",
    "select.normalization",
    "server.epochs",
    "server.lr",
    "server.momentum",
    "server.batch_size",
    "server.tau",
    "server.contrastive_weight",
    "server.include_positive",
    "proto.k",
    "fedavg.epochs",
    "fedavg.lr",
    "fedavg.momentum",
    "fedavg.batch_size",
    "data.classes",
    "data.train_per_class",
    "data.test_per_class",
    "data.side",
    "data.channels",
    "data.noise",
    "data.jitter",
    "data.contrast",
    "data.min_distance",
    "data.seed",
];

impl Default for Config {
    fn default() -> Self {
        Self::for_preset(Preset::Standard)
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key}: expected {want}, got {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, want))
}

fn real(key: &str, value: &str) -> Result<f64> {
    let v: f64 = num(key, value, "a number")?;
    if !v.is_finite() {
        return Err(bad(key, value, "a finite number"));
    }
    Ok(v)
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn kernel_parts(k: KernelSpec) -> (&'static str, u32, f64, f64) {
    match k {
        KernelSpec::Linear => ("linear", 2, 1.0, 1.0),
        KernelSpec::Poly { degree, offset } => ("poly", degree, offset, 1.0),
        KernelSpec::Gaussian { bandwidth } => ("gaussian", 2, 1.0, bandwidth),
    }
}

impl Config {
    pub fn for_preset(preset: Preset) -> Self {
        let run = match preset {
            Preset::Standard => RunConfig::default(),
            Preset::Desk => RunConfig::desk(Method::FedVck, 0),
        };
        Self { preset, run, data: SyntheticSpec::default(), data_seed: None }
    }

    /// Parses a whole file. An empty text yields the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&Self::read_pairs(text)?)
    }

    /// The `(key, value)` lines of a file, unvalidated.
    pub fn read_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    /// Applies `pairs` in order on top of the preset they name (or the
    /// standard defaults), then validates.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((k, v)) => Preset::parse(v).ok_or_else(|| bad(k, v, "standard or desk"))?,
            None => Preset::Standard,
        };
        let mut cfg = Self::for_preset(preset);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key. Range checks that involve several keys wait for
    /// [`Config::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let r = &mut self.run;
        let d = &mut self.data;
        let uint = |v: &str| num::<usize>(key, v, "a non-negative integer");
        match key {
            // applied up front by `from_pairs`
            "preset" => {
                Preset::parse(value).ok_or_else(|| bad(key, value, "standard or desk"))?;
            }
            "method" => {
                r.method = Method::parse(value)
                    .ok_or_else(|| bad(key, value, "fedvck, fedavg, fedvck_no_lrc, fedvck_no_lrc_no_pw or fedvck_vanilla"))?
            }
            "rounds" => r.rounds = uint(value)?,
            "percent" => r.percent = real(key, value)?,
            "clients" => r.clients = uint(value)?,
            "beta" => r.beta = real(key, value)?,
            "seed" => r.seed = num(key, value, "an unsigned integer")?,
            "precision" => r.precision = Precision::parse(value).ok_or_else(|| bad(key, value, "f32 or f64"))?,
            "parallel" => r.parallel = flag(key, value)?,
            "encoder.depth" => r.encoder_depth = uint(value)?,
            "encoder.width" => r.encoder_width = uint(value)?,
            "condense.epochs" => r.condense.epochs = uint(value)?,
            "condense.lr" => r.condense.lr = real(key, value)?,
            "condense.momentum" => r.condense.momentum = real(key, value)?,
            "condense.batch_size" => r.condense.batch_size = uint(value)?,
            "condense.kernel" => {
                let (_, degree, offset, bandwidth) = kernel_parts(r.condense.kernel);
                r.condense.kernel = match value {
                    "linear" => KernelSpec::Linear,
                    "poly" => KernelSpec::Poly { degree, offset },
                    "gaussian" => KernelSpec::Gaussian { bandwidth },
                    _ => return Err(bad(key, value, "linear, poly or gaussian")),
                }
            }
            "condense.degree" | "condense.offset" | "condense.bandwidth" => {
                let (kind, mut degree, mut offset, mut bandwidth) = kernel_parts(r.condense.kernel);
                match key {
                    "condense.degree" => degree = num(key, value, "a positive integer")?,
                    "condense.offset" => offset = real(key, value)?,
                    _ => bandwidth = real(key, value)?,
                }
                // parameters of the other kernel kinds are accepted and ignored
                r.condense.kernel = match kind {
                    "poly" => KernelSpec::Poly { degree, offset },
                    "gaussian" => KernelSpec::Gaussian { bandwidth },
                    _ => KernelSpec::Linear,
                }
            }
            "condense.median_bandwidth" => r.condense.median_bandwidth = flag(key, value)?,
            "condense.grad_clip" => {
                r.condense.grad_clip = if value == "none" { None } else { Some(real(key, value)?) }
            }
            "select.alpha" => r.select.alpha = real(key, value)?,
            "select.b" => r.select.b = if value == "median" { None } else { Some(real(key, value)?) },
            "select.normalization" => {
                r.select.normalization = match value {
                    "per_class" => Normalization::PerClass,
                    "global" => Normalization::Global,
                    _ => return Err(bad(key, value, "per_class or global")),
                }
            }
            "server.epochs" => r.server.epochs = uint(value)?,
            "server.lr" => r.server.lr = real(key, value)?,
            "server.momentum" => r.server.momentum = real(key, value)?,
            "server.batch_size" => r.server.batch_size = uint(value)?,
            "server.tau" => r.server.tau = real(key, value)?,
            "server.contrastive_weight" => r.server.contrastive_weight = real(key, value)?,
            "server.include_positive" => r.server.include_positive = flag(key, value)?,
            "proto.k" => r.hard_negatives = if value == "auto" { None } else { Some(uint(value)?) },
            "fedavg.epochs" => r.fedavg.epochs = uint(value)?,
            "fedavg.lr" => r.fedavg.lr = real(key, value)?,
            "fedavg.momentum" => r.fedavg.momentum = real(key, value)?,
            "fedavg.batch_size" => r.fedavg.batch_size = uint(value)?,
            "data.classes" => d.classes = uint(value)?,
            "data.train_per_class" => d.train_per_class = uint(value)?,
            "data.test_per_class" => d.test_per_class = uint(value)?,
            "data.side" => d.side = uint(value)?,
            "data.channels" => d.channels = uint(value)?,
            "data.noise" => d.noise = real(key, value)?,
            "data.jitter" => d.jitter = real(key, value)?,
            "data.contrast" => d.contrast = real(key, value)?,
            "data.min_distance" => d.min_distance = real(key, value)?,
            "data.seed" => {
                self.data_seed = if value == "auto" { None } else { Some(num(key, value, "an unsigned integer or auto")?) }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.run.encoder_depth == 0 || self.run.encoder_width == 0 {
            return Err(Error::Config("encoder.depth and encoder.width must be >= 1".into()));
        }
        if let KernelSpec::Poly { degree: 0, .. } = self.run.condense.kernel {
            return Err(Error::Config("condense.degree must be >= 1".into()));
        }
        self.resolved_data().validate()
    }

    /// The synthetic spec with its seed filled in.
    pub fn resolved_data(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.data_seed.unwrap_or(self.run.seed), ..self.data.clone() }
    }

    /// Every key with its effective value; parsing the result reproduces
    /// this configuration.
    pub fn to_text(&self) -> String {
        let r = &self.run;
        let d = &self.data;
        let (kind, degree, offset, bandwidth) = kernel_parts(r.condense.kernel);
        let opt = |v: Option<f64>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        let vals: Vec<String> = vec![
            self.preset.as_str().into(),
            r.method.as_str().into(),
            r.rounds.to_string(),
            r.percent.to_string(),
            r.clients.to_string(),
            r.beta.to_string(),
            r.seed.to_string(),
            r.precision.as_str().into(),
            r.parallel.to_string(),
            r.encoder_depth.to_string(),
            r.encoder_width.to_string(),
            r.condense.epochs.to_string(),
            r.condense.lr.to_string(),
            r.condense.momentum.to_string(),
            r.condense.batch_size.to_string(),
            kind.into(),
            degree.to_string(),
            offset.to_string(),
            bandwidth.to_string(),
            r.condense.median_bandwidth.to_string(),
            opt(r.condense.grad_clip, "none"),
            r.select.alpha.to_string(),
            opt(r.select.b, "median"),
            match r.select.normalization {
                Normalization::PerClass => "per_class".into(),
                Normalization::Global => "global".into(),
            },
            r.server.epochs.to_string(),
            r.server.lr.to_string(),
            r.server.momentum.to_string(),
            r.server.batch_size.to_string(),
            r.server.tau.to_string(),
            r.server.contrastive_weight.to_string(),
            r.server.include_positive.to_string(),
            r.hard_negatives.map_or("auto".into(), |k| k.to_string()),
            r.fedavg.epochs.to_string(),
            r.fedavg.lr.to_string(),
            r.fedavg.momentum.to_string(),
            r.fedavg.batch_size.to_string(),
            d.classes.to_string(),
            d.train_per_class.to_string(),
            d.test_per_class.to_string(),
            d.side.to_string(),
            d.channels.to_string(),
            d.noise.to_string(),
            d.jitter.to_string(),
            d.contrast.to_string(),
            d.min_distance.to_string(),
            self.data_seed.map_or("auto".into(), |s| s.to_string()),
        ];
        debug_assert_eq!(vals.len(), KEYS.len());
        KEYS.iter().zip(vals).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
