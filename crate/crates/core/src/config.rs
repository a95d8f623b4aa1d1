//! Run configuration as a flat `key=value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error, except the result keys a manifest appends after the configuration.

use std::fmt;
use std::path::Path;

use crate::csvio::{fmt_f64, key_values};
use crate::data::DataModelParams;
use crate::error::{Error, Result};
use crate::fedavg::FedConfig;
use crate::model::InitSpec;

/// Keys written by a manifest in addition to the configuration.
pub const MANIFEST_KEYS: &[&str] = &[
    "seed",
    "stop_round",
    "reached_epsilon",
    "final_train_loss",
    "final_test_error",
    "input_hash",
    "dataset_hash",
    "version",
];

/// Forced misalignment at initialization: filters per class with `<w, j mu> < 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Misalignment {
    Random,
    Forced { pos: usize, neg: usize },
}

impl Misalignment {
    pub fn per_class(c: usize) -> Self {
        Misalignment::Forced { pos: c, neg: c }
    }
}

impl fmt::Display for Misalignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Misalignment::Random => f.write_str("none"),
            Misalignment::Forced { pos, neg } if pos == neg => write!(f, "{pos}"),
            Misalignment::Forced { pos, neg } => write!(f, "{pos}:{neg}"),
        }
    }
}

impl std::str::FromStr for Misalignment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s == "none" || s.is_empty() {
            return Ok(Misalignment::Random);
        }
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad count {v:?}"));
        match s.split_once(':') {
            Some((a, b)) => Ok(Misalignment::Forced {
                pos: parse(a)?,
                neg: parse(b)?,
            }),
            None => Ok(Misalignment::per_class(parse(s)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub d: usize,
    pub mu_norm: f64,
    pub sigma_p: f64,
    pub n: usize,
    pub m: usize,
    pub sigma_0: f64,
    pub misaligned: Misalignment,
    pub clients: usize,
    pub h: f64,
    pub eta: f64,
    pub tau: usize,
    pub rounds: usize,
    pub epsilon: f64,
    pub early_stop: bool,
    /// `None` selects `max(1, rounds / 50)`.
    pub checkpoint_every: Option<usize>,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    /// Round at which `analyze` reports the coefficient ratios. Only a
    /// marker: its order-of-magnitude formula has an unspecified constant.
    pub t1_marker: Option<usize>,
}

impl Default for RunConfig {
    /// The synthetic setup: d = 200, n = 20, m = 10, K = 2, |mu| = 3,
    /// sigma_p^2 = 0.1, sigma_0 = 0.01, 1000 test points.
    fn default() -> Self {
        Self {
            d: 200,
            mu_norm: 3.0,
            sigma_p: 0.1f64.sqrt(),
            n: 20,
            m: 10,
            sigma_0: 0.01,
            misaligned: Misalignment::Random,
            clients: 2,
            h: 0.0,
            eta: DEFAULT_ETA,
            tau: 100,
            rounds: 5000,
            epsilon: 0.1,
            early_stop: true,
            checkpoint_every: None,
            n_test: 1000,
            seeds: vec![0],
            t1_marker: None,
        }
    }
}

/// Largest step of {1e-2, 3e-2, 1e-1} that never trips the divergence guard
/// on the figure presets; see `experiment::calibrate_eta`.
pub const DEFAULT_ETA: f64 = 0.1;

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data_params()?;
        if self.n < 2 || !self.n.is_multiple_of(2) {
            return Err(Error::config("n", format!("must be even and at least 2, got {}", self.n)));
        }
        if self.m == 0 {
            return Err(Error::config("m", "must be at least 1"));
        }
        if !(self.sigma_0 >= 0.0 && self.sigma_0.is_finite()) {
            return Err(Error::config("sigma_0", "must be nonnegative"));
        }
        if let Misalignment::Forced { pos, neg } = self.misaligned {
            if pos > self.m || neg > self.m {
                return Err(Error::config("misaligned", format!("counts must not exceed m = {}", self.m)));
            }
        }
        if self.clients == 0 || !self.n.is_multiple_of(self.clients) {
            return Err(Error::config(
                "clients",
                format!("n = {} must be divisible by K = {}", self.n, self.clients),
            ));
        }
        if !(0.0..=0.5).contains(&self.h) {
            return Err(Error::config("h", format!("must lie in [0, 1/2], got {}", self.h)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon", format!("must lie in (0, 1), got {}", self.epsilon)));
        }
        if self.n_test == 0 {
            return Err(Error::config("n_test", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        self.fed_config()?;
        Ok(())
    }

    pub fn data_params(&self) -> Result<DataModelParams> {
        DataModelParams::with_norm(self.d, self.mu_norm, self.sigma_p)
    }

    pub fn fed_config(&self) -> Result<FedConfig> {
        let mut cfg = FedConfig::new(self.eta, self.tau, self.rounds)?;
        if let Some(every) = self.checkpoint_every {
            cfg.checkpoint_every = every;
        }
        cfg.stop_at_loss = self.early_stop.then_some(self.epsilon);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            sigma_0: self.sigma_0,
            forced_misaligned: match self.misaligned {
                Misalignment::Random => None,
                Misalignment::Forced { pos, neg } => Some([pos, neg]),
            },
            pretrained_from: None,
        }
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d" => self.d = parse_value(key, value)?,
            "mu_norm" => self.mu_norm = parse_value(key, value)?,
            "sigma_p" => self.sigma_p = parse_value(key, value)?,
            "sigma_p_sq" => {
                let v: f64 = parse_value(key, value)?;
                self.sigma_p = v.sqrt();
            }
            "n" => self.n = parse_value(key, value)?,
            "m" => self.m = parse_value(key, value)?,
            "sigma_0" => self.sigma_0 = parse_value(key, value)?,
            "misaligned" => {
                self.misaligned = value.parse().map_err(|e: String| Error::config(key, e))?;
            }
            "clients" | "K" => self.clients = parse_value(key, value)?,
            "h" => self.h = parse_value(key, value)?,
            "eta" => self.eta = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "rounds" | "T" => self.rounds = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "early_stop" => self.early_stop = parse_value(key, value)?,
            "checkpoint_every" => {
                self.checkpoint_every = match value.trim() {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "n_test" => self.n_test = parse_value(key, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?;
            }
            "t1_marker" => {
                self.t1_marker = match value.trim() {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            if MANIFEST_KEYS.contains(&key) {
                continue;
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Canonical `key=value` form; [`RunConfig::from_kv`] inverts it exactly.
    pub fn entries(&self) -> Vec<(String, String)> {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        [
            ("d", self.d.to_string()),
            ("mu_norm", fmt_f64(self.mu_norm)),
            ("sigma_p", fmt_f64(self.sigma_p)),
            ("n", self.n.to_string()),
            ("m", self.m.to_string()),
            ("sigma_0", fmt_f64(self.sigma_0)),
            ("misaligned", self.misaligned.to_string()),
            ("clients", self.clients.to_string()),
            ("h", fmt_f64(self.h)),
            ("eta", fmt_f64(self.eta)),
            ("tau", self.tau.to_string()),
            ("rounds", self.rounds.to_string()),
            ("epsilon", fmt_f64(self.epsilon)),
            ("early_stop", self.early_stop.to_string()),
            (
                "checkpoint_every",
                self.checkpoint_every.map_or("auto".to_string(), |v| v.to_string()),
            ),
            ("n_test", self.n_test.to_string()),
            ("seeds", seeds.join(",")),
            ("t1_marker", self.t1_marker.map_or("none".to_string(), |v| v.to_string())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_kv(&self) -> String {
        key_values(&self.entries())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(cfg.sigma_p * cfg.sigma_p, 0.1f64.sqrt().powi(2));
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::from_kv("# comment\n\ntau = 10\nmisaligned=3:2\nseeds=4,5\nstop_round=7\n").unwrap();
        assert_eq!(cfg.tau, 10);
        assert_eq!(cfg.misaligned, Misalignment::Forced { pos: 3, neg: 2 });
        assert_eq!(cfg.seeds, vec![4, 5]);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = |text: &str| match RunConfig::from_kv(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(bad("epsilon=1.5"), "epsilon");
        assert_eq!(bad("clients=3"), "clients");
        assert_eq!(bad("seeds="), "seeds");
        assert_eq!(bad("bogus=1"), "bogus");
        assert_eq!(bad("h=0.7"), "h");
        assert_eq!(bad("misaligned=11"), "misaligned");
    }
}
