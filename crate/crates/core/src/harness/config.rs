//! Experiment configuration: presets, TOML files and command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::Algorithm;
use crate::l96::ParamSlot;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    L96Default,
    RbcDefault,
    ScalarToy,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::L96Default, Preset::RbcDefault, Preset::ScalarToy];

    pub fn name(self) -> &'static str {
        match self {
            Preset::L96Default => "l96-default",
            Preset::RbcDefault => "rbc-default",
            Preset::ScalarToy => "scalar-toy",
        }
    }

    /// Model knobs accepted under `[overrides]`, with their defaults.
    pub fn override_defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            Preset::L96Default => &[
                ("n_slow", 40.0),
                ("n_fast", 5.0),
                ("forcing", 5.0),
                ("damping_divisor", 5.0),
                ("initial_guess", 1.0),
                ("cond_threshold", 1e8),
                ("exact_twin", 0.0),
            ],
            Preset::RbcDefault => &[
                ("ra", 1e5),
                ("pr", 1.0),
                ("ra_guess", 9e4),
                ("pr_guess", 1.1),
                ("nx", 128.0),
                ("nz", 64.0),
                ("n_obs", 16.0),
                ("init_modes", 4.0),
                ("spinup_time", 1.0),
                ("cfl", 0.3),
                ("cond_threshold", 1e8),
                ("exact_twin", 0.0),
            ],
            Preset::ScalarToy => &[
                ("lambda_true", 2.0),
                ("initial_guess", 1.0),
                ("cond_threshold", 1e8),
                ("exact_twin", 0.0),
            ],
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}` (expected l96-default, rbc-default or scalar-toy)")))
    }
}

/// `none` or one of the estimators.
pub fn parse_algorithm(s: &str) -> Result<Option<Algorithm>> {
    if s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// A fully resolved experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub algorithm: Option<Algorithm>,
    pub unknowns: Vec<String>,
    pub mu: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub update_interval: f64,
    pub fd_order: usize,
    /// `None` picks a CFL-limited step (convection only).
    pub dt: Option<f64>,
    pub t_final: f64,
    pub record_interval: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub test_mode: bool,
    /// Convection snapshot used instead of a fresh spin-up.
    pub initial_state: Option<PathBuf>,
    pub overrides: BTreeMap<String, f64>,
}

/// The on-disk form; every key is optional and falls back to the preset.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub preset: Option<String>,
    pub algorithm: Option<String>,
    pub unknowns: Option<Vec<String>>,
    pub mu: Option<f64>,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub update_interval: Option<f64>,
    pub fd_order: Option<usize>,
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub record_interval: Option<f64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub test_mode: Option<bool>,
    pub initial_state: Option<PathBuf>,
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
    /// Sweep axes: field or override name to the list of values.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let overrides = preset.override_defaults().iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let base = ExperimentConfig {
            preset,
            algorithm: Some(Algorithm::Rni),
            unknowns: Vec::new(),
            mu: 50.0,
            mu1: 8000.0,
            mu2: 8000.0,
            update_interval: 0.1,
            fd_order: 3,
            dt: Some(1e-3),
            t_final: 30.0,
            record_interval: 0.1,
            seed: 1,
            output_dir: PathBuf::from("out"),
            test_mode: false,
            initial_state: None,
            overrides,
        };
        match preset {
            Preset::L96Default => ExperimentConfig {
                unknowns: (0..20).map(|k| ParamSlot::Slow(k).to_string()).collect(),
                ..base
            },
            Preset::RbcDefault => ExperimentConfig {
                algorithm: Some(Algorithm::RniPlus),
                unknowns: vec!["Ra".into(), "Pr".into()],
                update_interval: 0.05,
                dt: None,
                t_final: 1.0,
                record_interval: 0.05,
                ..base
            },
            Preset::ScalarToy => ExperimentConfig {
                unknowns: vec!["lambda".into()],
                mu: 10.0,
                update_interval: 1.0,
                t_final: 30.0,
                record_interval: 1.0,
                ..base
            },
        }
    }

    /// Preset defaults overlaid with the file's keys.
    pub fn from_file(file: &ConfigFile, preset_hint: Option<Preset>) -> Result<Self> {
        let preset = match (&file.preset, preset_hint) {
            (_, Some(p)) => p,
            (Some(name), None) => name.parse()?,
            (None, None) => Preset::L96Default,
        };
        let mut cfg = Self::preset(preset);
        if let Some(a) = &file.algorithm {
            cfg.algorithm = parse_algorithm(a)?;
        }
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = &file.$f {
                    cfg.$f = v.clone();
                }
            )*};
        }
        take!(unknowns, mu, mu1, mu2, update_interval, fd_order, t_final, record_interval, seed, output_dir, test_mode);
        if file.dt.is_some() {
            cfg.dt = file.dt;
        }
        if file.initial_state.is_some() {
            cfg.initial_state = file.initial_state.clone();
        }
        for (k, v) in &file.overrides {
            cfg.set_override(k, *v)?;
        }
        Ok(cfg)
    }

    pub fn set_override(&mut self, key: &str, value: f64) -> Result<()> {
        match self.overrides.get_mut(key) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::config(format!(
                "override `{key}` is not defined for preset {} (known: {})",
                self.preset,
                self.overrides.keys().cloned().collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    pub fn knob(&self, key: &str) -> f64 {
        self.overrides[key]
    }

    /// Sets a top-level field or an override from its textual value.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value
                .parse::<f64>()
                .map_err(|_| Error::config(format!("`{key}` needs a number, got `{value}`")))
        };
        let int = || -> Result<u64> {
            value
                .parse::<u64>()
                .map_err(|_| Error::config(format!("`{key}` needs a non-negative integer, got `{value}`")))
        };
        match key {
            "algorithm" => self.algorithm = parse_algorithm(value)?,
            "mu" => self.mu = num()?,
            "mu1" => self.mu1 = num()?,
            "mu2" => self.mu2 = num()?,
            "update_interval" => self.update_interval = num()?,
            "fd_order" => self.fd_order = int()? as usize,
            "dt" => self.dt = Some(num()?),
            "t_final" => self.t_final = num()?,
            "record_interval" => self.record_interval = num()?,
            "seed" => self.seed = int()?,
            _ => self.set_override(key, num()?)?,
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("update_interval", self.update_interval),
            ("t_final", self.t_final),
            ("record_interval", self.record_interval),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::config(format!("dt must be positive, got {dt}")));
            }
        }
        if let (Some(dt), false) = (self.dt, self.preset == Preset::RbcDefault) {
            for (name, v) in [("record_interval", self.record_interval), ("update_interval", self.update_interval)] {
                let steps = (v / dt).round();
                if steps < 1.0 || (steps * dt - v).abs() > 1e-9 * v {
                    return Err(Error::config(format!("{name} = {v} must be a whole number of steps of dt = {dt}")));
                }
            }
        }
        if !(1..=3).contains(&self.fd_order) {
            return Err(Error::config(format!("fd_order must be 1, 2 or 3, got {}", self.fd_order)));
        }
        match self.preset {
            Preset::L96Default | Preset::ScalarToy => {
                if !(self.mu > 0.0 && self.mu.is_finite()) {
                    return Err(Error::config(format!("mu must be positive, got {}", self.mu)));
                }
            }
            Preset::RbcDefault => {
                if !(self.mu1 > 0.0 && self.mu1.is_finite()) || !(self.mu2 >= 0.0 && self.mu2.is_finite()) {
                    return Err(Error::config("need mu1 > 0 and mu2 >= 0"));
                }
                if matches!(self.algorithm, Some(Algorithm::Rni | Algorithm::RniPlus)) && self.mu2 == 0.0 {
                    return Err(Error::config("rni and rni+ need temperature nudging (mu2 > 0)"));
                }
            }
        }
        if self.algorithm.is_some() && self.unknowns.is_empty() {
            return Err(Error::config("parameter estimation needs at least one unknown"));
        }
        match self.preset {
            Preset::L96Default => {
                for u in &self.unknowns {
                    u.parse::<ParamSlot>()?;
                }
            }
            Preset::RbcDefault => {
                if self.unknowns != ["Ra", "Pr"] {
                    return Err(Error::config("rbc-default estimates exactly the unknowns [\"Ra\", \"Pr\"]"));
                }
            }
            Preset::ScalarToy => {
                if self.unknowns != ["lambda"] {
                    return Err(Error::config("scalar-toy estimates exactly the unknown [\"lambda\"]"));
                }
            }
        }
        Ok(())
    }

    /// `key = value` pairs describing the configuration.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("preset".to_string(), self.preset.to_string()),
            (
                "algorithm".into(),
                self.algorithm.map_or("none".to_string(), |a| a.name().to_string()),
            ),
            ("unknowns".into(), self.unknowns.join(" ")),
        ];
        match self.preset {
            Preset::RbcDefault => {
                out.push(("mu1".into(), self.mu1.to_string()));
                out.push(("mu2".into(), self.mu2.to_string()));
            }
            _ => out.push(("mu".into(), self.mu.to_string())),
        }
        out.extend([
            ("update_interval".into(), self.update_interval.to_string()),
            ("fd_order".into(), self.fd_order.to_string()),
            ("dt".into(), self.dt.map_or("auto".to_string(), |d| d.to_string())),
            ("t_final".into(), self.t_final.to_string()),
            ("record_interval".into(), self.record_interval.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("test_mode".into(), self.test_mode.to_string()),
        ]);
        if let Some(p) = &self.initial_state {
            out.push(("initial_state".into(), p.display().to_string()));
        }
        out.extend(self.overrides.iter().map(|(k, v)| (k.clone(), v.to_string())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in Preset::ALL {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn file_overlays_preset() {
        let file = ConfigFile::parse(
            r#"
            preset = "l96-default"
            algorithm = "rls"
            mu = 25.0
            unknowns = ["d_0", "d_3_2"]
            [overrides]
            forcing = 8.0
            "#,
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&file, None).unwrap();
        assert_eq!(cfg.algorithm, Some(Algorithm::Rls));
        assert_eq!(cfg.mu, 25.0);
        assert_eq!(cfg.knob("forcing"), 8.0);
        assert_eq!(cfg.update_interval, 0.1);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("mew = 3.0").is_err());
        let file = ConfigFile::parse("[overrides]\nrayleigh = 3.0").unwrap();
        assert!(ExperimentConfig::from_file(&file, Some(Preset::RbcDefault)).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::preset(Preset::L96Default);
        cfg.fd_order = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset(Preset::L96Default);
        cfg.unknowns = vec!["d_x".into()];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset(Preset::RbcDefault);
        cfg.mu2 = 0.0;
        assert!(cfg.validate().is_err());
        cfg.algorithm = Some(Algorithm::Rls);
        cfg.validate().unwrap();
        let mut cfg = ExperimentConfig::preset(Preset::ScalarToy);
        assert!(cfg.set_field("mu", "-").is_err());
        cfg.set_field("mu", "-1").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::preset(Preset::L96Default);
        cfg.dt = Some(0.3);
        assert!(cfg.validate().is_err());
        cfg.dt = Some(0.03);
        assert!(cfg.validate().is_err());
        cfg.dt = Some(0.02);
        cfg.validate().unwrap();
    }

    #[test]
    fn algorithm_none() {
        assert_eq!(parse_algorithm("none").unwrap(), None);
        assert_eq!(parse_algorithm("rni-plus").unwrap(), Some(Algorithm::RniPlus));
        assert!(parse_algorithm("newton").is_err());
    }
}
