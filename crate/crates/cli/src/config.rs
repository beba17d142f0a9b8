//! JSON experiment configuration.
//!
//! Every struct rejects unknown keys, so a misspelled physics parameter is a
//! hard error instead of a silently used default. Relative paths are resolved
//! against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use weaktomo_core::design::SearchConfig;
use weaktomo_core::estimator::DEFAULT_EPS_REL;
use weaktomo_core::measurement::DEFAULT_FILTER_WINDOW;
use weaktomo_core::operator::make_spin_system;
use weaktomo_core::physics::{DissipatorModel, PhysicsParams, BETA_D1, BETA_D2};

use crate::error::{CliError, Result};

/// Knot count used when the search section leaves it out.
pub const DEFAULT_KNOTS: usize = 50;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub state_prep: StatePrep,
    pub snr_list: Vec<Snr>,
    #[serde(default = "default_realizations")]
    pub n_realizations: usize,
    #[serde(default = "default_runs")]
    pub n_runs: usize,
    pub control: ControlConfig,
    #[serde(default)]
    pub control_error_pct: ErrorLevels,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    /// Odd moving-average width applied to records and model alike.
    #[serde(default = "default_filter_window")]
    pub filter_window: usize,
}

fn default_realizations() -> usize {
    50
}

fn default_runs() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_filter_window() -> usize {
    DEFAULT_FILTER_WINDOW
}

/// Physical parameters; anything left out takes the cesium default.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    pub spin: f64,
    pub beta: Beta,
    pub gamma: Option<f64>,
    pub larmor_omega: Option<f64>,
    pub background_std_hz: Option<f64>,
    pub duration: Option<f64>,
    pub dt_coarse: Option<f64>,
    pub dt_fine: Option<f64>,
    pub dissipator: Option<DissipatorConfig>,
    pub quadrature_points: Option<usize>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum Beta {
    Value(f64),
    Preset(BetaPreset),
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BetaPreset {
    D1,
    D2,
}

impl Beta {
    pub fn value(self) -> f64 {
        match self {
            Beta::Value(v) => v,
            Beta::Preset(BetaPreset::D1) => BETA_D1,
            Beta::Preset(BetaPreset::D2) => BETA_D2,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DissipatorConfig {
    LossOnly,
    IsotropicPumping { branching: f64 },
}

impl PhysicsConfig {
    pub fn to_params(&self) -> Result<PhysicsParams> {
        let sys = make_spin_system(self.spin)?;
        let mut p = PhysicsParams::cesium(sys, self.beta.value());
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut p.gamma, self.gamma);
        set(&mut p.larmor_omega, self.larmor_omega);
        set(&mut p.background_std_hz, self.background_std_hz);
        set(&mut p.duration, self.duration);
        set(&mut p.dt_coarse, self.dt_coarse);
        set(&mut p.dt_fine, self.dt_fine);
        if let Some(d) = self.dissipator {
            p.dissipator = match d {
                DissipatorConfig::LossOnly => DissipatorModel::LossOnly,
                DissipatorConfig::IsotropicPumping { branching } => {
                    DissipatorModel::IsotropicPumping { branching }
                }
            };
        }
        if let Some(q) = self.quadrature_points {
            p.quadrature_points = q;
        }
        p.validate()?;
        Ok(p)
    }
}

/// Initial state: a named preparation or a density-matrix file in the dump
/// format (one row per line, `re,im` pairs).
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StatePrep {
    /// `(|F, F> + |F, -F>)/sqrt(2)`.
    #[default]
    Cat,
    /// `|F, F>`.
    Stretched,
    MatrixFile(PathBuf),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlConfig {
    /// Designed by `design`; later commands read the waveforms it wrote to
    /// the output directory.
    Search(SearchSection),
    /// Fixed waveform files, one per run.
    WaveformFiles(Vec<PathBuf>),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    #[serde(default = "default_knots")]
    pub n_knots: usize,
    pub grid_size: Option<usize>,
    pub max_sweeps: Option<usize>,
    pub tol: Option<f64>,
    /// Defaults to `base_seed`.
    pub seed: Option<u64>,
    pub eps_rel: Option<f64>,
}

fn default_knots() -> usize {
    DEFAULT_KNOTS
}

impl SearchSection {
    pub fn to_config(&self, base_seed: u64) -> SearchConfig {
        let d = SearchConfig::default();
        SearchConfig {
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            max_sweeps: self.max_sweeps.unwrap_or(d.max_sweeps),
            tol: self.tol.unwrap_or(d.tol),
            seed: self.seed.unwrap_or(base_seed),
            eps_rel: self.eps_rel.unwrap_or(DEFAULT_EPS_REL),
        }
    }
}

/// Control amplitude error levels in percent; a single number or a list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorLevels(pub Vec<f64>);

impl<'de> Deserialize<'de> for ErrorLevels {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(f64),
            Many(Vec<f64>),
        }
        Ok(match Raw::deserialize(de)? {
            Raw::One(v) => ErrorLevels(vec![v]),
            Raw::Many(v) => ErrorLevels(v),
        })
    }
}

impl Serialize for ErrorLevels {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

/// Signal-to-noise ratio; `"inf"` selects noiseless records.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "noiseless") => {
                Ok(Snr(f64::INFINITY))
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!("unrecognized SNR {t:?}"))),
        }
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, parses, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let StatePrep::MatrixFile(p) = &mut self.state_prep {
            fix(p);
        }
        if let ControlConfig::WaveformFiles(files) = &mut self.control {
            files.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_list.is_empty() {
            return Err(CliError::Config("snr_list must not be empty".into()));
        }
        if let Some(s) = self.snr_list.iter().find(|s| !(s.0 > 0.0)) {
            return Err(CliError::Config(format!(
                "SNR values must be positive, got {s}"
            )));
        }
        if self.n_realizations == 0 {
            return Err(CliError::Config("n_realizations must be at least 1".into()));
        }
        if self.n_runs == 0 {
            return Err(CliError::Config("n_runs must be at least 1".into()));
        }
        if let Some(e) = self
            .control_error_pct
            .0
            .iter()
            .find(|e| !(**e >= 0.0 && e.is_finite()))
        {
            return Err(CliError::Config(format!(
                "control_error_pct must be finite and >= 0, got {e}"
            )));
        }
        if self.filter_window == 0 || self.filter_window.is_multiple_of(2) {
            return Err(CliError::Config(format!(
                "filter_window must be odd, got {}",
                self.filter_window
            )));
        }
        self.physics.to_params()?;
        if let StatePrep::MatrixFile(p) = &self.state_prep {
            require_file(p)?;
        }
        match &self.control {
            ControlConfig::WaveformFiles(files) => {
                if files.len() < self.n_runs {
                    return Err(CliError::Config(format!(
                        "{} waveform files for {} runs",
                        files.len(),
                        self.n_runs
                    )));
                }
                files.iter().try_for_each(|f| require_file(f))?;
            }
            ControlConfig::Search(s) => {
                s.to_config(self.base_seed).validate()?;
                if s.n_knots < weaktomo_core::waveform::MIN_KNOTS {
                    return Err(CliError::Config(format!(
                        "n_knots must be at least 4, got {}",
                        s.n_knots
                    )));
                }
            }
        }
        Ok(())
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "referenced file {} does not exist",
            p.display()
        )))
    }
}
