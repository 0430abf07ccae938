//! Run configuration: one JSON file describing system, bath, grids, mode,
//! initial state, output location and tolerance overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bath::{BathMode, BathSpec, Beta, SpectralDensity};
use crate::coefficients::{Mode, TimeGrid};
use crate::dynamics::GaussianMomentState;
use crate::elementary::{SolverOptions, SystemParams};
use crate::error::{QbmError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemConfig,
    pub bath: BathConfig,
    pub grid: GridConfig,
    #[serde(default = "default_mode")]
    pub mode: ModeConfig,
    pub initial_state: InitialStateConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub mass: f64,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub omega_ren: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BathConfig {
    pub spectral: SpectralConfig,
    pub beta: BetaConfig,
    #[serde(default = "one")]
    pub hbar: f64,
    #[serde(rename = "kB", default = "one")]
    pub kb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectralConfig {
    Discrete { modes: Vec<ModeEntry> },
    OhmicExp { gamma0: f64, cutoff: f64 },
    OhmicSharp { gamma0: f64, cutoff: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub coupling: f64,
    #[serde(default = "one")]
    pub mass: f64,
    pub frequency: f64,
}

/// Inverse temperature: a number or the string "inf".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaConfig {
    Finite(f64),
    Named(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Solver and kernel step.
    pub ds: f64,
    pub t_max: f64,
    /// Spacing of the moment output.
    pub dt_out: f64,
    /// Spacing of coefficient rows; defaults to `ds`.
    #[serde(default)]
    pub coeff_step: Option<f64>,
    /// RK4 steps per coefficient row.
    #[serde(default = "one_usize")]
    pub substeps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    Exact,
    Weak,
    OhmicFp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialStateConfig {
    pub mean_q: f64,
    pub mean_p: f64,
    pub sigma_qq: f64,
    pub sigma_pp: f64,
    pub sigma_qp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_singular_tol")]
    pub singular_tol: f64,
    /// Finite-difference step of the oracle extraction; defaults to `ds`.
    #[serde(default)]
    pub fd_step: Option<f64>,
    #[serde(default = "default_coefficient_rel")]
    pub coefficient_rel: f64,
    #[serde(default = "default_moment_rel")]
    pub moment_rel: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        ToleranceConfig {
            solver_tol: default_solver_tol(),
            singular_tol: default_singular_tol(),
            fd_step: None,
            coefficient_rel: default_coefficient_rel(),
            moment_rel: default_moment_rel(),
        }
    }
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_mode() -> ModeConfig {
    ModeConfig::Exact
}
fn default_solver_tol() -> f64 {
    SolverOptions::default().tol
}
fn default_singular_tol() -> f64 {
    SolverOptions::default().singular_tol
}
fn default_coefficient_rel() -> f64 {
    1e-4
}
fn default_moment_rel() -> f64 {
    1e-5
}

fn finite(name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(QbmError::Config(format!("{name} must be finite, got {x}")))
    }
}

fn positive(name: &str, x: f64) -> Result<()> {
    finite(name, x)?;
    if x > 0.0 {
        Ok(())
    } else {
        Err(QbmError::Config(format!("{name} must be > 0, got {x}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| QbmError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QbmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Schema-level checks; physics-level checks happen in the conversions.
    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        positive("system.mass", s.mass)?;
        match (s.omega, s.omega_ren) {
            (Some(w), None) | (None, Some(w)) => finite("system frequency", w)?,
            (Some(_), Some(_)) => {
                return Err(QbmError::Config("give exactly one of system.omega and system.omega_ren".into()))
            }
            (None, None) => return Err(QbmError::Config("system.omega or system.omega_ren is required".into())),
        }
        let b = &self.bath;
        positive("bath.hbar", b.hbar)?;
        positive("bath.kB", b.kb)?;
        match &b.spectral {
            SpectralConfig::Discrete { modes } => {
                for (i, m) in modes.iter().enumerate() {
                    finite(&format!("bath.spectral.modes[{i}].coupling"), m.coupling)?;
                    finite(&format!("bath.spectral.modes[{i}].mass"), m.mass)?;
                    finite(&format!("bath.spectral.modes[{i}].frequency"), m.frequency)?;
                }
            }
            SpectralConfig::OhmicExp { gamma0, cutoff } | SpectralConfig::OhmicSharp { gamma0, cutoff } => {
                finite("bath.spectral.gamma0", *gamma0)?;
                finite("bath.spectral.cutoff", *cutoff)?;
            }
        }
        self.beta()?;
        let g = &self.grid;
        positive("grid.ds", g.ds)?;
        finite("grid.t_max", g.t_max)?;
        if g.t_max < 0.0 {
            return Err(QbmError::Config("grid.t_max must be >= 0".into()));
        }
        positive("grid.dt_out", g.dt_out)?;
        if let Some(c) = g.coeff_step {
            positive("grid.coeff_step", c)?;
            let r = c / g.ds;
            if (r - r.round()).abs() > 1e-6 * r.max(1.0) {
                return Err(QbmError::Config(format!("grid.coeff_step = {c} must be a multiple of ds = {}", g.ds)));
            }
        }
        if g.substeps == 0 {
            return Err(QbmError::Config("grid.substeps must be >= 1".into()));
        }
        let i = &self.initial_state;
        for (n, x) in [
            ("mean_q", i.mean_q),
            ("mean_p", i.mean_p),
            ("sigma_qq", i.sigma_qq),
            ("sigma_pp", i.sigma_pp),
            ("sigma_qp", i.sigma_qp),
        ] {
            finite(&format!("initial_state.{n}"), x)?;
        }
        let t = &self.tolerances;
        positive("tolerances.solver_tol", t.solver_tol)?;
        positive("tolerances.singular_tol", t.singular_tol)?;
        if let Some(f) = t.fd_step {
            positive("tolerances.fd_step", f)?;
        }
        positive("tolerances.coefficient_rel", t.coefficient_rel)?;
        positive("tolerances.moment_rel", t.moment_rel)?;
        if self.mode == ModeConfig::OhmicFp && s.omega_ren.is_none() {
            return Err(QbmError::Config("ohmic_fp mode needs system.omega_ren".into()));
        }
        Ok(())
    }

    pub fn beta(&self) -> Result<Beta> {
        match &self.bath.beta {
            BetaConfig::Finite(b) => {
                positive("bath.beta", *b)?;
                Ok(Beta::Finite(*b))
            }
            BetaConfig::Named(s) if s == "inf" => Ok(Beta::Infinite),
            BetaConfig::Named(s) => Err(QbmError::Config(format!("bath.beta must be a number or \"inf\", got {s:?}"))),
        }
    }

    pub fn system_params(&self) -> SystemParams {
        match (self.system.omega, self.system.omega_ren) {
            (_, Some(w)) => SystemParams::renormalized(self.system.mass, w),
            (Some(w), None) => SystemParams::new(self.system.mass, w),
            (None, None) => SystemParams::new(self.system.mass, 0.0),
        }
    }

    pub fn bath_spec(&self) -> Result<BathSpec> {
        let mass = self.system.mass;
        let spectral = match &self.bath.spectral {
            SpectralConfig::Discrete { modes } => {
                SpectralDensity::Discrete(modes.iter().map(|m| BathMode::new(m.coupling, m.mass, m.frequency)).collect())
            }
            &SpectralConfig::OhmicExp { gamma0, cutoff } => SpectralDensity::OhmicExpCutoff { gamma0, cutoff, mass },
            &SpectralConfig::OhmicSharp { gamma0, cutoff } => SpectralDensity::OhmicSharpCutoff { gamma0, cutoff, mass },
        };
        let mut bath = BathSpec::new(spectral, self.beta()?);
        bath.hbar = self.bath.hbar;
        bath.kb = self.bath.kb;
        bath.validate().map_err(|e| match e {
            QbmError::Config(_) => e,
            other => QbmError::Config(other.to_string()),
        })?;
        Ok(bath)
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeConfig::Exact => Mode::Exact,
            ModeConfig::Weak => Mode::Weak,
            ModeConfig::OhmicFp => Mode::OhmicFp,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.tolerances.solver_tol,
            singular_tol: self.tolerances.singular_tol,
        }
    }

    pub fn coeff_step(&self) -> f64 {
        self.grid.coeff_step.unwrap_or(self.grid.ds)
    }

    pub fn fd_step(&self) -> f64 {
        self.tolerances.fd_step.unwrap_or(self.grid.ds)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.coeff_step(), self.grid.t_max)
    }

    pub fn initial_state(&self) -> Result<GaussianMomentState> {
        let i = &self.initial_state;
        let s = GaussianMomentState::new(i.mean_q, i.mean_p, i.sigma_qq, i.sigma_pp, i.sigma_qp);
        s.validate().map_err(|e| QbmError::Config(format!("initial_state: {e}")))?;
        if s.uncertainty_product() < 0.25 * self.bath.hbar * self.bath.hbar - 1e-12 {
            return Err(QbmError::Config(format!(
                "initial_state violates the uncertainty relation: {} < hbar^2/4",
                s.uncertainty_product()
            )));
        }
        Ok(s)
    }

    /// Output directory: explicit override, then the configured one, then ".".
    pub fn output_dir(&self, cli_override: Option<&Path>) -> PathBuf {
        cli_override
            .map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."))
    }
}
