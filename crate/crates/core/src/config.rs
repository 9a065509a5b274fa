//! Experiment configuration read from TOML.
//!
//! Top-level keys hold the run settings; each plant, the Hankel fit, the
//! LQR weights, the disturbance and exports have their own section. Sections
//! do not nest.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hybrid_sim::{sample_count, DisturbanceSchedule, Trigger};
use crate::numkernel::DareMethod;
use crate::tde_koopman::HankelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    Walker,
    LinearOscillator,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumSection {
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "default_pendulum_damping")]
    pub damping: f64,
    #[serde(default = "default_theta_star")]
    pub theta_star: f64,
    #[serde(default)]
    pub theta0: f64,
    #[serde(default = "default_omega0")]
    pub omega0: f64,
}

impl Default for PendulumSection {
    fn default() -> Self {
        PendulumSection {
            g: default_g(),
            length: 1.0,
            damping: default_pendulum_damping(),
            theta_star: default_theta_star(),
            theta0: 0.0,
            omega0: default_omega0(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkerSection {
    /// Ramp slope; calibrated to `target_theta` when absent.
    pub gamma: Option<f64>,
    #[serde(default = "default_target_theta")]
    pub target_theta: f64,
    #[serde(default = "half")]
    pub damping_stance: f64,
    #[serde(default = "half")]
    pub damping_swing: f64,
    #[serde(default = "default_arming_theta")]
    pub arming_theta: f64,
    /// Newton starting point on the post-strike section.
    #[serde(default = "default_walker_guess")]
    pub guess: Vec<f64>,
}

impl Default for WalkerSection {
    fn default() -> Self {
        WalkerSection {
            gamma: None,
            target_theta: default_target_theta(),
            damping_stance: 0.5,
            damping_swing: 0.5,
            arming_theta: default_arming_theta(),
            guess: default_walker_guess(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorSection {
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default = "default_osc_damping")]
    pub damping: f64,
    #[serde(default = "half")]
    pub gain: f64,
    #[serde(default = "default_osc_x0")]
    pub x0: Vec<f64>,
}

impl Default for OscillatorSection {
    fn default() -> Self {
        OscillatorSection {
            omega: 1.0,
            damping: default_osc_damping(),
            gain: 0.5,
            x0: default_osc_x0(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HankelSection {
    pub delays: usize,
    pub columns: usize,
    #[serde(default = "default_rtol")]
    pub pinv_rtol: f64,
    #[serde(default)]
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DareMethodName {
    Doubling,
    FixedPoint,
}

impl From<DareMethodName> for DareMethod {
    fn from(m: DareMethodName) -> Self {
        match m {
            DareMethodName::Doubling => DareMethod::Doubling,
            DareMethodName::FixedPoint => DareMethod::FixedPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrSection {
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default = "one")]
    pub r: f64,
    #[serde(default = "default_method")]
    pub method: DareMethodName,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
}

impl Default for LqrSection {
    fn default() -> Self {
        LqrSection {
            q: 1.0,
            r: 1.0,
            method: default_method(),
            max_iterations: default_max_iterations(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSection {
    /// Time of the kick, measured on the closed-loop clock.
    pub at_time: Option<f64>,
    /// Kick at the first sample after this many guard events since t = 0.
    pub after_events: Option<usize>,
    pub delta: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportSection {
    /// Also write `L.csv` on train and `gain.csv` on control.
    #[serde(default)]
    pub matrices: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub dt: f64,
    pub train_duration: f64,
    pub control_duration: f64,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub pendulum: PendulumSection,
    #[serde(default)]
    pub walker: WalkerSection,
    #[serde(default)]
    pub linear_oscillator: OscillatorSection,
    pub hankel: HankelSection,
    #[serde(default)]
    pub lqr: LqrSection,
    pub disturbance: Option<DisturbanceSection>,
    #[serde(default)]
    pub export: ExportSection,
}

fn default_g() -> f64 {
    9.81
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn default_pendulum_damping() -> f64 {
    0.1
}
fn default_theta_star() -> f64 {
    0.5
}
fn default_omega0() -> f64 {
    -2.0
}
fn default_target_theta() -> f64 {
    0.162
}
fn default_arming_theta() -> f64 {
    -0.05
}
fn default_walker_guess() -> Vec<f64> {
    vec![0.2, 0.3, -0.2, -0.03]
}
fn default_osc_damping() -> f64 {
    0.05
}
fn default_osc_x0() -> Vec<f64> {
    vec![1.0, 0.0]
}
fn default_rtol() -> f64 {
    crate::numkernel::DEFAULT_PINV_RTOL
}
fn default_method() -> DareMethodName {
    DareMethodName::Doubling
}
fn default_max_iterations() -> usize {
    100_000
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn n(&self) -> usize {
        match self.system {
            SystemKind::Walker => 4,
            _ => 2,
        }
    }

    pub fn m(&self) -> usize {
        match self.system {
            SystemKind::Walker => 2,
            _ => 1,
        }
    }

    pub fn hankel_params(&self) -> HankelParams {
        HankelParams {
            delays: self.hankel.delays,
            columns: self.hankel.columns,
        }
    }

    pub fn train_samples(&self) -> Result<usize> {
        sample_count(self.train_duration, self.dt)
    }

    pub fn control_samples(&self) -> Result<usize> {
        sample_count(self.control_duration, self.dt)
    }

    /// Checks every value that can be checked without simulating.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("dt", self.dt)?;
        positive("train_duration", self.train_duration)?;
        positive("control_duration", self.control_duration)?;
        self.train_samples().map_err(|e| Error::Config(e.to_string()))?;
        self.control_samples().map_err(|e| Error::Config(e.to_string()))?;

        let hp = self.hankel_params();
        hp.validate().map_err(|e| Error::Config(e.to_string()))?;
        let need = self.hankel.start + hp.required_samples();
        let have = self.train_samples()?;
        if need > have {
            return Err(Error::Config(format!(
                "Hankel sizes need {need} training samples (start + N + M + 2) but {} time units at dt {} give {have}",
                self.train_duration, self.dt
            )));
        }
        if !(self.hankel.pinv_rtol >= 0.0 && self.hankel.pinv_rtol.is_finite()) {
            return Err(Error::Config(format!(
                "hankel.pinv_rtol must be >= 0, got {}",
                self.hankel.pinv_rtol
            )));
        }
        positive("lqr.r", self.lqr.r)?;
        if !(self.lqr.q >= 0.0 && self.lqr.q.is_finite()) {
            return Err(Error::Config(format!("lqr.q must be >= 0, got {}", self.lqr.q)));
        }
        if self.lqr.max_iterations == 0 {
            return Err(Error::Config("lqr.max_iterations must be >= 1".into()));
        }

        match self.system {
            SystemKind::Pendulum => {
                let p = &self.pendulum;
                positive("pendulum.g", p.g)?;
                positive("pendulum.length", p.length)?;
                positive("pendulum.theta_star", p.theta_star)?;
                if !(p.damping >= 0.0 && p.damping.is_finite()) {
                    return Err(Error::Config(format!(
                        "pendulum.damping must be >= 0, got {}",
                        p.damping
                    )));
                }
                if !(p.theta0.is_finite() && p.omega0.is_finite()) {
                    return Err(Error::Config("pendulum initial state must be finite".into()));
                }
            }
            SystemKind::Walker => {
                let w = &self.walker;
                if let Some(g) = w.gamma {
                    if !(g >= 0.0 && g.is_finite()) {
                        return Err(Error::Config(format!("walker.gamma must be >= 0, got {g}")));
                    }
                }
                if w.guess.len() != 4 || w.guess.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("walker.guess must hold 4 finite values".into()));
                }
                for (name, v) in [("damping_stance", w.damping_stance), ("damping_swing", w.damping_swing)] {
                    if !(v >= 0.0 && v.is_finite()) {
                        return Err(Error::Config(format!("walker.{name} must be >= 0, got {v}")));
                    }
                }
            }
            SystemKind::LinearOscillator => {
                let o = &self.linear_oscillator;
                if o.x0.len() != 2 || o.x0.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("linear_oscillator.x0 must hold 2 finite values".into()));
                }
            }
        }

        if let Some(d) = &self.disturbance {
            if d.at_time.is_some() == d.after_events.is_some() {
                return Err(Error::Config(
                    "disturbance needs exactly one of at_time and after_events".into(),
                ));
            }
            if d.delta.len() != self.n() {
                return Err(Error::Config(format!(
                    "disturbance.delta has {} entries, the system has {} states",
                    d.delta.len(),
                    self.n()
                )));
            }
            if let Some(t) = d.at_time {
                if !(t >= 0.0 && t <= self.control_duration) {
                    return Err(Error::Config(format!(
                        "disturbance.at_time {t} is outside the control horizon [0, {}]",
                        self.control_duration
                    )));
                }
            }
        }
        Ok(())
    }

    /// Disturbance schedule on the closed-loop clock, where t = 0 is the
    /// first controlled sample. `events_before` is the number of guard
    /// events logged up to and including that sample.
    pub fn disturbance_schedule(&self, events_before: usize) -> DisturbanceSchedule {
        match &self.disturbance {
            None => DisturbanceSchedule::none(),
            Some(d) => {
                let trigger = match (d.at_time, d.after_events) {
                    (Some(t), _) => Trigger::AtTime(t),
                    (None, Some(c)) => Trigger::AfterEvents(c + events_before),
                    (None, None) => return DisturbanceSchedule::none(),
                };
                DisturbanceSchedule::none().push(trigger, d.delta.clone())
            }
        }
    }
}
