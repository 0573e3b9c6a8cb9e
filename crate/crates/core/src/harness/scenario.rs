//! Scenario files: everything one closed-loop run needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::signal::{self, Signal};
use super::HarnessError;
use crate::ltv_mpc::MpcConfig;
use crate::nmpc::NlpOptions;
use crate::plant::PlantParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Ltv,
    Nmpc,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    Equilibrium,
    Explicit(Vec<f64>),
}

impl Default for InitialState {
    fn default() -> Self {
        Self::Equilibrium
    }
}

fn default_y1_nom() -> f64 {
    5.0
}
fn default_y1_as() -> f64 {
    2.0
}
fn default_y2_nom() -> f64 {
    1.69
}
fn default_plant_substeps() -> usize {
    100
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Parameter file path; omitted means the shipped defaults.
    #[serde(default)]
    pub params_path: Option<PathBuf>,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub nlp: NlpOptions,
    pub signal: SignalSource,
    #[serde(default = "default_y1_nom")]
    pub y1_nom_mw: f64,
    #[serde(default = "default_y1_as")]
    pub y1_as_mw: f64,
    #[serde(default = "default_y2_nom")]
    pub y2_nom_mjs: f64,
    pub duration_s: f64,
    /// RK4 substeps per sampling period for the simulated plant.
    #[serde(default = "default_plant_substeps")]
    pub plant_substeps: usize,
    #[serde(default)]
    pub initial_state: InitialState,
    /// Additive Gaussian measurement noise hook (std per state component);
    /// disabled by default.
    #[serde(default)]
    pub measurement_noise_std: Option<f64>,
    #[serde(default)]
    pub noise_seed: u64,
    /// Directory scenario-relative paths resolve against (set on load).
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut scenario: Scenario = serde_json::from_str(&text).map_err(|e| {
            HarnessError::Scenario(format!("{}: {e}", path.display()))
        })?;
        scenario.base_dir = path.parent().map(|p| p.to_path_buf());
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let steps = self.duration_s / self.mpc.ts_s;
        if (steps - steps.round()).abs() > 1e-9 || steps < 1.0 {
            return Err(HarnessError::Scenario(format!(
                "duration {} s is not a positive multiple of the sampling period {} s",
                self.duration_s, self.mpc.ts_s
            )));
        }
        if self.y1_as_mw < 0.0 {
            return Err(HarnessError::Scenario("y1_as_mw must be >= 0".into()));
        }
        if self.plant_substeps == 0 {
            return Err(HarnessError::Scenario("plant_substeps must be >= 1".into()));
        }
        if let InitialState::Explicit(v) = &self.initial_state {
            if v.len() != crate::plant::NX {
                return Err(HarnessError::Scenario(format!(
                    "explicit initial state needs {} entries, found {}",
                    crate::plant::NX,
                    v.len()
                )));
            }
        }
        self.mpc.validate()?;
        self.nlp.validate()?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else if let Some(base) = &self.base_dir {
            base.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn load_params(&self) -> Result<PlantParams, HarnessError> {
        match &self.params_path {
            Some(p) => Ok(PlantParams::load(self.resolve(p))?),
            None => Ok(crate::default_params()),
        }
    }

    pub fn load_series(&self) -> Result<Signal, HarnessError> {
        match &self.signal {
            SignalSource::Synthetic { seed } => Ok(signal::gen_signal(*seed, self.duration_s)),
            SignalSource::File { path } => signal::load_signal(self.resolve(path)),
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_s / self.mpc.ts_s).round() as usize
    }
}

/// Reference trajectories derived from a normalized series: the electric
/// reference follows `y1_nom + y1_as * s[k]`, the heat reference is held at
/// its nominal value.
#[derive(Clone, Debug)]
pub struct ReferenceTrack {
    pub y1_ref: Vec<f64>,
    pub y2_ref: f64,
}

pub fn build_reference(series: &Signal, y1_nom: f64, y1_as: f64, y2_nom: f64, n_steps: usize) -> ReferenceTrack {
    let y1_ref = (0..n_steps).map(|k| y1_nom + y1_as * series.at(k)).collect();
    ReferenceTrack { y1_ref, y2_ref: y2_nom }
}

impl ReferenceTrack {
    pub fn y1_at(&self, k: usize) -> f64 {
        if self.y1_ref.is_empty() {
            return self.y2_ref;
        }
        self.y1_ref[k.min(self.y1_ref.len() - 1)]
    }

    /// Reference window for one controller step: `n + 1` states, `n` inputs,
    /// derivative states at zero and the desired virtual input equal to the
    /// commanded outputs (unity-DC-gain convention).
    pub fn window(&self, k: usize, n: usize) -> crate::ltv_mpc::RefWindow {
        let mut z_d = Vec::with_capacity(n + 1);
        let mut v_d = Vec::with_capacity(n);
        for l in 0..=n {
            let mut z = nalgebra::SVector::<f64, 9>::zeros();
            z[0] = self.y1_at(k + l);
            z[5] = self.y2_ref;
            z_d.push(z);
            if l < n {
                v_d.push(nalgebra::SVector::<f64, 2>::new(self.y1_at(k + l), self.y2_ref));
            }
        }
        crate::ltv_mpc::RefWindow { z_d, v_d }
    }
}
