//! JSON run configuration shared by the command-line tool and the experiment
//! runners. Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corrector::SolverOptions;
use crate::error::{Error, Result};
use crate::field::FieldSpec;
use crate::grid::{Mass, TorusGrid};
use crate::hierarchy::DirectionSet;
use crate::homogenize::Ensemble;
use crate::operator::{ModelKind, OperatorModel};
use crate::sensitivity::SensitivityConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: ModelKind,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub cap_lambda: f64,
    /// Sine amplitude; defaults to `lambda / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaylorConfig {
    /// Expansion point; defaults to the top-level `xi`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi0: Option<Vec<f64>>,
    pub direction: Vec<f64>,
    pub orders: Vec<usize>,
    pub steps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeConfig {
    pub direction: Vec<f64>,
    /// Quenched difference steps `h` for the representation check.
    pub steps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingConfig {
    pub t_values: Vec<f64>,
    #[serde(default = "unit")]
    pub ball_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Ladder of `T`; each point compares `T` with `2T`.
    pub t_values: Vec<f64>,
    /// Direction of the first-order linearized corrector tracked alongside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthConfig {
    /// Positive offsets `|x0|`; both signs are evaluated.
    pub offsets: Vec<f64>,
    #[serde(default = "unit")]
    pub ball_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceConfig {
    pub radii: Vec<f64>,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoScaleConfig {
    pub epsilons: Vec<f64>,
    /// Grid nodes per unit of the fast variable.
    #[serde(default = "sixteen")]
    pub nodes_per_unit: usize,
    /// Amplitude of the forcing `f = c (sin 2 pi x_1, ..., sin 2 pi x_d)`.
    pub forcing_amplitude: f64,
    /// Spacing of the tabulation grid in `xi`.
    pub table_step: f64,
    /// Tabulation covers `[-w, w]^d`.
    pub table_half_width: f64,
}

fn unit() -> f64 {
    1.0
}

fn sixteen() -> usize {
    16
}

fn default_samples() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub field: FieldSpec,
    pub grid: TorusGrid,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(rename = "T", default = "infinite")]
    pub mass: Mass,
    /// Macroscopic gradient; defaults to `e_1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<Vec<f64>>,
    /// Direction set for `hierarchy` and `derivative`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative: Option<DerivativeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taylor: Option<TaylorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance: Option<VarianceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_scale: Option<TwoScaleConfig>,
}

fn infinite() -> Mass {
    Mass::INFINITE
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Structural checks run before any computation.
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.field.validate()?;
        self.model()?;
        let d = self.grid.d;
        if let Some(xi) = &self.xi {
            check_len("xi", xi, d)?;
        }
        if let Some(dirs) = &self.directions {
            self.direction_set_from(dirs)?;
        }
        if let Some(t) = &self.taylor {
            check_len("taylor.direction", &t.direction, d)?;
            if let Some(x) = &t.xi0 {
                check_len("taylor.xi0", x, d)?;
            }
        }
        if let Some(c) = &self.derivative {
            check_len("derivative.direction", &c.direction, d)?;
        }
        if let Some(c) = &self.variance {
            check_len("variance.direction", &c.direction, d)?;
        }
        if let Some(c) = &self.convergence {
            if let Some(e) = &c.direction {
                check_len("convergence.direction", e, d)?;
            }
        }
        if let Some(s) = &self.sensitivity {
            check_len("sensitivity.center", &s.center, d)?;
            if s.scale.len() != self.field.n_components {
                return Err(Error::InvalidParameter("sensitivity.scale needs one entry per field channel".into()));
            }
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter("samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<OperatorModel<f64>> {
        let m = OperatorModel::new(self.model.name, self.grid.d, self.field.n_components, self.model.lambda, self.model.cap_lambda)?;
        Ok(match self.model.b_scale {
            Some(b) => m.with_b_scale(b),
            None => m,
        })
    }

    pub fn ensemble(&self) -> Result<Ensemble> {
        Ok(Ensemble { model: self.model()?, spec: self.field.clone(), grid: self.grid, mass: self.mass, opts: self.solver })
    }

    pub fn xi(&self) -> Vec<f64> {
        self.xi.clone().unwrap_or_else(|| unit_vector(self.grid.d, 0))
    }

    pub fn direction_set(&self) -> Result<DirectionSet<f64>> {
        match &self.directions {
            Some(d) => self.direction_set_from(d),
            None => DirectionSet::new(vec![unit_vector(self.grid.d, 0)]),
        }
    }

    fn direction_set_from(&self, dirs: &[Vec<f64>]) -> Result<DirectionSet<f64>> {
        for v in dirs {
            check_len("directions", v, self.grid.d)?;
        }
        DirectionSet::normalized(dirs.to_vec())
    }

    /// Copy with the master seed and output directory replaced when given.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<&str>) -> Self {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        if let Some(o) = out {
            self.output_dir = Some(o.to_string());
        }
        self
    }
}

pub fn unit_vector(d: usize, axis: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[axis] = 1.0;
    e
}

fn check_len(name: &str, v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(Error::InvalidParameter(format!("{name} has length {}, expected {d}", v.len())));
    }
    Ok(())
}
